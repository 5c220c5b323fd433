"""Exact enumeration of the fused UNet x MRF label distribution on tiny grids.

Configurations are indexed in mixed radix K with voxel 0 (C-order flat
index) least significant.  Everything here is float64.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .mrf import MRFKernel, neighbour_offsets

MAX_CONFIGS = 2 ** 20


@dataclass(frozen=True)
class ExactDistribution:
    grid_shape: tuple[int, int, int]
    k: int
    log_p: np.ndarray  # [K**I]
    log_z: float

    @property
    def probs(self) -> np.ndarray:
        return np.exp(self.log_p)

    @property
    def n_voxels(self) -> int:
        return int(np.prod(self.grid_shape))

    def configurations(self) -> np.ndarray:
        return configurations(self.k, self.n_voxels)


def configurations(k: int, n_voxels: int) -> np.ndarray:
    """``[K**I, I]`` label table in mixed-radix order."""
    idx = np.arange(k ** n_voxels)
    return np.stack([(idx // k ** i) % k for i in range(n_voxels)], axis=1)


def _as64(x) -> np.ndarray:
    return np.asarray(getattr(x, "data", x), dtype=np.float64)


def neighbour_pairs(grid_shape) -> list[tuple[int, int, tuple[int, int, int]]]:
    """Ordered ``(i, j, delta)`` with ``j = i + delta`` inside the grid."""
    d, h, w = grid_shape
    pairs = []
    for i, (x, y, z) in enumerate(np.ndindex(d, h, w)):
        for delta in neighbour_offsets("full"):
            nx, ny, nz = x + delta[0], y + delta[1], z + delta[2]
            if 0 <= nx < d and 0 <= ny < h and 0 <= nz < w:
                pairs.append((i, (nx * h + ny) * w + nz, delta))
    return pairs


def enumerate_product(U_log, kernel: MRFKernel, grid_shape=None) -> ExactDistribution:
    """Normalised ``p(Z) ∝ exp(sum_i U[z_i, i] + 1/2 sum_(i, delta) ln w[z_i, z_(i+delta), delta])``."""
    u = _as64(U_log)
    k = u.shape[0]
    if grid_shape is None:
        grid_shape = u.shape[1:]
    grid_shape = tuple(int(s) for s in grid_shape)
    u = u.reshape(k, -1)
    n_vox = u.shape[1]
    if n_vox != int(np.prod(grid_shape)):
        raise ValueError(f"U has {n_vox} voxels but grid {grid_shape} needs {int(np.prod(grid_shape))}")
    if k ** n_vox > MAX_CONFIGS:
        raise ValueError(f"{k}**{n_vox} configurations exceed the enumeration budget of {MAX_CONFIGS}")
    if kernel.num_classes != k:
        raise ValueError(f"kernel has {kernel.num_classes} classes, U has {k}")
    w = _as64(kernel.log_weights)
    z = configurations(k, n_vox)
    energy = u[z, np.arange(n_vox)].sum(axis=1)
    for i, j, (a, b, c) in neighbour_pairs(grid_shape):
        energy += 0.5 * w[z[:, i], z[:, j], a + 1, b + 1, c + 1]
    log_z = float(logsumexp(energy))
    return ExactDistribution(grid_shape, k, energy - log_z, log_z)


def exact_marginals(dist: ExactDistribution) -> np.ndarray:
    """``[K, D, H, W]`` per-voxel marginals."""
    z = dist.configurations()
    p = dist.probs
    out = np.zeros((dist.k, dist.n_voxels))
    for i in range(dist.n_voxels):
        out[:, i] = np.bincount(z[:, i], weights=p, minlength=dist.k)
    return out.reshape((dist.k,) + dist.grid_shape)


def log_q(R, dist: ExactDistribution) -> np.ndarray:
    """Log-probability of every configuration under the factorised q."""
    r = _as64(R).reshape(dist.k, -1)
    if r.shape[1] != dist.n_voxels:
        raise ValueError(f"R has {r.shape[1]} voxels, distribution {dist.n_voxels}")
    z = dist.configurations()
    with np.errstate(divide="ignore"):
        return np.log(r[z, np.arange(dist.n_voxels)]).sum(axis=1)


def exact_kl(R, dist: ExactDistribution) -> float:
    """``KL(q || p)`` by enumeration."""
    lq = log_q(R, dist)
    q = np.exp(lq)
    mask = q > 0
    return float((q[mask] * (lq[mask] - dist.log_p[mask])).sum())
