"""Stationary MRF prior over labels, as a message on responsibilities.

Two interchangeable forms share the ``message(R)`` interface:

* :class:`MRFKernel` -- a single zero-centre 3x3x3 convolution holding the
  pairwise log-weights ``ln w[k, l, delta]``; the message is linear in R.
* :class:`MRFNetParams` -- the trainable two-layer variant: a zero-centre
  3x3x3 conv to K*K channels, leaky ReLU, then a 1x1x1 conv back to K.

Kernel index ``[k, l, a, b, c]`` corresponds to the neighbour offset
``delta = (a - 1, b - 1, c - 1)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np

from . import tensor as T
from .tensor import Tensor

if TYPE_CHECKING:
    from .unet import UNetConfig

CENTER = (slice(None), slice(None), 1, 1, 1)
SIMPLEX_TOL = 1e-5


class SimplexError(ValueError):
    """Responsibilities left the probability simplex."""


def check_simplex(R: Tensor, tol: float = SIMPLEX_TOL) -> None:
    data = R.data
    worst = float(np.abs(data.sum(axis=0) - 1.0).max())
    if worst > tol or data.min() < -tol or data.max() > 1.0 + tol:
        raise SimplexError(f"responsibilities are off the simplex (max |sum - 1| = {worst:.3g})")


@dataclass
class MRFKernel:
    log_weights: Tensor  # [K, K, 3, 3, 3]

    def __post_init__(self):
        w = self.log_weights
        if w.ndim != 5 or w.shape[0] != w.shape[1] or w.shape[2:] != (3, 3, 3):
            raise T.ShapeError(f"MRF kernel must be [K, K, 3, 3, 3], got {w.shape}")
        w.data[CENTER] = 0

    @property
    def num_classes(self) -> int:
        return self.log_weights.shape[0]

    def message(self, R: Tensor) -> Tensor:
        return mrf_message_linear(self, R)

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return [("log_weights", self.log_weights)]

    def project(self) -> "MRFKernel":
        self.log_weights.data[CENTER] = 0
        return self

    @classmethod
    def zeros(cls, k: int) -> "MRFKernel":
        return cls(Tensor(np.zeros((k, k, 3, 3, 3))))

    @classmethod
    def agreement(cls, k: int, beta: float, offsets: str = "face") -> "MRFKernel":
        """``beta * (2 I - 1)`` on the chosen neighbour offsets, zero elsewhere.

        ``offsets`` is ``"face"`` (6 neighbours) or ``"full"`` (26).
        """
        w = np.zeros((k, k, 3, 3, 3))
        table = beta * (2.0 * np.eye(k) - 1.0)
        for delta in neighbour_offsets(offsets):
            a, b, c = (d + 1 for d in delta)
            w[:, :, a, b, c] = table
        return cls(Tensor(w))

    @classmethod
    def random_symmetric(cls, k: int, rng: np.random.Generator, scale: float = 1.0,
                         offsets: str = "full") -> "MRFKernel":
        """Gaussian kernel with ``W[k, l, d] == W[l, k, -d]`` on the chosen offsets.

        Symmetric kernels are the ones for which the mean-field update is an
        exact coordinate minimiser of the free energy.
        """
        a = rng.normal(size=(k, k, 3, 3, 3)) * scale
        w = 0.5 * (a + a.transpose(1, 0, 2, 3, 4)[:, :, ::-1, ::-1, ::-1])
        mask = np.zeros((3, 3, 3))
        for d in neighbour_offsets(offsets):
            mask[d[0] + 1, d[1] + 1, d[2] + 1] = 1.0
        return cls(Tensor(w * mask))

    def is_symmetric(self, tol: float = 0.0) -> bool:
        w = self.log_weights.data
        return bool(np.abs(w - w.transpose(1, 0, 2, 3, 4)[:, :, ::-1, ::-1, ::-1]).max() <= tol)


def neighbour_offsets(kind: str = "full") -> list[tuple[int, int, int]]:
    offsets = [(a, b, c) for a in (-1, 0, 1) for b in (-1, 0, 1) for c in (-1, 0, 1)
               if (a, b, c) != (0, 0, 0)]
    if kind == "full":
        return offsets
    if kind == "face":
        return [d for d in offsets if sum(map(abs, d)) == 1]
    if kind == "odd":
        # offsets joining opposite checkerboard parities (faces and corners)
        return [d for d in offsets if sum(map(abs, d)) % 2 == 1]
    raise ValueError(f"unknown neighbourhood {kind!r}")


@dataclass
class MRFNetParams:
    w1: Tensor  # [K*K, K, 3, 3, 3], centre taps structurally zero
    b1: Tensor  # [K*K]
    w2: Tensor  # [K, K*K, 1, 1, 1]
    b2: Tensor  # [K]
    alpha: float = 0.2

    @property
    def num_classes(self) -> int:
        return self.w2.shape[0]

    def message(self, R: Tensor) -> Tensor:
        return mrf_message_net(self, R)

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return [("w1", self.w1), ("b1", self.b1), ("w2", self.w2), ("b2", self.b2)]

    def project(self) -> "MRFNetParams":
        return project_zero_center(self)


def build_mrf_net(k: int, seed: int, init_scale: float = 0.1, alpha: float = 0.2) -> MRFNetParams:
    """Fan-in scaled uniform weights shrunk by ``init_scale``; zero biases."""
    rng = np.random.default_rng(seed)
    kk = k * k
    bound1 = init_scale * np.sqrt(6.0 / (k * 27))
    bound2 = init_scale * np.sqrt(6.0 / kk)
    w1 = rng.uniform(-bound1, bound1, size=(kk, k, 3, 3, 3))
    w2 = rng.uniform(-bound2, bound2, size=(k, kk, 1, 1, 1))
    params = MRFNetParams(Tensor(w1, requires_grad=True), Tensor(np.zeros(kk), requires_grad=True),
                          Tensor(w2, requires_grad=True), Tensor(np.zeros(k), requires_grad=True), alpha)
    return project_zero_center(params)


def zero_mrf_net(k: int, alpha: float = 0.2) -> MRFNetParams:
    kk = k * k
    return MRFNetParams(Tensor(np.zeros((kk, k, 3, 3, 3)), requires_grad=True),
                        Tensor(np.zeros(kk), requires_grad=True),
                        Tensor(np.zeros((k, kk, 1, 1, 1)), requires_grad=True),
                        Tensor(np.zeros(k), requires_grad=True), alpha)


def project_zero_center(params):
    """Force centre taps to exactly zero, in place; idempotent."""
    if isinstance(params, MRFKernel):
        return params.project()
    params.w1.data[CENTER] = 0
    return params


def mrf_message_linear(kernel: MRFKernel, R: Tensor) -> Tensor:
    """``out[k, i] = sum_delta sum_l ln w[k, l, delta] * R[l, i + delta]``."""
    check_simplex(R)
    if R.shape[0] != kernel.num_classes:
        raise T.ShapeError(f"R has {R.shape[0]} classes, kernel {kernel.num_classes}")
    return T.conv3d(R, kernel.log_weights)


def mrf_message_net(params: MRFNetParams, R: Tensor) -> Tensor:
    check_simplex(R)
    hidden = T.leaky_relu(T.conv3d(R, params.w1, params.b1), params.alpha)
    return T.conv3d(hidden, params.w2, params.b2)


def mrf_param_count(params, include_center: bool = False) -> int:
    """Scalar count; the structurally-zero centre taps are excluded by default."""
    if isinstance(params, MRFKernel):
        k = params.num_classes
        return k * k * 27 - (0 if include_center else k * k)
    total = sum(t.data.size for _, t in params.named_parameters())
    if not include_center:
        total -= params.w1.shape[0] * params.w1.shape[1]
    return total


def mrf_overhead_ratio(params, unet_config: "UNetConfig", include_center: bool = False) -> float:
    """MRF scalar count relative to the UNet scalar count."""
    from .unet import param_count

    return mrf_param_count(params, include_center) / param_count(unet_config)


def format_kernel(kernel: MRFKernel, precision: int = 3) -> str:
    """Human-readable K x K table for every non-centre offset."""
    w = kernel.log_weights.data
    k = kernel.num_classes
    lines = []
    for delta in neighbour_offsets("full"):
        a, b, c = (d + 1 for d in delta)
        lines.append(f"delta = {delta}")
        for row in range(k):
            lines.append("  " + " ".join(f"{w[row, col, a, b, c]:+.{precision}f}" for col in range(k)))
    return "\n".join(lines)


def format_mrf_net(params: MRFNetParams, precision: int = 3) -> str:
    w1 = params.w1.data
    kk, k = w1.shape[:2]
    lines = [f"MRF net: {k} -> {kk} (3x3x3, zero centre) -> leaky ReLU({params.alpha}) -> {k} (1x1x1)"]
    for delta in neighbour_offsets("full"):
        a, b, c = (d + 1 for d in delta)
        lines.append(f"delta = {delta}")
        for row in range(kk):
            lines.append("  " + " ".join(f"{w1[row, col, a, b, c]:+.{precision}f}" for col in range(k)))
    lines.append("1x1x1 mixing:")
    for row in range(k):
        lines.append("  " + " ".join(f"{v:+.{precision}f}" for v in params.w2.data[row, :, 0, 0, 0]))
    return "\n".join(lines)
