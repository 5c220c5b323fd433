"""Synthetic labelled phantoms and training-time augmentation.

Label geometry comes from Gaussian blobs per class plus a smooth random
field, resolved by argmax; intensities are class means with per-class
spread, a multiplicative bias field and additive noise.  The
out-of-distribution regime reuses the same geometry stream and changes
only the intensity model (compressed or permuted contrasts, more noise,
a stronger bias field).
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np
from scipy import ndimage

REGIMES = ("in_dist", "out_dist")


@dataclass(frozen=True)
class PhantomSpec:
    shape: tuple[int, int, int] = (32, 32, 32)
    k: int = 4
    blobs_per_class: int = 3
    blob_radius: Optional[float] = None  # voxels; default min(shape) / 6
    smoothness: float = 2.0
    intensity_mean: Optional[tuple[float, ...]] = None  # default linspace(0.2, 1.0, k)
    intensity_std: Optional[tuple[float, ...]] = None  # default 0.05 per class
    noise_std: float = 0.05
    bias_amplitude: float = 0.1
    bias_smoothness: float = 8.0
    regime: str = "in_dist"
    ood_compression: float = 0.5
    ood_permutation: Optional[tuple[int, ...]] = None
    ood_noise_factor: float = 2.0
    ood_bias_factor: float = 2.0

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise ValueError(f"regime must be one of {REGIMES}, got {self.regime!r}")
        if self.k < 1 or self.blobs_per_class < 1:
            raise ValueError("k and blobs_per_class must be positive")
        for name in ("intensity_mean", "intensity_std"):
            value = getattr(self, name)
            if value is not None and len(value) != self.k:
                raise ValueError(f"{name} needs {self.k} entries, got {len(value)}")
        if self.ood_permutation is not None and sorted(self.ood_permutation) != list(range(self.k)):
            raise ValueError(f"ood_permutation must permute range({self.k})")
        if not 0.0 <= self.ood_compression < 1.0:
            raise ValueError("ood_compression must lie in [0, 1)")

    def with_regime(self, regime: str) -> "PhantomSpec":
        return replace(self, regime=regime)

    def base_means(self) -> np.ndarray:
        if self.intensity_mean is not None:
            return np.asarray(self.intensity_mean, dtype=np.float64)
        return np.linspace(0.2, 1.0, self.k)

    def class_means(self) -> np.ndarray:
        """Class means after the regime's contrast change."""
        means = self.base_means()
        if self.regime == "out_dist":
            means = means.mean() + (1.0 - self.ood_compression) * (means - means.mean())
            if self.ood_permutation is not None:
                means = means[list(self.ood_permutation)]
        return means

    def class_stds(self) -> np.ndarray:
        if self.intensity_std is not None:
            return np.asarray(self.intensity_std, dtype=np.float64)
        return np.full(self.k, 0.05)

    def effective_noise(self) -> float:
        return self.noise_std * (self.ood_noise_factor if self.regime == "out_dist" else 1.0)

    def effective_bias(self) -> float:
        return self.bias_amplitude * (self.ood_bias_factor if self.regime == "out_dist" else 1.0)


def smooth_field(rng: np.random.Generator, shape, sigma: float) -> np.ndarray:
    """Zero-mean, unit-variance Gaussian random field smoothed at scale ``sigma``."""
    field = ndimage.gaussian_filter(rng.standard_normal(shape), sigma, mode="wrap")
    field -= field.mean()
    std = field.std()
    return field / std if std > 0 else field


def _labels(spec: PhantomSpec, rng: np.random.Generator) -> np.ndarray:
    shape = spec.shape
    radius = spec.blob_radius or min(shape) / 6.0
    grid = np.stack(np.meshgrid(*[np.arange(s, dtype=np.float64) for s in shape], indexing="ij"))
    scores = np.empty((spec.k,) + tuple(shape))
    for k in range(spec.k):
        score = 0.3 * smooth_field(rng, shape, spec.smoothness)
        for _ in range(spec.blobs_per_class):
            centre = rng.uniform(0, shape).reshape(3, 1, 1, 1)
            score += np.exp(-((grid - centre) ** 2).sum(axis=0) / (2 * radius ** 2))
        scores[k] = score
    offsets = np.zeros((spec.k, 1, 1, 1))
    min_count = int(np.ceil(0.01 * np.prod(shape)))
    for _ in range(1000):
        labels = np.argmax(scores + offsets, axis=0)
        counts = np.bincount(labels.ravel(), minlength=spec.k)
        small = counts < min_count
        if not small.any():
            return labels.astype(np.uint8)[None]
        offsets[small] += 0.02
    raise RuntimeError("could not give every class 1% of the grid")


def generate_phantom(spec: PhantomSpec, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic ``(intensity[1, D, H, W], labels[1, D, H, W] uint8)`` pair."""
    if min(spec.shape) < 4 or np.prod(spec.shape) < 8 * spec.k * spec.blobs_per_class:
        raise ValueError(f"grid {spec.shape} is too small for {spec.k} classes x "
                         f"{spec.blobs_per_class} blobs")
    label_seq, intensity_seq = np.random.SeedSequence(seed).spawn(2)
    labels = _labels(spec, np.random.default_rng(label_seq))

    rng = np.random.default_rng(intensity_seq)
    z = labels[0]
    image = spec.class_means()[z] + spec.class_stds()[z] * rng.standard_normal(spec.shape)
    bias = spec.effective_bias()
    if bias > 0:
        image = image * np.exp(bias * smooth_field(rng, spec.shape, spec.bias_smoothness))
    noise = spec.effective_noise()
    if noise > 0:
        image = image + noise * rng.standard_normal(spec.shape)
    return image[None], labels


@dataclass(frozen=True)
class AugmentationParams:
    deform_amplitude: float = 1.0  # max displacement, voxels
    deform_smoothness: float = 4.0
    bias_amplitude: float = 0.1
    bias_smoothness: float = 8.0
    noise_std: float = 0.02
    seed: int = 0

    @classmethod
    def identity(cls, seed: int = 0) -> "AugmentationParams":
        return cls(0.0, 4.0, 0.0, 8.0, 0.0, seed)


def displacement_field(rng: np.random.Generator, shape, amplitude: float, smoothness: float) -> np.ndarray:
    """Smooth ``[3, D, H, W]`` displacement scaled to max magnitude ``amplitude``."""
    field = np.stack([ndimage.gaussian_filter(rng.standard_normal(shape), smoothness, mode="wrap")
                      for _ in range(3)])
    peak = np.sqrt((field ** 2).sum(axis=0)).max()
    return field * (amplitude / peak) if peak > 0 else field


def warp(volume: np.ndarray, displacement: np.ndarray, order: int) -> np.ndarray:
    """Resample every channel of ``volume`` at ``grid + displacement``."""
    shape = volume.shape[1:]
    coords = np.stack(np.meshgrid(*[np.arange(s, dtype=np.float64) for s in shape], indexing="ij"))
    coords = coords + displacement
    return np.stack([ndimage.map_coordinates(ch, coords, order=order, mode="nearest") for ch in volume])


def augment(image: np.ndarray, labels: np.ndarray, params: AugmentationParams,
            rng: Optional[np.random.Generator] = None) -> tuple[np.ndarray, np.ndarray]:
    """Random smooth warp (both), bias field and noise (image only)."""
    image = np.asarray(image)
    labels = np.asarray(labels)
    if image.shape[1:] != labels.shape[1:]:
        raise ValueError(f"image {image.shape} and labels {labels.shape} differ spatially")
    if rng is None:
        rng = np.random.default_rng(params.seed)
    out_img, out_lab = image.copy(), labels.copy()
    shape = image.shape[1:]
    if params.deform_amplitude > 0:
        disp = displacement_field(rng, shape, params.deform_amplitude, params.deform_smoothness)
        out_img = warp(image.astype(np.float64), disp, order=1).astype(image.dtype)
        out_lab = warp(labels, disp, order=0).astype(labels.dtype)
    if params.bias_amplitude > 0:
        bias = np.exp(params.bias_amplitude * smooth_field(rng, shape, params.bias_smoothness))
        out_img = (out_img * bias).astype(image.dtype)
    if params.noise_std > 0:
        out_img = (out_img + params.noise_std * rng.standard_normal(image.shape)).astype(image.dtype)
    return out_img, out_lab
