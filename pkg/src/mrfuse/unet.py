"""Five-level 3D UNet producing per-voxel class logits.

Encoder level ``n`` is one stride-2 3x3x3 convolution with ``2**(j+n)``
filters (n = 0..4).  The decoder mirrors it with stride-2 transposed
convolutions carrying ``2**(j+4), ..., 2**j`` filters, each followed by
concatenation with the encoder features at the matching resolution.  A
final 1x1x1 convolution maps the full-resolution decoder output to K
logits.  All hidden layers use leaky ReLU; the logits have no activation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor

LEVELS = 5


@dataclass(frozen=True)
class UNetConfig:
    j: int = 1
    k: int = 4
    in_channels: int = 1
    alpha: float = 0.2

    def __post_init__(self):
        if self.j < 0 or self.k < 1 or self.in_channels < 1:
            raise ValueError(f"invalid UNet config {self}")

    @property
    def filters(self) -> tuple[int, ...]:
        return tuple(2 ** (self.j + n) for n in range(LEVELS))

    def layer_shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        """Names and shapes of every parameter tensor, in a fixed order."""
        f = self.filters
        shapes = []
        cin = self.in_channels
        for n in range(LEVELS):
            shapes.append((f"enc{n}.w", (f[n], cin, 3, 3, 3)))
            shapes.append((f"enc{n}.b", (f[n],)))
            cin = f[n]
        # decoder step m upsamples to encoder level LEVELS-2-m (or the input)
        for m, cout in enumerate(reversed(f)):
            shapes.append((f"dec{m}.w", (cin, cout, 3, 3, 3)))
            shapes.append((f"dec{m}.b", (cout,)))
            skip = LEVELS - 2 - m
            cin = cout + (f[skip] if skip >= 0 else 0)
        shapes.append(("out.w", (self.k, cin, 1, 1, 1)))
        shapes.append(("out.b", (self.k,)))
        return shapes


@dataclass
class UNetParams:
    config: UNetConfig
    tensors: dict[str, Tensor] = field(default_factory=dict)

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return list(self.tensors.items())

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]


def param_count(config: UNetConfig) -> int:
    return int(sum(np.prod(shape) for _, shape in config.layer_shapes()))


def _fan_in(name: str, shape: tuple[int, ...]) -> float:
    if name.startswith("dec"):
        # a stride-2 transposed conv feeds each output from ~1/8 of its taps
        return shape[0] * 27 / 8
    return float(np.prod(shape[1:]))


def build_unet(config: UNetConfig, seed: int) -> UNetParams:
    """Uniform(+-sqrt(6 / fan_in)) weights, zero biases; deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    params = UNetParams(config)
    for name, shape in config.layer_shapes():
        if name.endswith(".b"):
            data = np.zeros(shape)
        else:
            bound = np.sqrt(6.0 / _fan_in(name, shape))
            data = rng.uniform(-bound, bound, size=shape)
        params.tensors[name] = Tensor(data, requires_grad=True)
    return params


def unet_forward(params: UNetParams, x: Tensor) -> Tensor:
    """Logits ``[K, D, H, W]`` for an image ``[C, D, H, W]``."""
    cfg = params.config
    if x.ndim != 4 or x.shape[0] != cfg.in_channels:
        raise T.ShapeError(f"UNet expects [{cfg.in_channels}, D, H, W] input, got {x.shape}")
    p = params.tensors
    skips = [x]
    h = x
    for n in range(LEVELS):
        h = T.leaky_relu(T.conv3d(h, p[f"enc{n}.w"], p[f"enc{n}.b"], stride=2), cfg.alpha)
        skips.append(h)
    for m in range(LEVELS):
        target = skips[LEVELS - 1 - m]
        h = T.transposed_conv3d(h, p[f"dec{m}.w"], p[f"dec{m}.b"], stride=2, out_spatial=target.shape[1:])
        h = T.leaky_relu(h, cfg.alpha)
        if m < LEVELS - 1:
            h = T.concat_channels([h, target])
    return T.conv3d(h, p["out.w"], p["out.b"])
