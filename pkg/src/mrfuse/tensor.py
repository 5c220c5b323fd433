"""Dense channel-first tensors with a small reverse-mode gradient tape.

Every differentiable operation in this module records itself on the active
:class:`GradTape` (if any) when at least one input has ``requires_grad``.
Outside a tape context the operations are plain numpy evaluations, which is
what inference and evaluation use.

Typical training step::

    with GradTape() as tape:
        loss = cross_entropy(log_probs, target)
    tape.backward(loss)      # fills .grad on every leaf that requires it
"""

from __future__ import annotations

import contextlib
import os
from typing import Callable, Iterator, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided

_PRECISIONS = {"f32": np.float32, "f64": np.float64}
_dtype = _PRECISIONS[os.environ.get("MRFUSE_PRECISION", "f32")]
_ACTIVE_TAPES: list["GradTape"] = []


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


def get_dtype() -> type:
    return _dtype


def set_precision(name: str) -> None:
    """Switch the global floating precision (``"f32"`` or ``"f64"``)."""
    global _dtype
    if name not in _PRECISIONS:
        raise ValueError(f"unknown precision {name!r}; expected one of {sorted(_PRECISIONS)}")
    _dtype = _PRECISIONS[name]


def precision_name() -> str:
    return "f64" if _dtype is np.float64 else "f32"


@contextlib.contextmanager
def precision(name: str) -> Iterator[None]:
    previous = precision_name()
    set_precision(name)
    try:
        yield
    finally:
        set_precision(previous)


class Tensor:
    """A numpy array plus autodiff bookkeeping."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype or _dtype)
        if arr.ndim > 0 and 0 in arr.shape:
            raise ShapeError(f"all dims must be >= 1, got {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class GradTape:
    """Ordered record of executed operations for one reverse sweep.

    A tape can be consumed exactly once; afterwards it is empty and any
    further ``backward`` call raises.
    """

    def __init__(self):
        self._records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._consumed = False

    def __enter__(self) -> "GradTape":
        if self._consumed:
            raise RuntimeError("cannot re-enter a consumed GradTape")
        _ACTIVE_TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPES.remove(self)

    def __len__(self) -> int:
        return len(self._records)

    @property
    def consumed(self) -> bool:
        return self._consumed

    def record(self, out: Tensor, parents: tuple[Tensor, ...], backward_fn: Callable) -> None:
        self._records.append((out, parents, backward_fn))

    def backward(self, loss: Tensor, seed: Optional[np.ndarray] = None) -> None:
        backward(loss, self, seed)


def backward(loss: Tensor, tape: GradTape, seed: Optional[np.ndarray] = None) -> None:
    """Reverse sweep over ``tape``, accumulating into ``.grad`` of every leaf."""
    if tape._consumed:
        raise RuntimeError("backward called on a consumed GradTape")
    produced = {id(out) for out, _, _ in tape._records}
    if id(loss) not in produced:
        raise RuntimeError("loss was not produced by an operation recorded on this tape")
    if seed is None:
        if loss.data.size != 1:
            raise ShapeError(f"implicit seed needs a scalar loss, got shape {loss.shape}")
        seed = np.ones_like(loss.data)
    grads: dict[int, np.ndarray] = {id(loss): np.asarray(seed, dtype=loss.dtype)}
    leaves: dict[int, Tensor] = {}
    for out, parents, fn in reversed(tape._records):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        for parent, pg in zip(parents, fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key not in produced:
                leaves[key] = parent
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    for key, leaf in leaves.items():
        g = grads[key].astype(leaf.dtype, copy=False)
        leaf.grad = g if leaf.grad is None else leaf.grad + g
    tape._records.clear()
    tape._consumed = True


def _result(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = False
    if _ACTIVE_TAPES and any(p.requires_grad for p in parents):
        out.requires_grad = True
        _ACTIVE_TAPES[-1].record(out, tuple(parents), backward_fn)
    return out


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# --- elementwise -----------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "add")
    return _result(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "sub")
    return _result(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "mul")
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(a: Tensor, c: float) -> Tensor:
    return _result(a.data * a.dtype.type(c), (a,), lambda g: (g * c,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    return _result(np.log(ad), (a,), lambda g: (g / ad,))


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a per-channel bias ``b[C]`` to ``x[C, ...]``."""
    if b.ndim != 1 or b.shape[0] != x.shape[0]:
        raise ShapeError(f"add_bias: bias {b.shape} does not match channels of {x.shape}")
    view = (-1,) + (1,) * (x.ndim - 1)
    axes = tuple(range(1, x.ndim))
    return _result(x.data + b.data.reshape(view), (x, b), lambda g: (g, g.sum(axis=axes)))


def leaky_relu(x: Tensor, alpha: float = 0.2) -> Tensor:
    """max(x, alpha*x); the subgradient at exactly 0 is ``alpha``."""
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    slope = np.where(x.data > 0, 1.0, alpha).astype(x.dtype)
    return _result(x.data * slope, (x,), lambda g: (g * slope,))


def where(mask: np.ndarray, a: Tensor, b: Tensor) -> Tensor:
    """Select ``a`` where ``mask`` is true, else ``b`` (mask is a constant)."""
    _check_same(a, b, "where")
    mask = np.broadcast_to(mask, a.shape)
    return _result(np.where(mask, a.data, b.data), (a, b),
                   lambda g: (np.where(mask, g, 0), np.where(mask, 0, g)))


def concat_channels(tensors: Sequence[Tensor]) -> Tensor:
    spatial = {t.shape[1:] for t in tensors}
    if len(spatial) != 1:
        raise ShapeError(f"concat_channels: spatial dims differ {sorted(spatial)}")
    splits = np.cumsum([t.shape[0] for t in tensors])[:-1]
    data = np.concatenate([t.data for t in tensors], axis=0)
    return _result(data, tuple(tensors), lambda g: tuple(np.split(g, splits, axis=0)))


# --- reductions ------------------------------------------------------------

def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return _result(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    shape = a.shape
    return _result(np.asarray(a.data.mean()), (a,), lambda g: (np.full(shape, g / n, dtype=a.dtype),))


# --- channel normalisations ------------------------------------------------

def _log_softmax(x: np.ndarray) -> np.ndarray:
    top = x.max(axis=0, keepdims=True)
    shifted = x - top
    return shifted - np.log(np.exp(shifted).sum(axis=0, keepdims=True))


def log_softmax_channels(x: Tensor) -> Tensor:
    """Max-shifted log-sum-exp normalisation over the channel axis."""
    out = _log_softmax(x.data)
    soft = np.exp(out)
    return _result(out, (x,), lambda g: (g - soft * g.sum(axis=0, keepdims=True),))


def softmax_channels(x: Tensor) -> Tensor:
    out = np.exp(_log_softmax(x.data))
    return _result(out, (x,), lambda g: (out * (g - (g * out).sum(axis=0, keepdims=True)),))


def cross_entropy(log_probs: Tensor, target_onehot) -> Tensor:
    """Mean over voxels of ``-sum_k z_k log p_k``."""
    target = np.asarray(target_onehot.data if isinstance(target_onehot, Tensor) else target_onehot)
    if target.shape != log_probs.shape:
        raise ShapeError(f"cross_entropy: target {target.shape} vs log_probs {log_probs.shape}")
    binary = (target == 0) | (target == 1)
    if not binary.all() or np.abs(target.sum(axis=0) - 1.0).max() > 1e-6:
        raise ValueError("cross_entropy: target rows must be one-hot")
    target = target.astype(log_probs.dtype)
    n_voxels = int(np.prod(log_probs.shape[1:]))
    value = -(target * log_probs.data).sum() / n_voxels
    return _result(np.asarray(value, dtype=log_probs.dtype), (log_probs,),
                   lambda g: (-g * target / n_voxels,))


# --- convolutions ----------------------------------------------------------

def _out_dims(spatial: Sequence[int], stride: int) -> tuple:
    return tuple(-(-d // stride) for d in spatial)


def _valid_windows(xp: np.ndarray, k: int, stride: int) -> np.ndarray:
    """[C, D', H', W', k, k, k] strided view of patches of an already padded input."""
    c, d, h, w = xp.shape
    sc, sd, sh, sw = xp.strides
    out = ((d - k) // stride + 1, (h - k) // stride + 1, (w - k) // stride + 1)
    return as_strided(xp, (c,) + out + (k, k, k),
                      (sc, sd * stride, sh * stride, sw * stride, sd, sh, sw), writeable=False)


def _windows(x: np.ndarray, k: int, stride: int) -> np.ndarray:
    pad = k // 2
    if pad:
        c, d, h, w = x.shape
        xp = np.zeros((c, d + 2 * pad, h + 2 * pad, w + 2 * pad), dtype=x.dtype)
        xp[:, pad:pad + d, pad:pad + h, pad:pad + w] = x
    else:
        xp = np.ascontiguousarray(x)
    return _valid_windows(xp, k, stride)


def _conv_forward(x: np.ndarray, w: np.ndarray, stride: int) -> np.ndarray:
    cols = _windows(x, w.shape[2], stride)
    return np.tensordot(w, cols, axes=([1, 2, 3, 4], [0, 4, 5, 6]))


def _conv_grad_weight(x: np.ndarray, g: np.ndarray, k: int, stride: int) -> np.ndarray:
    cols = _windows(x, k, stride)
    return np.tensordot(g, cols, axes=([1, 2, 3], [1, 2, 3]))


def _conv_adjoint(g: np.ndarray, w: np.ndarray, stride: int, in_spatial: Sequence[int]) -> np.ndarray:
    """Apply the transpose of ``x -> conv(x, w, stride)`` to ``g``.

    Zero-upsample ``g`` by the stride, then correlate with the spatially
    flipped, channel-transposed kernel.
    """
    k = w.shape[2]
    lead = k - 1 - k // 2
    up_shape = tuple(stride * (n - 1) + 1 for n in g.shape[1:])
    buf = np.zeros((g.shape[0],) + tuple(d + k - 1 for d in in_spatial), dtype=g.dtype)
    buf[:, lead:lead + up_shape[0]:stride, lead:lead + up_shape[1]:stride,
        lead:lead + up_shape[2]:stride] = g
    flipped = w[:, :, ::-1, ::-1, ::-1]
    cols = _valid_windows(buf, k, 1)
    return np.tensordot(flipped, cols, axes=([0, 2, 3, 4], [0, 4, 5, 6]))


def _check_kernel(x: Tensor, kernel: Tensor, channel_axis: int, op: str, stride: int) -> None:
    if kernel.ndim != 5 or kernel.shape[2:] not in {(1, 1, 1), (3, 3, 3)}:
        raise ShapeError(f"{op}: kernel must be [Cout, Cin, k, k, k] with k in {{1, 3}}, got {kernel.shape}")
    if x.ndim != 4:
        raise ShapeError(f"{op}: input must be [C, D, H, W], got {x.shape}")
    if x.shape[0] != kernel.shape[channel_axis]:
        raise ShapeError(f"{op}: input has {x.shape[0]} channels but kernel {kernel.shape} "
                         f"expects {kernel.shape[channel_axis]}")
    if stride not in (1, 2):
        raise ValueError(f"{op}: stride must be 1 or 2, got {stride}")


def conv3d(x: Tensor, kernel: Tensor, bias: Optional[Tensor] = None, stride: int = 1) -> Tensor:
    """Zero-padded cross-correlation; output dims are ``ceil(dim / stride)``."""
    _check_kernel(x, kernel, 1, "conv3d", stride)
    xd, wd = x.data, kernel.data
    k = wd.shape[2]
    in_spatial = xd.shape[1:]

    def grads(g):
        return _conv_adjoint(g, wd, stride, in_spatial), _conv_grad_weight(xd, g, k, stride)

    out = _result(_conv_forward(xd, wd, stride), (x, kernel), grads)
    return add_bias(out, bias) if bias is not None else out


def transposed_conv3d(x: Tensor, kernel: Tensor, bias: Optional[Tensor] = None, stride: int = 2,
                      out_spatial: Optional[Sequence[int]] = None) -> Tensor:
    """Adjoint of :func:`conv3d` in its input.

    ``kernel`` has the layout of the forward convolution it transposes, so
    ``x`` carries ``kernel.shape[0]`` channels and the result ``kernel.shape[1]``.
    ``out_spatial`` defaults to ``stride * x.shape[1:]``; any other target must
    map back onto ``x`` under the forward convolution.
    """
    _check_kernel(x, kernel, 0, "transposed_conv3d", stride)
    in_spatial = x.shape[1:]
    if out_spatial is None:
        out_spatial = tuple(stride * d for d in in_spatial)
    out_spatial = tuple(int(d) for d in out_spatial)
    if _out_dims(out_spatial, stride) != in_spatial:
        raise ShapeError(f"transposed_conv3d: target {out_spatial} does not map onto input {in_spatial} "
                         f"at stride {stride}")
    xd, wd = x.data, kernel.data
    k = wd.shape[2]

    def grads(g):
        return _conv_forward(g, wd, stride), _conv_grad_weight(g, xd, k, stride)

    out = _result(_conv_adjoint(xd, wd, stride, out_spatial), (x, kernel), grads)
    return add_bias(out, bias) if bias is not None else out

