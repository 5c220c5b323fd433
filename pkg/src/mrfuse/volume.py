"""Raw volume files with a ``key=value`` text sidecar, and label encodings.

A volume ``name`` is stored as ``name.vol`` (little-endian payload,
channel-major, then depth, row-major within a slice) plus ``name.volh``::

    dims=D,H,W
    channels=C
    dtype=f32|f64|u8
    voxel_mm=a,b,c
    role=intensity|labels|probabilities
    classes=K            (optional, labels only)
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8"), "u8": np.dtype("u1")}
ROLES = ("intensity", "labels", "probabilities")


class VolumeFormatError(ValueError):
    """Malformed volume payload or sidecar."""


@dataclass(frozen=True)
class VolumeHeader:
    dims: tuple[int, int, int]
    channels: int = 1
    dtype: str = "f32"
    voxel_mm: tuple[float, float, float] = (1.0, 1.0, 1.0)
    role: str = "intensity"
    classes: Optional[int] = None

    def __post_init__(self):
        if self.dtype not in DTYPES:
            raise VolumeFormatError(f"unknown element type {self.dtype!r}; expected one of {sorted(DTYPES)}")
        if self.role not in ROLES:
            raise VolumeFormatError(f"unknown role {self.role!r}; expected one of {ROLES}")
        if len(self.dims) != 3 or min(self.dims) < 1 or self.channels < 1:
            raise VolumeFormatError(f"invalid dims {self.dims} / channels {self.channels}")

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return (self.channels,) + tuple(self.dims)

    @property
    def nbytes(self) -> int:
        return int(np.prod(self.shape)) * DTYPES[self.dtype].itemsize

    def to_text(self) -> str:
        lines = [
            "dims=" + ",".join(str(d) for d in self.dims),
            f"channels={self.channels}",
            f"dtype={self.dtype}",
            "voxel_mm=" + ",".join(repr(float(v)) for v in self.voxel_mm),
            f"role={self.role}",
        ]
        if self.classes is not None:
            lines.append(f"classes={self.classes}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "VolumeHeader":
        fields = {}
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise VolumeFormatError(f"sidecar line without '=': {line!r}")
            key, value = line.split("=", 1)
            fields[key.strip()] = value.strip()
        try:
            return cls(
                dims=tuple(int(v) for v in fields["dims"].split(",")),
                channels=int(fields.get("channels", 1)),
                dtype=fields["dtype"],
                voxel_mm=tuple(float(v) for v in fields.get("voxel_mm", "1,1,1").split(",")),
                role=fields.get("role", "intensity"),
                classes=int(fields["classes"]) if "classes" in fields else None,
            )
        except KeyError as exc:
            raise VolumeFormatError(f"sidecar is missing required key {exc.args[0]!r}") from None


def _paths(path) -> tuple[Path, Path]:
    base = Path(path)
    if base.suffix in (".vol", ".volh"):
        base = base.with_suffix("")
    return base.with_name(base.name + ".vol"), base.with_name(base.name + ".volh")


def _check_labels(arr: np.ndarray, classes: Optional[int]) -> None:
    if classes is not None and arr.size and int(arr.max()) >= classes:
        raise VolumeFormatError(f"label value {int(arr.max())} out of range for {classes} classes")


def write_volume(path, array, header: VolumeHeader) -> tuple[Path, Path]:
    arr = np.asarray(getattr(array, "data", array))
    if arr.ndim == 3:
        arr = arr[None]
    if arr.shape != header.shape:
        raise VolumeFormatError(f"array shape {arr.shape} does not match header shape {header.shape}")
    if header.role == "labels":
        if np.any(arr < 0) or np.any(arr != np.round(arr)):
            raise VolumeFormatError("labels must be non-negative integers")
        _check_labels(arr, header.classes)
    payload_path, header_path = _paths(path)
    payload_path.parent.mkdir(parents=True, exist_ok=True)
    payload_path.write_bytes(np.ascontiguousarray(arr, dtype=DTYPES[header.dtype]).tobytes())
    header_path.write_text(header.to_text(), encoding="utf-8")
    return payload_path, header_path


def read_volume(path, num_classes: Optional[int] = None) -> tuple[np.ndarray, VolumeHeader]:
    """Load ``(array[C, D, H, W], header)``; labels are range-checked."""
    payload_path, header_path = _paths(path)
    header = VolumeHeader.from_text(header_path.read_text(encoding="utf-8"))
    raw = payload_path.read_bytes()
    if len(raw) != header.nbytes:
        raise VolumeFormatError(f"{payload_path}: expected {header.nbytes} bytes for shape {header.shape} "
                                f"({header.dtype}), found {len(raw)}")
    arr = np.frombuffer(raw, dtype=DTYPES[header.dtype]).reshape(header.shape).copy()
    if header.role == "labels":
        classes = num_classes if num_classes is not None else header.classes
        _check_labels(arr, classes)
    return arr, header


def one_hot(labels, k: int, dtype=None) -> np.ndarray:
    """``[1, D, H, W]`` (or ``[D, H, W]``) integer labels to ``[K, D, H, W]``."""
    z = np.asarray(labels)
    if z.ndim == 4:
        if z.shape[0] != 1:
            raise ValueError(f"label volume must have one channel, got {z.shape}")
        z = z[0]
    if z.size and (z.min() < 0 or z.max() >= k):
        raise ValueError(f"labels must lie in [0, {k}), found range [{z.min()}, {z.max()}]")
    from .tensor import get_dtype

    out = np.zeros((k,) + z.shape, dtype=dtype or get_dtype())
    np.put_along_axis(out, z[None].astype(np.intp), 1, axis=0)
    return out


def argmax_labels(probs) -> np.ndarray:
    """Most probable class per voxel as ``[1, D, H, W]`` uint8; ties go to the lowest index."""
    p = np.asarray(getattr(probs, "data", probs))
    return np.argmax(p, axis=0).astype(np.uint8)[None]
