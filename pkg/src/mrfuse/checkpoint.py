"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"MRFU"  u32 version  u32 section_count
    repeated: u32 name_len  name (utf-8)  u64 payload_len  payload

Sections: ``config`` and ``state`` (utf-8 ``key=value`` lines), ``rng``
(utf-8 JSON), ``unet`` and optionally ``mrf`` (tensor tables).  A tensor
table is ``u32 count`` followed by, per tensor: ``u32 name_len  name
u8 dtype (0 = f32, 1 = f64)  u32 ndim  ndim x u32 dims  raw data``.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .meanfield import FusionConfig
from .model import MRFUNet
from .mrf import MRFKernel, MRFNetParams
from .tensor import Tensor
from .unet import UNetConfig, UNetParams

MAGIC = b"MRFU"
VERSION = 1
_DTYPE_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


class CheckpointError(ValueError):
    pass


def _pack_tensors(arrays: dict[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(struct.pack("<I", len(arrays)))
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<"))
        code = _DTYPE_CODES.get(arr.dtype)
        if code is None:
            raise CheckpointError(f"tensor {name!r} has unsupported dtype {arr.dtype}")
        raw_name = name.encode()
        buf.write(struct.pack("<I", len(raw_name)) + raw_name)
        buf.write(struct.pack("<BI", code, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    return buf.getvalue()


def _unpack_tensors(payload: bytes) -> dict[str, np.ndarray]:
    view = memoryview(payload)
    (count,), pos = struct.unpack_from("<I", view, 0), 4
    out = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", view, pos)
        pos += 4
        name = bytes(view[pos:pos + n]).decode()
        pos += n
        code, ndim = struct.unpack_from("<BI", view, pos)
        pos += 5
        shape = struct.unpack_from(f"<{ndim}I", view, pos)
        pos += 4 * ndim
        dtype = _CODE_DTYPES.get(code)
        if dtype is None:
            raise CheckpointError(f"tensor {name!r} has unknown dtype code {code}")
        nbytes = int(np.prod(shape)) * dtype.itemsize
        if pos + nbytes > len(view):
            raise CheckpointError(f"tensor {name!r} is truncated")
        out[name] = np.frombuffer(bytes(view[pos:pos + nbytes]), dtype=dtype).reshape(shape).copy()
        pos += nbytes
    return out


def _kv(d: dict) -> bytes:
    return "".join(f"{k}={v}\n" for k, v in d.items()).encode()


def _parse_kv(raw: bytes) -> dict[str, str]:
    return dict(line.split("=", 1) for line in raw.decode().splitlines() if line)


@dataclass
class Checkpoint:
    config: dict[str, str]
    unet: dict[str, np.ndarray]
    mrf: Optional[dict[str, np.ndarray]] = None
    rng: dict = field(default_factory=dict)
    state: dict[str, str] = field(default_factory=dict)

    @classmethod
    def from_model(cls, model: MRFUNet, epoch: int = 0, best_val_loss: float = float("nan"),
                   seed: Optional[int] = None) -> "Checkpoint":
        cfg = model.unet.config
        fusion = model.fusion
        mrf_kind = {MRFNetParams: "net", MRFKernel: "kernel"}.get(type(model.mrf), "none")
        config = {
            "j": cfg.j, "k": cfg.k, "in_channels": cfg.in_channels, "alpha": repr(cfg.alpha),
            "mrf": mrf_kind,
            "n_iter_test": fusion.n_iter_test,
            "n_iter_train": f"{fusion.n_iter_train[0]},{fusion.n_iter_train[1]}",
            "schedule": fusion.schedule,
        }
        if isinstance(model.mrf, MRFNetParams):
            config["mrf_alpha"] = repr(model.mrf.alpha)
        mrf = None
        if model.mrf is not None:
            mrf = {n: t.data.copy() for n, t in model.mrf.named_parameters()}
        rng = {"seed": seed, "streams": "SeedSequence([seed, epoch, sample_index])"}
        state = {"epoch": epoch, "best_val_loss": repr(float(best_val_loss))}
        return cls({k: str(v) for k, v in config.items()},
                   {n: t.data.copy() for n, t in model.unet.named_parameters()}, mrf, rng,
                   {k: str(v) for k, v in state.items()})

    def to_model(self) -> MRFUNet:
        c = self.config
        cfg = UNetConfig(j=int(c["j"]), k=int(c["k"]), in_channels=int(c["in_channels"]), alpha=float(c["alpha"]))
        unet = UNetParams(cfg, {n: Tensor(a, requires_grad=True, dtype=a.dtype) for n, a in self.unet.items()})
        expected = [n for n, _ in cfg.layer_shapes()]
        if list(unet.tensors) != expected:
            raise CheckpointError("unet section does not match the configured architecture")
        mrf = None
        if c.get("mrf", "none") == "net":
            t = {n: Tensor(a, requires_grad=True, dtype=a.dtype) for n, a in self.mrf.items()}
            mrf = MRFNetParams(t["w1"], t["b1"], t["w2"], t["b2"], float(c.get("mrf_alpha", "0.2")))
        elif c.get("mrf", "none") == "kernel":
            a = self.mrf["log_weights"]
            mrf = MRFKernel(Tensor(a, requires_grad=True, dtype=a.dtype))
        lo, hi = (int(v) for v in c["n_iter_train"].split(","))
        fusion = FusionConfig(n_iter_test=int(c["n_iter_test"]), n_iter_train=(lo, hi), schedule=c["schedule"])
        return MRFUNet(unet, mrf, fusion)

    def to_bytes(self) -> bytes:
        sections = [("config", _kv(self.config)), ("unet", _pack_tensors(self.unet))]
        if self.mrf is not None:
            sections.append(("mrf", _pack_tensors(self.mrf)))
        sections.append(("rng", json.dumps(self.rng, sort_keys=True).encode()))
        sections.append(("state", _kv(self.state)))
        buf = io.BytesIO()
        buf.write(MAGIC + struct.pack("<II", VERSION, len(sections)))
        for name, payload in sections:
            raw = name.encode()
            buf.write(struct.pack("<I", len(raw)) + raw + struct.pack("<Q", len(payload)) + payload)
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        if data[:4] != MAGIC:
            raise CheckpointError("not an MRFU checkpoint (bad magic)")
        version, count = struct.unpack_from("<II", data, 4)
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        pos = 12
        sections = {}
        for _ in range(count):
            (n,) = struct.unpack_from("<I", data, pos)
            name = data[pos + 4:pos + 4 + n].decode()
            pos += 4 + n
            (length,) = struct.unpack_from("<Q", data, pos)
            pos += 8
            if pos + length > len(data):
                raise CheckpointError(f"section {name!r} is truncated")
            sections[name] = data[pos:pos + length]
            pos += length
        for required in ("config", "unet"):
            if required not in sections:
                raise CheckpointError(f"checkpoint has no {required!r} section")
        return cls(
            _parse_kv(sections["config"]),
            _unpack_tensors(sections["unet"]),
            _unpack_tensors(sections["mrf"]) if "mrf" in sections else None,
            json.loads(sections["rng"]) if "rng" in sections else {},
            _parse_kv(sections["state"]) if "state" in sections else {},
        )

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(self.to_bytes())
        return path

    @classmethod
    def load(cls, path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())

    def section_names(self) -> list[str]:
        return ["config", "unet"] + (["mrf"] if self.mrf is not None else []) + ["rng", "state"]


def save_model(model: MRFUNet, path, **state) -> Path:
    return Checkpoint.from_model(model, **state).save(path)


def load_model(path) -> MRFUNet:
    return Checkpoint.load(path).to_model()
