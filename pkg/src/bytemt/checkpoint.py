"""Versioned binary checkpoints.

Layout (all integers little-endian)::

    magic  b"BYTEMTCK"
    u32    format version
    u32    number of header entries, then per entry: str key, str value
    u32    number of arrays, then per array:
           str name, str dtype (numpy ``str``, e.g. "<f4"), u32 ndim,
           u64 * ndim shape, u64 byte length, raw little-endian data

where ``str`` is a u32 byte length followed by UTF-8 bytes. Header keys
prefixed ``config.`` hold the ModelConfig; ``meta.`` keys hold free-form
metadata. Arrays named ``adam.m.<p>`` / ``adam.v.<p>`` hold optimizer moments.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import ModelConfig, Params

MAGIC = b"BYTEMTCK"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class OptimState:
    step: int = 0
    m: Params = field(default_factory=dict)
    v: Params = field(default_factory=dict)

    @classmethod
    def zeros_like(cls, params: Params) -> "OptimState":
        return cls(0, {k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()})

    def copy(self) -> "OptimState":
        return OptimState(self.step, {k: a.copy() for k, a in self.m.items()},
                          {k: a.copy() for k, a in self.v.items()})


@dataclass(eq=False)
class Checkpoint:
    config: ModelConfig
    params: Params
    step: int = 0
    valid_loss: float | None = None
    optim: OptimState | None = None
    meta: dict[str, str] = field(default_factory=dict)

    def save(self, path) -> None:
        save_checkpoint(self, path)

    @classmethod
    def load(cls, path) -> "Checkpoint":
        return load_checkpoint(path)


def _pack_str(s: str) -> bytes:
    b = s.encode("utf-8")
    return struct.pack("<I", len(b)) + b


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    header = {f"config.{k}": v for k, v in ckpt.config.to_dict().items()}
    header["step"] = str(ckpt.step)
    header["valid_loss"] = "" if ckpt.valid_loss is None else repr(float(ckpt.valid_loss))
    header.update({f"meta.{k}": v for k, v in ckpt.meta.items()})

    arrays = dict(ckpt.params)
    if ckpt.optim is not None:
        header["optim.step"] = str(ckpt.optim.step)
        arrays.update({f"adam.m.{k}": a for k, a in ckpt.optim.m.items()})
        arrays.update({f"adam.v.{k}": a for k, a in ckpt.optim.v.items()})

    chunks = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(header))]
    for k, v in header.items():
        chunks += [_pack_str(k), _pack_str(v)]
    chunks.append(struct.pack("<I", len(arrays)))
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        data = np.ascontiguousarray(le).tobytes()
        chunks += [_pack_str(name), _pack_str(le.dtype.str), struct.pack("<I", arr.ndim)]
        chunks += [struct.pack("<Q", n) for n in arr.shape]
        chunks += [struct.pack("<Q", len(data)), data]
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(b"".join(chunks))
    tmp.replace(path)


class _Reader:
    def __init__(self, data: bytes, path):
        self.data, self.pos, self.path = data, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"{self.path}: truncated checkpoint")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]

    def str(self) -> str:
        return self.take(self.u32()).decode("utf-8")


def load_checkpoint(path) -> Checkpoint:
    r = _Reader(Path(path).read_bytes(), path)
    if r.take(len(MAGIC)) != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version = r.u32()
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    header = {}
    for _ in range(r.u32()):
        k = r.str()
        header[k] = r.str()
    arrays = {}
    for _ in range(r.u32()):
        name, dtype = r.str(), np.dtype(r.str())
        shape = tuple(r.u64() for _ in range(r.u32()))
        raw = r.take(r.u64())
        arrays[name] = np.frombuffer(raw, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))

    config = ModelConfig.from_dict({k[7:]: v for k, v in header.items() if k.startswith("config.")})
    params = {k: a for k, a in arrays.items() if not k.startswith("adam.")}
    optim = None
    if "optim.step" in header:
        optim = OptimState(
            int(header["optim.step"]),
            {k[7:]: a for k, a in arrays.items() if k.startswith("adam.m.")},
            {k[7:]: a for k, a in arrays.items() if k.startswith("adam.v.")},
        )
    return Checkpoint(
        config=config,
        params=params,
        step=int(header.get("step", 0)),
        valid_loss=float(header["valid_loss"]) if header.get("valid_loss") else None,
        optim=optim,
        meta={k[5:]: v for k, v in header.items() if k.startswith("meta.")},
    )


def average_checkpoints(ckpts: list[Checkpoint]) -> Checkpoint:
    """Elementwise mean of every parameter array; optimizer state is dropped."""
    if not ckpts:
        raise CheckpointError("nothing to average")
    first = ckpts[0]
    for c in ckpts[1:]:
        if c.config != first.config or c.params.keys() != first.params.keys():
            raise CheckpointError("checkpoints have different configurations")
        for k, a in c.params.items():
            if a.shape != first.params[k].shape:
                raise CheckpointError(f"shape mismatch for {k}: {a.shape} vs {first.params[k].shape}")
    params = {}
    for k, a in first.params.items():
        acc = np.zeros(a.shape, dtype=np.float64)
        for c in ckpts:
            acc += c.params[k]
        params[k] = (acc / len(ckpts)).astype(a.dtype)
    meta = dict(first.meta)
    meta["averaged_from"] = ",".join(str(c.step) for c in ckpts)
    return Checkpoint(first.config, params, step=max(c.step for c in ckpts),
                      valid_loss=None, optim=None, meta=meta)
