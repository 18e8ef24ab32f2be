"""Binary checkpoint container.

All integers and floats are little-endian.

    magic        4 bytes  b"PCSD"
    version      u32      currently 1
    config_len   u32      followed by config_len bytes of UTF-8 key=value text
    n_tensors    u32      followed by n_tensors tensor records
    has_adam     u8       0 or 1
    if has_adam:
      step       u64
      lr, weight_decay, beta1, beta2, eps    5 x f64
      n_moments  u32      followed by n_moments tensor records named
                          "m:<param>" / "v:<param>"

A tensor record is

    name_len u32, name bytes (UTF-8), ndim u32, dims ndim x u32,
    values prod(dims) x f32 in C order.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .optim import AdamState

MAGIC = b"PCSD"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    config_text: str = ""
    adam: AdamState | None = None


def _write_record(buf: list[bytes], name: str, arr: np.ndarray) -> None:
    raw = name.encode("utf-8")
    arr = np.ascontiguousarray(arr, dtype="<f4")
    buf.append(struct.pack("<I", len(raw)))
    buf.append(raw)
    buf.append(struct.pack("<I", arr.ndim))
    buf.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
    buf.append(arr.tobytes())


def write_checkpoint(path, tensors: dict[str, np.ndarray], config_text: str = "",
                     adam: AdamState | None = None) -> None:
    buf: list[bytes] = [MAGIC, struct.pack("<I", VERSION)]
    cfg = config_text.encode("utf-8")
    buf.append(struct.pack("<I", len(cfg)))
    buf.append(cfg)
    buf.append(struct.pack("<I", len(tensors)))
    for name in tensors:
        _write_record(buf, name, tensors[name])
    if adam is None:
        buf.append(struct.pack("<B", 0))
    else:
        buf.append(struct.pack("<B", 1))
        buf.append(struct.pack("<Q", adam.step))
        buf.append(struct.pack("<5d", adam.lr, adam.weight_decay, adam.beta1, adam.beta2, adam.eps))
        names = [n for n in tensors if n in adam.m]
        buf.append(struct.pack("<I", 2 * len(names)))
        for n in names:
            _write_record(buf, f"m:{n}", adam.m[n])
            _write_record(buf, f"v:{n}", adam.v[n])
    Path(path).write_bytes(b"".join(buf))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("truncated checkpoint")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def record(self) -> tuple[str, np.ndarray]:
        (name_len,) = self.unpack("<I")
        name = self.take(name_len).decode("utf-8")
        (ndim,) = self.unpack("<I")
        dims = self.unpack(f"<{ndim}I") if ndim else ()
        count = int(np.prod(dims)) if ndim else 1
        arr = np.frombuffer(self.take(4 * count), dtype="<f4").reshape(dims)
        return name, arr.astype(np.float32)


def read_checkpoint(path) -> Checkpoint:
    r = _Reader(Path(path).read_bytes())
    if r.take(4) != MAGIC:
        raise CheckpointError("bad checkpoint header")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (cfg_len,) = r.unpack("<I")
    config_text = r.take(cfg_len).decode("utf-8")
    (n,) = r.unpack("<I")
    tensors = dict(r.record() for _ in range(n))
    adam = None
    (has_adam,) = r.unpack("<B")
    if has_adam:
        (step,) = r.unpack("<Q")
        lr, wd, b1, b2, eps = r.unpack("<5d")
        adam = AdamState(lr=lr, weight_decay=wd, beta1=b1, beta2=b2, eps=eps, step=step)
        (n_mom,) = r.unpack("<I")
        for _ in range(n_mom):
            name, arr = r.record()
            kind, _, pname = name.partition(":")
            if kind == "m":
                adam.m[pname] = arr.copy()
            elif kind == "v":
                adam.v[pname] = arr.copy()
            else:
                raise CheckpointError(f"unknown optimizer record {name!r}")
    if r.pos != len(r.data):
        raise CheckpointError("trailing bytes after checkpoint payload")
    return Checkpoint(tensors=tensors, config_text=config_text, adam=adam)
