"""Single-file binary checkpoints: named float32 arrays, version-locked.

Byte layout (all integers little-endian):

    magic "SDPK" (4) | version u32 | entry_count u32 |
    per entry: name_len u16 | name utf-8 | ndim u8 | dims u32 * ndim |
               payload float32 LE, C order

Entries are written in sorted-name order, so equal content produces
byte-identical files. Values round-trip bit-exactly (everything stored is
float32 already). Optimizer state and metadata ride along as ordinary
entries under reserved prefixes ("opt.", "__meta.")."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .imageio import FileFormatError
from .tensor import Tensor

MAGIC = b"SDPK"
VERSION = 1
_MAX_NDIM = 8


def save_checkpoint(path, entries: dict) -> None:
    """Write name -> array (or Tensor). Arrays are stored as float32."""
    parts = [MAGIC, struct.pack("<II", VERSION, len(entries))]
    for name in sorted(entries):
        arr = entries[name]
        if isinstance(arr, Tensor):
            arr = arr.data
        arr = np.asarray(arr, dtype="<f4")
        shape = arr.shape  # before ascontiguousarray, which promotes 0-d to (1,)
        raw = name.encode("utf-8")
        if not 0 < len(raw) <= 0xFFFF:
            raise ValueError(f"entry name length out of range: {name!r}")
        if arr.ndim > _MAX_NDIM:
            raise ValueError(f"{name}: ndim {arr.ndim} exceeds {_MAX_NDIM}")
        if any(d > 0xFFFFFFFF for d in shape):
            raise ValueError(f"{name}: dimension overflow")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", len(shape)))
        parts.append(struct.pack(f"<{len(shape)}I", *shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    Path(path).write_bytes(b"".join(parts))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.off = 0

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.data):
            raise FileFormatError("checkpoint truncated")
        out = self.data[self.off:self.off + n]
        self.off += n
        return out


def load_checkpoint(path) -> dict:
    """Read back name -> float32 ndarray. Rejects wrong magic, unknown
    version, truncation, and trailing bytes."""
    r = _Reader(Path(path).read_bytes())
    if r.take(4) != MAGIC:
        raise FileFormatError("not a checkpoint file (bad magic)")
    version, count = struct.unpack("<II", r.take(8))
    if version != VERSION:
        raise FileFormatError(f"unsupported checkpoint version {version}")
    entries: dict = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", r.take(2))
        if name_len == 0:
            raise FileFormatError("empty entry name")
        name = r.take(name_len).decode("utf-8")
        (ndim,) = struct.unpack("<B", r.take(1))
        if ndim > _MAX_NDIM:
            raise FileFormatError(f"{name}: ndim {ndim} exceeds {_MAX_NDIM}")
        dims = struct.unpack(f"<{ndim}I", r.take(4 * ndim))
        n = int(np.prod(dims, dtype=np.int64)) if ndim else 1
        arr = np.frombuffer(r.take(4 * n), dtype="<f4").reshape(dims)
        if name in entries:
            raise FileFormatError(f"duplicate entry {name!r}")
        entries[name] = arr.astype(np.float32)  # own, writable copy
    if r.off != len(r.data):
        raise FileFormatError("trailing bytes after last entry")
    return entries
