"""CHPM checkpoint container.

Layout: magic "CHPM", u16 version (LE), u32 entry count, then per entry a
u16 name length, UTF-8 name, u8 rank, u32 dims and little-endian f32 data.
Entries are written in the order given, so equal inputs give equal bytes.
"""

from __future__ import annotations

import hashlib
import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np

MAGIC = b"CHPM"
VERSION = 1


class CheckpointError(ValueError):
    pass


def dumps(state) -> bytes:
    parts = [MAGIC, struct.pack("<HI", VERSION, len(state))]
    for name, arr in state.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr, dtype="<f4", order="C")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", arr.ndim) + b"".join(struct.pack("<I", d) for d in arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def loads(data: bytes) -> "OrderedDict[str, np.ndarray]":
    view = memoryview(data)
    if bytes(view[:4]) != MAGIC:
        raise CheckpointError("not a CHPM checkpoint")
    try:
        version, count = struct.unpack_from("<HI", view, 4)
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        off = 10
        out = OrderedDict()
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", view, off)
            off += 2
            name = bytes(view[off:off + nlen]).decode("utf-8")
            off += nlen
            (rank,) = struct.unpack_from("<B", view, off)
            off += 1
            dims = struct.unpack_from(f"<{rank}I", view, off)
            off += 4 * rank
            n = int(np.prod(dims)) if rank else 1
            if off + 4 * n > len(view):
                raise CheckpointError("truncated checkpoint")
            out[name] = np.frombuffer(view[off:off + 4 * n], dtype="<f4").reshape(dims).astype(np.float32)
            off += 4 * n
    except struct.error as exc:
        raise CheckpointError("truncated checkpoint") from exc
    if off != len(view):
        raise CheckpointError("trailing bytes after checkpoint")
    return out


def save(state, path) -> str:
    """Writes the checkpoint and returns its SHA-256 hex digest."""
    data = dumps(state)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def load(path) -> "OrderedDict[str, np.ndarray]":
    return loads(Path(path).read_bytes())


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
