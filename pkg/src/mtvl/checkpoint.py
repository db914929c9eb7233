"""Binary parameter checkpoints.

Layout (all integers little-endian)::

    b"CMTL"  u32 version  u32 count
    count x [u16 name_len, name (utf-8), u32 ndim, ndim x u64 extent, u64 offset]
    payload: float64 arrays back to back; offsets are relative to payload start
"""

from __future__ import annotations

import hashlib
import io
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"CMTL"
VERSION = 1


class CheckpointError(ValueError):
    pass


def dumps(arrays: Mapping[str, np.ndarray]) -> bytes:
    names = list(arrays)
    header = io.BytesIO()
    header.write(MAGIC)
    header.write(struct.pack("<II", VERSION, len(names)))
    offset = 0
    payload = io.BytesIO()
    for name in names:
        arr = np.asarray(arrays[name], dtype="<f8", order="C")
        raw = name.encode("utf-8")
        header.write(struct.pack("<H", len(raw)))
        header.write(raw)
        header.write(struct.pack("<I", arr.ndim))
        header.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        header.write(struct.pack("<Q", offset))
        payload.write(arr.tobytes())
        offset += arr.nbytes
    return header.getvalue() + payload.getvalue()


def loads(blob: bytes) -> dict[str, np.ndarray]:
    if blob[:4] != MAGIC:
        raise CheckpointError("not a checkpoint: bad magic")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos = 12
    entries = []
    for _ in range(count):
        (n,) = struct.unpack_from("<H", blob, pos)
        pos += 2
        name = blob[pos : pos + n].decode("utf-8")
        pos += n
        (ndim,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}Q", blob, pos)
        pos += 8 * ndim
        (offset,) = struct.unpack_from("<Q", blob, pos)
        pos += 8
        entries.append((name, shape, offset))
    out = {}
    for name, shape, offset in entries:
        count_ = int(np.prod(shape, dtype=np.int64))
        start = pos + offset
        if start + 8 * count_ > len(blob):
            raise CheckpointError(f"truncated payload for {name!r}")
        out[name] = np.frombuffer(blob, dtype="<f8", count=count_, offset=start).reshape(shape).astype(np.float64)
    return out


def save(path, arrays: Mapping[str, np.ndarray]) -> str:
    """Write a checkpoint and return its sha256 hex digest."""
    blob = dumps(arrays)
    Path(path).write_bytes(blob)
    return hashlib.sha256(blob).hexdigest()


def load(path) -> dict[str, np.ndarray]:
    return loads(Path(path).read_bytes())
