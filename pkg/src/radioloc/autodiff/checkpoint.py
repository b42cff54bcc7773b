"""Versioned binary parameter checkpoints.

Layout (little endian): magic ``RLCKPT\\0\\0``, u32 version, u32 count, then per
tensor: u16 name length, UTF-8 name, u8 ndim, u32 dims, float64 data; a
trailing SHA-256 digest covers every preceding byte.
"""

from __future__ import annotations

import hashlib
import struct
from pathlib import Path

import numpy as np

from ..io_utils import atomic_write_bytes

MAGIC = b"RLCKPT\0\0"
VERSION = 1


class CheckpointError(ValueError):
    """Unreadable, truncated or corrupted checkpoint."""


def dumps(named: dict[str, np.ndarray]) -> bytes:
    out = [MAGIC, struct.pack("<II", VERSION, len(named))]
    for name, arr in named.items():
        a = np.asarray(arr, dtype="<f8")  # tobytes() is C order; ascontiguousarray would promote 0-d
        nb = name.encode("utf-8")
        out.append(struct.pack("<H", len(nb)))
        out.append(nb)
        out.append(struct.pack("<B", a.ndim))
        out.append(struct.pack(f"<{a.ndim}I", *a.shape))
        out.append(a.tobytes())
    body = b"".join(out)
    return body + hashlib.sha256(body).digest()


def loads(blob: bytes) -> dict[str, np.ndarray]:
    if len(blob) < len(MAGIC) + 8 + 32 or not blob.startswith(MAGIC):
        raise CheckpointError("not a checkpoint (bad magic or too short)")
    body, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError("checkpoint checksum mismatch")
    pos = len(MAGIC)
    version, count = struct.unpack_from("<II", body, pos)
    pos += 8
    if version != VERSION:
        raise CheckpointError(f"checkpoint version {version} unsupported")
    named = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<H", body, pos)
            pos += 2
            name = body[pos:pos + n].decode("utf-8")
            pos += n
            (nd,) = struct.unpack_from("<B", body, pos)
            pos += 1
            shape = struct.unpack_from(f"<{nd}I", body, pos)
            pos += 4 * nd
            size = int(np.prod(shape)) * 8
            if pos + size > len(body):
                raise CheckpointError("truncated tensor data")
            named[name] = np.frombuffer(body, dtype="<f8", count=size // 8, offset=pos).reshape(shape).copy()
            pos += size
    except struct.error as e:
        raise CheckpointError(f"truncated checkpoint: {e}") from e
    if pos != len(body):
        raise CheckpointError("trailing bytes after the last tensor")
    return named


def save(path, named: dict[str, np.ndarray]) -> None:
    atomic_write_bytes(Path(path), dumps(named))


def load(path) -> dict[str, np.ndarray]:
    return loads(Path(path).read_bytes())
