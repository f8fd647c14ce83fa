"""Versioned weight checkpoints.

Layout (all integers little-endian uint32)::

    b"rvbb v1\n"
    meta_len, meta_len bytes of UTF-8 JSON
    n_tensors
    per tensor: ndim, dims[ndim], prod(dims) little-endian float32 values
"""

import json
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"rvbb v1\n"


def checkpoint_bytes(tensors, meta=None) -> bytes:
    meta_raw = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<I", len(meta_raw)), meta_raw, struct.pack("<I", len(tensors))]
    for t in tensors:
        t = np.asarray(t)
        parts.append(struct.pack(f"<I{t.ndim}I", t.ndim, *t.shape))
        parts.append(t.astype("<f4").tobytes())
    return b"".join(parts)


def save_checkpoint(path, tensors, meta=None) -> None:
    Path(path).write_bytes(checkpoint_bytes(tensors, meta))


def load_checkpoint(path):
    """Return ``(tensors, meta)``; tensors come back as float64 arrays."""
    raw = Path(path).read_bytes()
    if not raw.startswith(MAGIC):
        raise FormatError(f"{path}: not an rvbb v1 checkpoint")
    pos = len(MAGIC)

    def take(n):
        nonlocal pos
        if pos + n > len(raw):
            raise FormatError(f"{path}: truncated checkpoint")
        chunk = raw[pos:pos + n]
        pos += n
        return chunk

    (meta_len,) = struct.unpack("<I", take(4))
    meta = json.loads(take(meta_len).decode("utf-8"))
    (n,) = struct.unpack("<I", take(4))
    tensors = []
    for _ in range(n):
        (ndim,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{ndim}I", take(4 * ndim))
        count = int(np.prod(dims)) if dims else 1
        data = np.frombuffer(take(4 * count), dtype="<f4").astype(np.float64)
        tensors.append(data.reshape(dims))
    if pos != len(raw):
        raise FormatError(f"{path}: {len(raw) - pos} trailing bytes")
    return tensors, meta
