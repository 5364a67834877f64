"""CDT1 tensor blobs.

Layout: the magic ``b"CDT1"``, a little-endian u32 rank, ``rank`` little-endian
u32 extents, then the row-major elements as little-endian float64.
"""

from __future__ import annotations

import struct

import numpy as np

from diffcd.errors import LoadError
from diffcd.numerics.tensor import Tensor

MAGIC = b"CDT1"


def encode(t: Tensor | np.ndarray) -> bytes:
    arr = t.data if isinstance(t, Tensor) else np.asarray(t, dtype=np.float64)
    header = MAGIC + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype="<f8").tobytes()


def decode(buf: bytes, offset: int = 0) -> tuple[Tensor, int]:
    """Decode one blob at ``offset``; returns the tensor and the end offset."""
    if buf[offset : offset + 4] != MAGIC:
        raise LoadError(f"bad CDT1 magic at byte {offset}")
    pos = offset + 4
    if len(buf) < pos + 4:
        raise LoadError("truncated CDT1 header")
    (rank,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    if len(buf) < pos + 4 * rank:
        raise LoadError("truncated CDT1 extents")
    shape = struct.unpack_from(f"<{rank}I", buf, pos)
    pos += 4 * rank
    count = int(np.prod(shape, dtype=np.int64))
    end = pos + 8 * count
    if len(buf) < end:
        raise LoadError(f"CDT1 payload truncated: need {end - pos} bytes")
    arr = np.frombuffer(buf, dtype="<f8", count=count, offset=pos).astype(np.float64)
    return Tensor(arr.reshape(shape)), end


def save(path, t: Tensor | np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(encode(t))


def load(path) -> Tensor:
    try:
        with open(path, "rb") as fh:
            buf = fh.read()
    except OSError as exc:
        raise LoadError(f"cannot read {path}: {exc}") from exc
    t, end = decode(buf)
    if end != len(buf):
        raise LoadError(f"{path}: {len(buf) - end} trailing bytes after CDT1 blob")
    return t
