"""DKT1 tensor files.

Layout: magic ``DKT1``, u8 dtype code (0 = f32, 1 = f64), u32 rank,
u32 dims[rank], then the little-endian row-major payload.
"""

from __future__ import annotations

import os
import struct

import numpy as np

MAGIC = b"DKT1"
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class DKTFormatError(ValueError):
    pass


def to_bytes(array) -> bytes:
    arr = np.asarray(array)
    if arr.dtype not in _CODES:
        arr = arr.astype(np.float64) if arr.dtype.itemsize > 4 else arr.astype(np.float32)
    code = _CODES[arr.dtype]
    header = MAGIC + struct.pack("<BI", code, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()


def from_bytes(buf: bytes) -> np.ndarray:
    if buf[:4] != MAGIC:
        raise DKTFormatError("missing DKT1 magic")
    code, rank = struct.unpack_from("<BI", buf, 4)
    if code not in _DTYPES:
        raise DKTFormatError(f"unknown dtype code {code}")
    offset = 9
    dims = struct.unpack_from(f"<{rank}I", buf, offset)
    offset += 4 * rank
    dtype = _DTYPES[code]
    count = int(np.prod(dims)) if rank else 1
    if len(buf) - offset != count * dtype.itemsize:
        raise DKTFormatError("payload size does not match header")
    data = np.frombuffer(buf, dtype=dtype, count=count, offset=offset)
    return data.reshape(dims).astype(dtype.newbyteorder("="))


def save(path: str | os.PathLike, array) -> None:
    with open(path, "wb") as fh:
        fh.write(to_bytes(array))


def load(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        return from_bytes(fh.read())
