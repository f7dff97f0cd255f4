"""Reader/writer for the NDT1 raw tensor format.

Layout: ``b"NDT1"``, one byte dtype code (0 = float32, 1 = float64), one
byte rank, ``rank`` little-endian uint64 extents, then row-major
little-endian values.
"""

import os
import struct

import numpy as np

from .errors import LoadError

MAGIC = b"NDT1"
_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_DTYPE_CODE = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


def encode(array):
    arr = np.asarray(array)
    if arr.dtype not in _DTYPE_CODE:
        arr = arr.astype(np.float32)
    code = _DTYPE_CODE[arr.dtype]
    header = MAGIC + struct.pack("<BB", code, arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype=_CODES[code]).tobytes()


def decode(buf):
    if len(buf) < 6 or buf[:4] != MAGIC:
        raise LoadError("not an NDT1 buffer")
    code, rank = struct.unpack_from("<BB", buf, 4)
    if code not in _CODES:
        raise LoadError(f"unknown dtype code {code}")
    off = 6 + 8 * rank
    if len(buf) < off:
        raise LoadError("truncated NDT1 header")
    shape = struct.unpack_from(f"<{rank}Q", buf, 6)
    dt = _CODES[code]
    count = int(np.prod(shape, dtype=np.int64))
    if len(buf) != off + count * dt.itemsize:
        raise LoadError(f"NDT1 payload size does not match shape {shape}")
    arr = np.frombuffer(buf, dtype=dt, count=count, offset=off).reshape(shape)
    return arr.astype(dt.newbyteorder("="))


def save(path, array):
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(encode(array))
    os.replace(tmp, path)


def load(path):
    with open(path, "rb") as fh:
        return decode(fh.read())
