"""Self-describing little-endian tensor container (``.mrtn``).

Layout::

    offset  size      field
    0       4         magic b"MRTN"
    4       4         u32 format version (1)
    8       4         u32 dtype code (1 = float64)
    12      4         u32 ndim
    16      8*ndim    u64 dims
    ...     8*prod    float64 payload, row-major

The same byte string is embedded verbatim inside checkpoints, so the
encoder and decoder work on ``bytes`` as well as on paths.
"""
from __future__ import annotations

import os
import struct

import numpy as np

from .errors import FormatError

MAGIC = b"MRTN"
VERSION = 1
DTYPE_CODES = {1: np.dtype("<f8")}
_CODE_OF = {np.dtype("<f8"): 1}
_HEADER = struct.Struct("<4sIII")


def encode_tensor(arr) -> bytes:
    """Serialise a real array (cast to float64) to container bytes."""
    arr = np.asarray(arr)
    if np.iscomplexobj(arr):
        raise FormatError("complex arrays must be stored in the 2-channel real layout")
    arr = np.asarray(arr, dtype="<f8", order="C")  # ascontiguousarray would promote 0-d
    header = _HEADER.pack(MAGIC, VERSION, _CODE_OF[arr.dtype], arr.ndim)
    dims = struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return header + dims + arr.tobytes()


def decode_tensor(buf, offset: int = 0):
    """Decode one tensor starting at ``offset``; returns ``(array, end_offset)``."""
    buf = memoryview(buf)
    if len(buf) - offset < _HEADER.size:
        raise FormatError("truncated tensor header", offset)
    magic, version, code, ndim = _HEADER.unpack_from(buf, offset)
    if magic != MAGIC:
        raise FormatError(f"bad magic {bytes(magic)!r}, expected {MAGIC!r}", offset)
    if version != VERSION:
        raise FormatError(f"unsupported tensor format version {version}", offset + 4)
    if code not in DTYPE_CODES:
        raise FormatError(f"unknown dtype code {code}", offset + 8)
    pos = offset + _HEADER.size
    if len(buf) - pos < 8 * ndim:
        raise FormatError("truncated dimension list", pos)
    dims = struct.unpack_from(f"<{ndim}Q", buf, pos)
    pos += 8 * ndim
    dtype = DTYPE_CODES[code]
    nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    if len(buf) - pos < nbytes:
        raise FormatError(f"truncated payload: need {nbytes} bytes, have {len(buf) - pos}", pos)
    arr = np.frombuffer(buf[pos:pos + nbytes], dtype=dtype).reshape(dims).astype(np.float64)
    return arr, pos + nbytes


def save_tensor(path, arr) -> None:
    data = encode_tensor(arr)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    arr, end = decode_tensor(data)
    if end != len(data):
        raise FormatError(f"{len(data) - end} trailing bytes after tensor payload", end)
    return arr
