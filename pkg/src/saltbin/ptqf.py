"""PTQF dense tensor files.

Layout (little-endian): ``b"PTQF"``, u32 version (1), u8 element type
(0 = float32), u8 rank, 2 padding bytes, ``rank`` u64 dimensions, row-major
payload.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"PTQF"
VERSION = 1
_DTYPES = {0: np.dtype("<f4")}
_HEAD = struct.Struct("<4sIBB2x")


def dumps(array) -> bytes:
    arr = np.asarray(array)
    if arr.ndim > 255:
        raise FormatError(f"rank {arr.ndim} does not fit in a u8")
    payload = np.ascontiguousarray(arr, dtype="<f4")
    head = _HEAD.pack(MAGIC, VERSION, 0, arr.ndim)
    dims = struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + dims + payload.tobytes()


def loads(data: bytes) -> np.ndarray:
    if len(data) < _HEAD.size:
        raise FormatError("truncated PTQF header", offset=len(data))
    magic, version, code, rank = _HEAD.unpack_from(data, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}", offset=0)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", offset=4)
    if code not in _DTYPES:
        raise FormatError(f"unknown element type {code}", offset=8)
    off = _HEAD.size
    if len(data) < off + 8 * rank:
        raise FormatError("truncated dimension table", offset=len(data))
    shape = struct.unpack_from(f"<{rank}Q", data, off)
    off += 8 * rank
    dtype = _DTYPES[code]
    expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    if len(data) - off != expected:
        raise FormatError(f"payload is {len(data) - off} bytes, expected {expected}", offset=off)
    return np.frombuffer(data, dtype=dtype, offset=off).reshape(shape).copy()


def save(path, array) -> None:
    Path(path).write_bytes(dumps(array))


def load(path) -> np.ndarray:
    return loads(Path(path).read_bytes())
