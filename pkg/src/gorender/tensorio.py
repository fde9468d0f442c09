"""GORT binary tensor container.

Layout (little-endian)::

    b"GORT" | u32 version=1 | u8 dtype | u8 ndim | u64 dims[ndim] | raw data

Only dtype code 0 (float32) is defined.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import ContainerError

MAGIC = b"GORT"
VERSION = 1
DTYPES = {0: np.dtype("<f4")}
_CODES = {v: k for k, v in DTYPES.items()}


def encode(array: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(array, dtype="<f4")
    header = MAGIC + struct.pack("<IBB", VERSION, _CODES[arr.dtype], arr.ndim)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return header + arr.tobytes()


def decode(blob: bytes) -> np.ndarray:
    if len(blob) < 10 or blob[:4] != MAGIC:
        raise ContainerError("not a GORT container (bad magic)")
    version, code, ndim = struct.unpack_from("<IBB", blob, 4)
    if version != VERSION:
        raise ContainerError(f"unsupported GORT version {version}")
    if code not in DTYPES:
        raise ContainerError(f"unknown dtype code {code}")
    offset = 10 + 8 * ndim
    if len(blob) < offset:
        raise ContainerError("truncated GORT header")
    dims = struct.unpack_from(f"<{ndim}Q", blob, 10)
    dtype = DTYPES[code]
    expected = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    if len(blob) - offset != expected:
        raise ContainerError(f"payload is {len(blob) - offset} bytes, header implies {expected}")
    return np.frombuffer(blob, dtype=dtype, offset=offset).reshape(dims).astype(np.float32)


def save(path, array: np.ndarray) -> None:
    Path(path).write_bytes(encode(array))


def load(path) -> np.ndarray:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise ContainerError(f"cannot read {path}: {exc}") from exc
    return decode(blob)
