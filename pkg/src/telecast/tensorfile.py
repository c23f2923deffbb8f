"""Binary tensor container.

Layout: 4-byte magic "TNS1", one dtype byte (1 = float32, 2 = float64), one
ndim byte, ndim little-endian u32 dims, then the row-major payload in the
declared dtype (little-endian). Rank is capped at 4.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"TNS1"
MAX_RANK = 4
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 1, np.dtype("float64"): 2}


class TensorFileError(ValueError):
    """Base class for container parse/encode failures."""


class BadMagicError(TensorFileError):
    pass


class TruncatedError(TensorFileError):
    pass


class DimensionError(TensorFileError):
    pass


class DtypeError(TensorFileError):
    pass


def save_tensor(path, array: np.ndarray) -> None:
    array = np.ascontiguousarray(array)
    if array.ndim > MAX_RANK:
        raise DimensionError(f"rank {array.ndim} exceeds container limit {MAX_RANK}")
    code = _CODES.get(array.dtype)
    if code is None:
        raise DtypeError(f"unsupported dtype {array.dtype}; use float32 or float64")
    header = MAGIC + bytes([code, array.ndim])
    header += struct.pack(f"<{array.ndim}I", *array.shape)
    with open(path, "wb") as f:
        f.write(header)
        f.write(array.astype(_DTYPES[code], copy=False).tobytes(order="C"))


def decode_tensor(blob: bytes, name: str = "<bytes>") -> np.ndarray:
    if len(blob) < 6:
        raise TruncatedError(f"{name}: {len(blob)} bytes is shorter than the 6-byte header")
    if blob[:4] != MAGIC:
        raise BadMagicError(f"{name}: bad magic {blob[:4]!r}, expected {MAGIC!r}")
    code, ndim = blob[4], blob[5]
    dtype = _DTYPES.get(code)
    if dtype is None:
        raise DtypeError(f"{name}: unknown dtype code {code}")
    if ndim > MAX_RANK:
        raise DimensionError(f"{name}: rank {ndim} exceeds container limit {MAX_RANK}")
    dims_end = 6 + 4 * ndim
    if len(blob) < dims_end:
        raise TruncatedError(f"{name}: header wants {dims_end} bytes, file has {len(blob)}")
    dims = struct.unpack(f"<{ndim}I", blob[6:dims_end])
    expected = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize if ndim else dtype.itemsize
    actual = len(blob) - dims_end
    if actual != expected:
        raise TruncatedError(
            f"{name}: payload for shape {dims} expects {expected} bytes, found {actual}")
    data = np.frombuffer(blob, dtype=dtype, count=expected // dtype.itemsize, offset=dims_end)
    return data.reshape(dims).copy()


def load_tensor(path) -> np.ndarray:
    path = Path(path)
    return decode_tensor(path.read_bytes(), name=str(path))
