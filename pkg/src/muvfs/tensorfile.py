"""Binary tensor container used for videos and parameter checkpoints.

Layout, all little-endian:
  magic "MUVT" | version u16 | dtype u8 (0=f64, 1=f32) | ndim u8 |
  ndim extents as u64 | raw row-major payload.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"MUVT"
VERSION = 1
_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<f4")}
_CODES = {"f64": 0, "f32": 1}
_MAX_ELEMENTS = 1 << 34


class TensorFileError(Exception):
    pass


class BadMagicError(TensorFileError):
    pass


class BadVersionError(TensorFileError):
    pass


class BadDtypeError(TensorFileError):
    pass


class TruncatedPayloadError(TensorFileError):
    pass


def write_tensor_file(path, array: np.ndarray, dtype: str = "f64") -> None:
    if dtype not in _CODES:
        raise BadDtypeError(f"unsupported dtype {dtype!r}")
    arr = np.ascontiguousarray(array)
    if not np.all(np.isfinite(arr)):
        raise TensorFileError("refusing to write non-finite values")
    code = _CODES[dtype]
    arr = arr.astype(_DTYPES[code])
    header = MAGIC + struct.pack("<HBB", VERSION, code, arr.ndim)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    Path(path).write_bytes(header + arr.tobytes(order="C"))


def read_tensor_file(path) -> np.ndarray:
    """Read a tensor file; payload is returned as float64."""
    blob = Path(path).read_bytes()
    if len(blob) < 4:
        raise TruncatedPayloadError(f"{path}: truncated header")
    if blob[:4] != MAGIC:
        raise BadMagicError(f"{path}: bad magic {blob[:4]!r}")
    if len(blob) < 8:
        raise TruncatedPayloadError(f"{path}: truncated header")
    version, code, ndim = struct.unpack("<HBB", blob[4:8])
    if version != VERSION:
        raise BadVersionError(f"{path}: unsupported version {version}")
    if code not in _DTYPES:
        raise BadDtypeError(f"{path}: unknown dtype code {code}")
    shape_end = 8 + 8 * ndim
    if len(blob) < shape_end:
        raise TruncatedPayloadError(f"{path}: truncated shape header")
    shape = struct.unpack(f"<{ndim}Q", blob[8:shape_end])
    count = 1
    for extent in shape:
        count *= extent
    if count > _MAX_ELEMENTS:
        raise TensorFileError(f"{path}: implausible element count {count}")
    dtype = _DTYPES[code]
    expected = shape_end + count * dtype.itemsize
    if len(blob) < expected:
        raise TruncatedPayloadError(
            f"{path}: truncated payload ({len(blob) - shape_end} of {count * dtype.itemsize} bytes)")
    if len(blob) > expected:
        raise TensorFileError(f"{path}: {len(blob) - expected} unexpected trailing bytes")
    flat = np.frombuffer(blob, dtype=dtype, count=count, offset=shape_end)
    return flat.reshape(shape).astype(np.float64)
