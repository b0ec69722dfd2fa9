"""Portable ``.actv`` activation dumps.

Layout, all little-endian::

    offset  size      field
    0       4         magic b"ACTV"
    4       4         version, uint32 (currently 1)
    8       1         dtype code, uint8 (1 = float32, 2 = float64)
    9       1         ndim, uint8
    10      8*ndim    shape, uint64 each
    ...     ...       row-major payload
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"ACTV"
VERSION = 1
_CODES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_DTYPES = {np.dtype("float32"): 1, np.dtype("float64"): 2}


class ActvFormatError(ValueError):
    pass


def write_actv(path: str | Path, array, dtype="float32") -> None:
    arr = np.ascontiguousarray(np.asarray(array, dtype=dtype))
    code = _DTYPES.get(arr.dtype)
    if code is None:
        raise ActvFormatError(f"unsupported dtype {arr.dtype}")
    if arr.ndim > 255:
        raise ActvFormatError("too many dimensions")
    header = MAGIC + struct.pack("<IBB", VERSION, code, arr.ndim)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(arr.astype(_CODES[code], copy=False).tobytes(order="C"))


def read_actv(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise ActvFormatError(f"{path}: bad magic {raw[:4]!r}")
    version, code, ndim = struct.unpack_from("<IBB", raw, 4)
    if version != VERSION:
        raise ActvFormatError(f"{path}: unsupported version {version}")
    if code not in _CODES:
        raise ActvFormatError(f"{path}: unknown dtype code {code}")
    shape = struct.unpack_from(f"<{ndim}Q", raw, 10)
    offset = 10 + 8 * ndim
    dtype = _CODES[code]
    expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    if len(raw) - offset != expected:
        raise ActvFormatError(f"{path}: payload is {len(raw) - offset} bytes, expected {expected}")
    return np.frombuffer(raw, dtype=dtype, offset=offset).reshape(shape).copy()
