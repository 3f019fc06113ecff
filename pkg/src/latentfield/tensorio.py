"""Little-endian binary tensor container (``LTE1``).

Layout::

    bytes 0-3    magic b"LTE1"
    byte  4      dtype code (0 = float32, 1 = float64)
    byte  5      rank (0..3)
    bytes 6-7    reserved, zero
    bytes 8-19   three u32 dims; unused trailing dims are written as 0
    bytes 20-    row-major payload

The header is 20 bytes: 8 bytes of fixed fields followed by the dims
block.  Latent maps use rank 3 ``(H, W, C)``.
"""

from __future__ import annotations

import io
import struct
from pathlib import Path
from typing import BinaryIO

import numpy as np

from .errors import FormatError

MAGIC = b"LTE1"
_HEADER = struct.Struct("<4sBBH3I")
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}

HEADER_SIZE = _HEADER.size


def pack_tensor(array, dtype=None) -> bytes:
    arr = np.asarray(array)
    if dtype is not None:
        arr = arr.astype(dtype)
    elif arr.dtype not in _CODES:
        arr = arr.astype(np.float32)
    if arr.ndim > 3:
        raise FormatError(f"container supports rank <= 3, got {arr.ndim}")
    code = _CODES[arr.dtype]
    dims = list(arr.shape) + [0] * (3 - arr.ndim)
    header = _HEADER.pack(MAGIC, code, arr.ndim, 0, *dims)
    return header + np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()


def read_tensor_from(stream: BinaryIO) -> np.ndarray:
    head = stream.read(HEADER_SIZE)
    if len(head) != HEADER_SIZE:
        raise FormatError("truncated tensor header")
    magic, code, rank, _reserved, *dims = _HEADER.unpack(head)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if code not in _DTYPES:
        raise FormatError(f"unknown dtype code {code}")
    if rank > 3:
        raise FormatError(f"bad rank {rank}")
    shape = tuple(dims[:rank])
    dt = _DTYPES[code]
    count = int(np.prod(shape, dtype=np.int64)) if rank else 1
    payload = stream.read(count * dt.itemsize)
    if len(payload) != count * dt.itemsize:
        raise FormatError("truncated tensor payload")
    return np.frombuffer(payload, dtype=dt).reshape(shape).astype(dt.newbyteorder("="))


def unpack_tensor(blob: bytes) -> np.ndarray:
    return read_tensor_from(io.BytesIO(blob))


def write_tensor(path, array, dtype=None) -> None:
    Path(path).write_bytes(pack_tensor(array, dtype))


def read_tensor(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise FormatError(f"missing tensor file {path}")
    with path.open("rb") as fh:
        return read_tensor_from(fh)
