"""CFT1 tensor files.

Layout: magic ``CFT1``, u8 dtype code (0 = f32, 1 = f64), u8 ndim, ndim x u32
dims, then the raw little-endian payload in row-major order.
"""
import hashlib
import struct
from pathlib import Path

import numpy as np

from errors import CorruptFileError, MissingPathError, ShapeError

MAGIC = b"CFT1"
DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
CODE_FOR_DTYPE = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


def encode_tensor(array: np.ndarray) -> bytes:
    array = np.asarray(array)
    code = CODE_FOR_DTYPE.get(array.dtype)
    if code is None:
        raise ShapeError(f"CFT1 stores f32 or f64 tensors, got {array.dtype}")
    if array.ndim > 255:
        raise ShapeError(f"CFT1 supports at most 255 dims, got {array.ndim}")
    header = MAGIC + struct.pack("<BB", code, array.ndim)
    header += struct.pack(f"<{array.ndim}I", *array.shape)
    payload = np.ascontiguousarray(array, dtype=DTYPE_CODES[code]).tobytes()
    return header + payload


def decode_tensor(data: bytes, source: str = "tensor") -> np.ndarray:
    if len(data) < 6 or data[:4] != MAGIC:
        raise CorruptFileError(f"{source}: missing CFT1 header")
    code, ndim = struct.unpack_from("<BB", data, 4)
    if code not in DTYPE_CODES:
        raise CorruptFileError(f"{source}: unknown dtype code {code}")
    offset = 6 + 4 * ndim
    if len(data) < offset:
        raise CorruptFileError(f"{source}: truncated dims")
    shape = struct.unpack_from(f"<{ndim}I", data, 6)
    dtype = DTYPE_CODES[code]
    expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    if len(data) - offset != expected:
        raise CorruptFileError(
            f"{source}: payload has {len(data) - offset} bytes, shape {shape} needs {expected}")
    array = np.frombuffer(data, dtype=dtype, offset=offset).reshape(shape)
    return array.astype(dtype.newbyteorder("="), copy=True)


def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def write_tensor(path, array: np.ndarray) -> str:
    """Write one tensor file; returns the sha256 of the bytes written."""
    data = encode_tensor(array)
    Path(path).write_bytes(data)
    return sha256_hex(data)


def read_tensor_bytes(path) -> bytes:
    path = Path(path)
    if not path.is_file():
        raise MissingPathError(f"tensor file not found: {path}")
    return path.read_bytes()


def read_tensor(path) -> np.ndarray:
    return decode_tensor(read_tensor_bytes(path), source=str(path))
