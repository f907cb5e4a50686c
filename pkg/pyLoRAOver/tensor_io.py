"""
Reading and writing tensors in the binary MPOT v1 format

Layout (little-endian):
    bytes 0-3   magic 'MPOT'
    u32         version = 1
    u32         ndim
    ndim x u64  dims
    f64 x product(dims), row-major
"""
import logging
import struct
from pathlib import Path

import numpy as np

from .aux_functions import prod
from .exceptions import TensorFileError
from .tensor import DenseTensor, as_array

MAGIC = b'MPOT'
VERSION = 1


def encode_tensor(t) -> bytes:
    """Serialize a tensor into MPOT v1 bytes"""
    arr = np.ascontiguousarray(as_array(t), dtype='<f8')
    header = MAGIC + struct.pack('<II', VERSION, arr.ndim) + struct.pack(f'<{arr.ndim}Q', *arr.shape)
    return header + arr.tobytes(order='C')


def decode_tensor(raw: bytes) -> DenseTensor:
    """Parse MPOT v1 bytes into a DenseTensor"""
    if len(raw) < 12 or raw[:4] != MAGIC:
        raise TensorFileError('Not an MPOT file (bad magic).')
    version, ndim = struct.unpack_from('<II', raw, 4)
    if version != VERSION:
        raise TensorFileError(f'Unsupported MPOT version {version}.')
    if ndim < 1:
        raise TensorFileError('MPOT tensors need at least one dimension.')
    offset = 12 + 8 * ndim
    if len(raw) < offset:
        raise TensorFileError('Truncated MPOT header.')
    dims = struct.unpack_from(f'<{ndim}Q', raw, 12)
    count = prod(dims)
    if len(raw) != offset + 8 * count:
        raise TensorFileError(f'MPOT payload holds {(len(raw) - offset) // 8} values, dims {list(dims)} need {count}.')
    data = np.frombuffer(raw, dtype='<f8', count=count, offset=offset)
    return DenseTensor(data.astype(np.float64), dims)


def save_tensor(t, filename):
    """Write a tensor to an .mpot file"""
    path = Path(filename)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_tensor(t))
    logging.getLogger('LoRAOver').debug(f'Tensor {list(as_array(t).shape)} saved to "{path}"')


def load_tensor(filename) -> DenseTensor:
    """Read a tensor from an .mpot file"""
    path = Path(filename)
    if not path.is_file():
        raise TensorFileError(f'File not found: "{path}"')
    return decode_tensor(path.read_bytes())
