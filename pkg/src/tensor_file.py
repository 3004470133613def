"""
Binary tensor records shared by datasets and checkpoints.

A record is an 8-byte magic, a 1-byte rank, rank little-endian uint32 dims and
the payload as little-endian float32 values. Files hold one or more records back to back.
"""
import hashlib
import os
import struct
from typing import BinaryIO, Dict, Iterable, List, Tuple

import numpy as np

MAGIC = b"AMIETNS1"
FLOAT_DTYPE = np.dtype("<f4")
MAX_RANK = 255


class TensorFormatError(RuntimeError):
    pass


def encode_tensor(array) -> bytes:
    array = np.ascontiguousarray(array, dtype=FLOAT_DTYPE)
    if array.ndim > MAX_RANK:
        raise ValueError(f"Rank {array.ndim} exceeds {MAX_RANK}")
    header = MAGIC + struct.pack("<B", array.ndim) + struct.pack(f"<{array.ndim}I", *array.shape)
    return header + array.tobytes()


def read_tensor(stream: BinaryIO) -> np.ndarray:
    magic = stream.read(len(MAGIC))
    if magic != MAGIC:
        raise TensorFormatError(f"Bad tensor magic {magic!r}")
    rank_bytes = stream.read(1)
    if len(rank_bytes) != 1:
        raise TensorFormatError("Truncated tensor header")
    rank = rank_bytes[0]
    dims_bytes = stream.read(4 * rank)
    if len(dims_bytes) != 4 * rank:
        raise TensorFormatError("Truncated tensor dims")
    shape = struct.unpack(f"<{rank}I", dims_bytes)
    count = int(np.prod(shape, dtype=np.int64))
    payload = stream.read(count * FLOAT_DTYPE.itemsize)
    if len(payload) != count * FLOAT_DTYPE.itemsize:
        raise TensorFormatError(f"Truncated tensor payload, expected {count} values")
    return np.frombuffer(payload, dtype=FLOAT_DTYPE).reshape(shape).copy()


def write_tensors(path: str, tensors: Iterable[Tuple[str, np.ndarray]]) -> Dict[str, int]:
    """
    Write named tensors into one file.
    :return: byte offset of each record, by name
    """
    offsets = {}
    position = 0
    with open(path, "wb") as f:
        for name, array in tensors:
            record = encode_tensor(array)
            offsets[name] = position
            f.write(record)
            position += len(record)
        f.flush()
        os.fsync(f.fileno())
    return offsets


def read_tensors(path: str, names: List[str]) -> Dict[str, np.ndarray]:
    """Read records written by write_tensors, in the order they were written."""
    tensors = {}
    with open(path, "rb") as f:
        for name in names:
            tensors[name] = read_tensor(f)
        if f.read(1):
            raise TensorFormatError(f"Trailing bytes after {len(names)} records in {path}")
    return tensors


def file_checksum(paths: Iterable[str]) -> str:
    digest = hashlib.sha256()
    for path in paths:
        with open(path, "rb") as f:
            for chunk in iter(lambda: f.read(1 << 20), b""):
                digest.update(chunk)
    return digest.hexdigest()
