#!/usr/bin/env python3
"""
Checkpoint Container

Binary layout, all integers little-endian:

    magic      4 bytes  b"TAMO"
    version    uint8
    count      uint32
    count × entry:
        name_len   uint16
        name       utf-8 bytes
        ndim       uint8
        dims       ndim × uint32
        payload    prod(dims) × float64 (row-major)

Round trips are bit-exact.
"""

import logging
import os
import struct
from typing import BinaryIO, Dict

import numpy as np

from task_aware_moe.errors import CheckpointError

logger = logging.getLogger("task_aware_moe.checkpoint")

MAGIC = b"TAMO"
VERSION = 1


def _read(stream: BinaryIO, size: int, path: str) -> bytes:
    data = stream.read(size)
    if len(data) != size:
        raise CheckpointError(f"truncated checkpoint: {path}")
    return data


def save_checkpoint(path: str, state: Dict[str, np.ndarray]) -> None:
    """Write ``state`` to ``path`` in sorted key order"""
    directory = os.path.dirname(path)
    try:
        if directory:
            os.makedirs(directory, exist_ok=True)
        with open(path, "wb") as f:
            f.write(MAGIC)
            f.write(struct.pack("<BI", VERSION, len(state)))
            for name in sorted(state):
                value = np.ascontiguousarray(state[name], dtype="<f8")
                encoded = name.encode("utf-8")
                f.write(struct.pack("<H", len(encoded)))
                f.write(encoded)
                f.write(struct.pack("<B", value.ndim))
                f.write(struct.pack(f"<{value.ndim}I", *value.shape))
                f.write(value.tobytes(order="C"))
    except OSError as e:
        raise CheckpointError(f"cannot write checkpoint {path}: {e}") from e
    logger.info(f"Saved checkpoint with {len(state)} tensors to {path}")


def load_checkpoint(path: str) -> Dict[str, np.ndarray]:
    """Read a checkpoint written by ``save_checkpoint``"""
    if not os.path.exists(path):
        raise CheckpointError(f"checkpoint not found: {path}")
    state: Dict[str, np.ndarray] = {}
    with open(path, "rb") as f:
        if _read(f, 4, path) != MAGIC:
            raise CheckpointError(f"not a TAMO checkpoint: {path}")
        version, count = struct.unpack("<BI", _read(f, 5, path))
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version} in {path}")
        for _ in range(count):
            (name_len,) = struct.unpack("<H", _read(f, 2, path))
            name = _read(f, name_len, path).decode("utf-8")
            (ndim,) = struct.unpack("<B", _read(f, 1, path))
            dims = struct.unpack(f"<{ndim}I", _read(f, 4 * ndim, path))
            size = int(np.prod(dims)) if ndim else 1
            payload = np.frombuffer(_read(f, 8 * size, path), dtype="<f8")
            state[name] = payload.reshape(dims).astype(np.float64)
        if f.read(1):
            raise CheckpointError(f"trailing bytes after {count} entries in {path}")
    logger.debug(f"Loaded {len(state)} tensors from {path}")
    return state
