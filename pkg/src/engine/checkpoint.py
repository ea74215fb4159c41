"""
Parameter checkpoint files.

Layout: the magic bytes "BPNETCKPT1", then one record per tensor until EOF:
uint32 name length, utf-8 name, uint32 rank, rank x uint32 extents, and the
little-endian float64 payload in row-major order.
"""

import logging
import struct
from pathlib import Path
from typing import Union

import numpy as np

from src.errors import DataError

logger = logging.getLogger(__name__)

MAGIC = b"BPNETCKPT1"


def save_checkpoint(path: Union[str, Path], tensors: dict[str, np.ndarray]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC)
        for name in sorted(tensors):
            array = np.ascontiguousarray(tensors[name], dtype="<f8")
            encoded = name.encode("utf-8")
            f.write(struct.pack("<I", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<I", array.ndim))
            f.write(struct.pack(f"<{array.ndim}I", *array.shape))
            f.write(array.tobytes())
    logger.info(f"Checkpoint with {len(tensors)} tensors written to {path}")


def _read_exact(f, count: int, path: Path) -> bytes:
    chunk = f.read(count)
    if len(chunk) != count:
        raise DataError(f"Truncated checkpoint {path}")
    return chunk


def load_checkpoint(path: Union[str, Path]) -> dict[str, np.ndarray]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"Checkpoint not found: {path}")
    tensors: dict[str, np.ndarray] = {}
    with open(path, "rb") as f:
        if f.read(len(MAGIC)) != MAGIC:
            raise DataError(f"Not a checkpoint file: {path}")
        while True:
            header = f.read(4)
            if not header:
                break
            if len(header) != 4:
                raise DataError(f"Truncated checkpoint {path}")
            (name_length,) = struct.unpack("<I", header)
            name = _read_exact(f, name_length, path).decode("utf-8")
            (rank,) = struct.unpack("<I", _read_exact(f, 4, path))
            shape = struct.unpack(f"<{rank}I", _read_exact(f, 4 * rank, path))
            count = int(np.prod(shape)) if rank else 1
            payload = _read_exact(f, 8 * count, path)
            tensors[name] = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(shape)
    logger.info(f"Checkpoint with {len(tensors)} tensors loaded from {path}")
    return tensors
