"""
File formats for dense grids, sparse points and result tables.

PFM files are written little-endian (scale -1.0) with rows stored bottom to
top as the format prescribes; reading accepts either byte order.
"""

import csv
import logging
import re
from pathlib import Path
from typing import Iterable, Sequence, Union

import numpy as np

from src.depth.sparse_depth import SparseDepthMap
from src.errors import DataError

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

_PFM_DIMENSIONS = re.compile(r"^\s*(\d+)\s+(\d+)\s*$")


def read_pfm(path: PathLike) -> np.ndarray:
    """(H, W) or (H, W, 3) float64 grid."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"PFM file not found: {path}")
    with path.open("rb") as f:
        header = f.readline().rstrip().decode("ascii", errors="replace")
        if header == "PF":
            channels = 3
        elif header == "Pf":
            channels = 1
        else:
            raise DataError(f"{path}: not a PFM file (header {header!r})")
        match = _PFM_DIMENSIONS.match(f.readline().decode("ascii", errors="replace"))
        if not match:
            raise DataError(f"{path}: malformed PFM dimensions line")
        width, height = map(int, match.groups())
        try:
            scale = float(f.readline().rstrip())
        except ValueError as e:
            raise DataError(f"{path}: malformed PFM scale line") from e
        endian = "<" if scale < 0 else ">"
        data = np.fromfile(f, endian + "f4")

    expected = height * width * channels
    if data.size != expected:
        raise DataError(f"{path}: expected {expected} values, found {data.size}")
    shape = (height, width, channels) if channels == 3 else (height, width)
    return np.flipud(data.reshape(shape)).astype(np.float64)


def write_pfm(path: PathLike, grid: np.ndarray) -> None:
    grid = np.asarray(grid)
    if grid.ndim == 3 and grid.shape[2] == 1:
        grid = grid[:, :, 0]
    if not (grid.ndim == 2 or (grid.ndim == 3 and grid.shape[2] == 3)):
        raise DataError(f"PFM grids must be HxW or HxWx3, got {grid.shape}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as f:
        f.write(b"PF\n" if grid.ndim == 3 else b"Pf\n")
        f.write(b"%d %d\n" % (grid.shape[1], grid.shape[0]))
        f.write(b"-1.0\n")
        np.flipud(grid).astype("<f4").tofile(f)


def write_pgm_preview(path: PathLike, depth: np.ndarray) -> None:
    """8-bit binary PGM with the depth range stretched to [0, 255]."""
    depth = np.asarray(depth, dtype=np.float64)
    low, high = float(depth.min()), float(depth.max())
    span = high - low
    scaled = np.zeros_like(depth) if span <= 0 else (depth - low) / span * 255.0
    pixels = np.clip(np.rint(scaled), 0, 255).astype(np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as f:
        f.write(b"P5\n%d %d\n255\n" % (depth.shape[1], depth.shape[0]))
        f.write(pixels.tobytes())


def read_sparse_csv(path: PathLike, height: int, width: int) -> SparseDepthMap:
    """Rows "x,y,depth_m" under a header; every point must lie in the grid with positive depth."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"Sparse depth file not found: {path}")
    depth = np.zeros((height, width))
    with path.open(newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames is None or [name.strip() for name in reader.fieldnames] != ["x", "y", "depth_m"]:
            raise DataError(f"{path}: expected header x,y,depth_m, got {reader.fieldnames}")
        for line, row in enumerate(reader, start=2):
            try:
                x, y, value = int(row["x"]), int(row["y"]), float(row["depth_m"])
            except (TypeError, ValueError) as e:
                raise DataError(f"{path}:{line}: malformed row {row}") from e
            if not (0 <= x < width and 0 <= y < height):
                raise DataError(f"{path}:{line}: point ({x}, {y}) outside the {width}x{height} grid")
            if not np.isfinite(value) or value <= 0:
                raise DataError(f"{path}:{line}: depth must be positive, got {value}")
            depth[y, x] = value
    sparse = SparseDepthMap.from_depth(depth)
    logger.info(f"Loaded {sparse.count} sparse points from {path}")
    return sparse


def write_sparse_csv(path: PathLike, sparse: SparseDepthMap) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    ys, xs = np.nonzero(sparse.valid)
    with path.open("w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["x", "y", "depth_m"])
        for x, y in zip(xs, ys):
            writer.writerow([int(x), int(y), repr(float(sparse.depth[y, x]))])


def write_rows(path: PathLike, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        for row in rows:
            writer.writerow([repr(v) if isinstance(v, float) else v for v in row])


def write_loss_csv(path: PathLike, losses: Sequence[float]) -> None:
    write_rows(path, ["step", "loss"], enumerate(losses))


def read_rows(path: PathLike) -> list[dict[str, str]]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"CSV file not found: {path}")
    with path.open(newline="", encoding="utf-8") as f:
        return list(csv.DictReader(f))
