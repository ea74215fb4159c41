"""
Sparse Depth Maps
Purpose: hold sparse measurements and everything computed directly from them.
Key Features:
- Uniform random sampling of sparse inputs from dense ground truth
- Exact N-nearest valid neighbours per pixel, ties broken by row-major index
- Validity-aware weighted pooling with max-subtracted exponential weights
- Periodic pixel shuffle of weight features to full resolution
"""

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
from sklearn.metrics.pairwise import euclidean_distances

from src.config.settings import settings
from src.engine import functional as F
from src.engine.tensor import Tensor
from src.errors import DataError, ShapeError

logger = logging.getLogger(__name__)

# Upper bound on query x source distance entries held at once by knn
KNN_BLOCK_ENTRIES = 1 << 22


@dataclass
class SparseDepthMap:
    """
    Depth grid in meters with 0 at unknown pixels.

    `values` is the differentiable (1, 1, H, W) view of `depth`; pooled maps
    carry the graph back to their weight logits.
    """

    depth: np.ndarray
    valid: np.ndarray
    values: Optional[Tensor] = None

    def __post_init__(self):
        self.depth = np.asarray(self.depth, dtype=np.float64)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.depth.ndim != 2 or self.depth.shape != self.valid.shape:
            raise ShapeError("SparseDepthMap", self.depth.shape, self.valid.shape)
        if not np.array_equal(self.valid, self.depth > 0):
            raise DataError("Sparse depth validity must coincide with strictly positive depth")
        if self.values is None:
            self.values = Tensor(self.depth[None, None])

    @classmethod
    def from_depth(cls, depth: np.ndarray) -> "SparseDepthMap":
        depth = np.where(np.asarray(depth, dtype=np.float64) > 0, depth, 0.0)
        return cls(depth=depth, valid=depth > 0)

    @property
    def shape(self) -> tuple[int, int]:
        return self.depth.shape

    @property
    def count(self) -> int:
        return int(self.valid.sum())

    def flipped(self) -> "SparseDepthMap":
        return SparseDepthMap.from_depth(self.depth[:, ::-1].copy())


@dataclass
class NeighborIndex:
    """
    Per-pixel neighbour lists over a (height, width) grid.

    `index[p]` holds flat row-major source indices sorted by squared distance,
    `offsets[p]` the matching (dx, dy) source-minus-target vectors in pixels.
    """

    index: np.ndarray
    offsets: np.ndarray
    height: int
    width: int

    @property
    def n(self) -> int:
        return self.index.shape[1]

    @property
    def squared_distances(self) -> np.ndarray:
        return (self.offsets ** 2).sum(axis=-1)


def sample_sparse(dense_gt: np.ndarray, n_points: int, seed: int) -> SparseDepthMap:
    """Pick `n_points` strictly positive ground-truth pixels uniformly without replacement."""
    dense_gt = np.asarray(dense_gt, dtype=np.float64)
    positives = np.flatnonzero(dense_gt > 0)
    if n_points < 1 or positives.size < n_points:
        raise DataError(
            f"Cannot sample {n_points} points: only {positives.size} positive pixels available")
    rng = np.random.default_rng(seed)
    chosen = rng.choice(positives, size=n_points, replace=False)
    depth = np.zeros(dense_gt.size)
    depth[chosen] = dense_gt.reshape(-1)[chosen]
    depth = depth.reshape(dense_gt.shape)
    return SparseDepthMap(depth=depth, valid=depth > 0)


def _pixel_coordinates(flat: np.ndarray, width: int) -> np.ndarray:
    return np.stack([flat % width, flat // width], axis=1).astype(np.float64)


def knn(sparse: SparseDepthMap, n: int) -> NeighborIndex:
    """
    The min(n, count) nearest valid pixels of every pixel.

    Squared Euclidean distances on integer pixel coordinates are exact, and a
    stable sort over row-major sources breaks ties by source index.
    """
    if sparse.count < 1:
        raise DataError("knn: the sparse depth map has no valid pixel")
    if n < 1:
        raise ValueError(f"knn: neighbour count must be positive, got {n}")
    height, width = sparse.shape
    sources = np.flatnonzero(sparse.valid)
    source_xy = _pixel_coordinates(sources, width)
    query_xy = _pixel_coordinates(np.arange(height * width), width)
    m = min(n, sources.size)

    block = max(1, KNN_BLOCK_ENTRIES // sources.size)
    index = np.empty((height * width, m), dtype=np.int64)
    for start in range(0, height * width, block):
        stop = min(start + block, height * width)
        # integer coordinates below 2**26: the expanded |q|^2 - 2 q.s + |s|^2 form is exact in float64
        distances = euclidean_distances(query_xy[start:stop], source_xy, squared=True)
        order = np.argsort(distances, axis=1, kind="stable")[:, :m]
        index[start:stop] = sources[order]

    offsets = _pixel_coordinates(index.reshape(-1), width).reshape(height * width, m, 2)
    offsets -= query_xy[:, None, :]
    logger.debug(f"knn: {height}x{width} grid, {sources.size} sources, {m} neighbours per pixel")
    return NeighborIndex(index=index, offsets=offsets, height=height, width=width)


def _windows(x: Tensor, block: int) -> Tensor:
    """(1, 1, H, W) -> (H/b * W/b, b*b), one row per disjoint block in row-major order."""
    _, _, height, width = x.shape
    grid = x.reshape(height // block, block, width // block, block)
    return grid.transpose(0, 2, 1, 3).reshape((height // block) * (width // block), block * block)


def weighted_pool(sparse: SparseDepthMap, weight_logits: Tensor, scale: int,
                  eps: float = settings.POOL_EPS) -> SparseDepthMap:
    """
    Downsample by 2**scale with positive content weights over disjoint blocks.

    Each block yields sum(e^w S) / (sum(e^w I) + eps) with w shifted by the largest
    logit among its valid pixels; the block is valid when any of its pixels is.
    """
    if scale < 1:
        raise ValueError(f"weighted_pool: scale must be >= 1, got {scale}")
    height, width = sparse.shape
    block = 2 ** scale
    if height % block or width % block:
        raise ShapeError("weighted_pool", (height, width), (block, block), "extents must be divisible by 2**scale")
    if weight_logits.ndim == 2:
        weight_logits = weight_logits.reshape(1, 1, height, width)
    if tuple(weight_logits.shape[2:]) != (height, width):
        raise ShapeError("weighted_pool", weight_logits.shape, (height, width))

    depth = _windows(Tensor(sparse.depth[None, None]), block)
    valid = sparse.valid.astype(np.float64)[None, None]
    valid_windows = _windows(Tensor(valid), block)

    # Shift by the largest valid logit so a lone valid pixel keeps weight e^0;
    # invalid pixels get -inf and vanish, all-invalid blocks keep their raw logits.
    in_block = valid_windows.data > 0
    keep = in_block | ~in_block.any(axis=1, keepdims=True)
    logits = _windows(weight_logits, block) + Tensor(np.where(keep, 0.0, -np.inf))
    shifted = logits - F.amax(logits, axis=1, keepdims=True)
    weights = shifted.exp()

    numerator = (weights * depth).sum(axis=1)
    denominator = (weights * valid_windows).sum(axis=1) + eps
    pooled = (numerator / denominator).reshape(1, 1, height // block, width // block)
    pooled_valid = valid_windows.data.max(axis=1).reshape(height // block, width // block) > 0
    pooled_depth = np.where(pooled_valid, pooled.data[0, 0], 0.0)
    return SparseDepthMap(depth=pooled_depth, valid=pooled_valid, values=pooled)


def shuffle_weights(feature: Tensor, scale: int) -> Tensor:
    """
    Periodic shuffle (1, 4**s, H/2**s, W/2**s) -> (1, 1, H, W).

    Channel c = i * 2**s + j of a coarse cell lands at row i, column j of its block.
    """
    block = 2 ** scale
    if feature.ndim != 4 or feature.shape[1] != block * block:
        raise ShapeError("shuffle_weights", feature.shape, (1, block * block), f"expected 4**{scale} channels")
    if scale == 0:
        return feature
    _, _, coarse_h, coarse_w = feature.shape
    cells = feature.reshape(block, block, coarse_h, coarse_w)
    return cells.transpose(2, 0, 3, 1).reshape(1, 1, coarse_h * block, coarse_w * block)
