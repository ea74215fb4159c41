"""
Refinement
Purpose: post-process a depth map with convolutional spatial propagation.
Key Features:
- l1-normalized affinities whose centre weight keeps constants fixed
- Out-of-image neighbours are masked out before normalization
- Sparse measurements are blended back after every propagation step
- Snapshots at {0, T//2, T} of every kernel size are mixed by per-pixel
  step and kernel confidences
"""

import logging
from typing import Sequence

import numpy as np

from src.config.settings import settings
from src.depth.sparse_depth import SparseDepthMap
from src.engine import functional as F
from src.engine.nn import Conv2d, Module, Parameter
from src.engine.tensor import Tensor
from src.errors import ConfigError, DataError, ShapeError

logger = logging.getLogger(__name__)


def step_schedule(s: int, total_scales: int) -> int:
    """Iteration count T(s) = 2 (S - s): 2 at the coarsest scale, growing by 2 per finer scale."""
    if not 0 <= s < total_scales:
        raise ValueError(f"Scale {s} outside [0, {total_scales})")
    return 2 * (total_scales - s)


def snapshot_steps(steps: int) -> tuple[int, int, int]:
    return 0, steps // 2, steps


def _check_kernel(k: int) -> None:
    if k < 1 or k % 2 == 0:
        raise ConfigError(f"Propagation kernel size must be odd, got {k}")


def neighbor_mask(k: int, height: int, width: int) -> np.ndarray:
    """(1, k*k - 1, H, W) mask of in-image neighbours, row-major over the window without its centre."""
    _check_kernel(k)
    r = k // 2
    ys = np.arange(height)[:, None]
    xs = np.arange(width)[None, :]
    planes = []
    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            if dy == 0 and dx == 0:
                continue
            inside = (ys + dy >= 0) & (ys + dy < height) & (xs + dx >= 0) & (xs + dx < width)
            planes.append(inside)
    return np.stack(planes)[None]


def normalize_affinity(raw: Tensor, mask: np.ndarray,
                       eps: float = settings.AFFINITY_EPS) -> tuple[Tensor, Tensor]:
    """
    kappa_j = raw_j / sum|raw|, kappa_centre = 1 - sum kappa_j.

    Pixels whose masked l1 mass is below `eps` fall back to kappa_j = 0 and a
    centre weight of 1.
    """
    if raw.shape != mask.shape:
        raise ShapeError("normalize_affinity", raw.shape, mask.shape)
    masked = raw * mask.astype(np.float64)
    l1 = masked.abs().sum(axis=1, keepdims=True)
    degenerate = (l1.data < eps).astype(np.float64)
    kappa = masked * (1.0 - degenerate) / (l1 + degenerate)
    center = 1.0 - kappa.sum(axis=1, keepdims=True)
    return kappa, center


def cspn_step(depth: Tensor, kappa: Tensor, center: Tensor, k: int) -> Tensor:
    """One synchronous update D_i <- kappa_i D_i + sum_j kappa_j D_j over the k x k window."""
    _check_kernel(k)
    _, _, height, width = depth.shape
    if kappa.shape != (1, k * k - 1, height, width):
        raise ShapeError("cspn_step", kappa.shape, (1, k * k - 1, height, width))
    half = (k * k - 1) // 2
    weights = F.concat([kappa[:, :half], center, kappa[:, half:]], axis=1)
    patches = F.unfold(depth, k).reshape(1, k * k, height, width)
    return (weights * patches).sum(axis=1, keepdims=True)


def embed_sparse(depth: Tensor, sparse: SparseDepthMap, gamma: Tensor) -> Tensor:
    """D <- (1 - gamma I(S)) D + gamma I(S) S"""
    if sparse.shape != tuple(depth.shape[2:]):
        raise ShapeError("embed_sparse", depth.shape, sparse.shape)
    confidence = gamma * sparse.valid.astype(np.float64)[None, None]
    return (1.0 - confidence) * depth + confidence * sparse.values


def combine(snapshots: dict[tuple[int, int], Tensor], tau: Tensor, sigma: Tensor,
            kernels: Sequence[int], steps: Sequence[int]) -> Tensor:
    """
    D = sum_t sum_k tau_t sigma_k D_{k,t}.

    Written as base + sum tau sigma (D_{k,t} - base) around the shared t = 0
    snapshot; equal because both confidence sets sum to one per pixel.
    """
    missing = [(k, t) for k in kernels for t in steps if (k, t) not in snapshots]
    if missing:
        raise DataError(f"combine: missing propagation snapshots {missing}")
    if tau.shape[1] != len(steps) or sigma.shape[1] != len(kernels):
        raise ShapeError("combine", tau.shape, sigma.shape, f"{len(steps)} steps, {len(kernels)} kernels")
    base = snapshots[(kernels[0], steps[0])]
    total = None
    for ti, t in enumerate(steps):
        for ki, k in enumerate(kernels):
            term = tau[:, ti:ti + 1] * sigma[:, ki:ki + 1] * (snapshots[(k, t)] - base)
            total = term if total is None else total + term
    return base + total


class RefinementHeads(Module):
    """
    Zero-initialised 3x3 generators on the fused feature: raw affinities per kernel,
    embedding confidences, step and kernel confidences.

    `gate` scales the embedding confidence per kernel and starts at 0, so the
    untouched heads leave the refined depth equal to its input.
    """

    def __init__(self, channels: int, kernels: Sequence[int], rng: np.random.Generator):
        super().__init__()
        for k in kernels:
            _check_kernel(k)
        self.kernels = list(kernels)
        self.affinity = [Conv2d(channels, k * k - 1, rng, zero_init=True) for k in self.kernels]
        self.embedding = Conv2d(channels, len(self.kernels), rng, zero_init=True)
        self.step_confidence = Conv2d(channels, 3, rng, zero_init=True)
        self.kernel_confidence = Conv2d(channels, len(self.kernels), rng, zero_init=True)
        self.gate = Parameter(np.zeros(len(self.kernels)))

    def forward(self, fused: Tensor) -> tuple[list[Tensor], Tensor, Tensor, Tensor]:
        raw = [conv(fused) for conv in self.affinity]
        gate = F.clip(self.gate, 0.0, 1.0, straight_through_low=True).reshape(1, len(self.kernels), 1, 1)
        gamma = F.sigmoid(self.embedding(fused)) * gate
        tau = F.softmax(self.step_confidence(fused), axis=1)
        sigma = F.softmax(self.kernel_confidence(fused), axis=1)
        return raw, gamma, tau, sigma


def refine(d_double_prime: Tensor, fused: Tensor, sparse: SparseDepthMap,
           heads: RefinementHeads, steps: int) -> Tensor:
    """Run every kernel's propagation for `steps` iterations and combine the snapshots."""
    _, _, height, width = d_double_prime.shape
    if tuple(fused.shape[2:]) != (height, width):
        raise ShapeError("refine", fused.shape, d_double_prime.shape)
    raw, gamma, tau, sigma = heads(fused)
    kept = snapshot_steps(steps)

    snapshots: dict[tuple[int, int], Tensor] = {}
    for ki, k in enumerate(heads.kernels):
        kappa, center = normalize_affinity(raw[ki], neighbor_mask(k, height, width))
        gamma_k = gamma[:, ki:ki + 1]
        current = d_double_prime
        snapshots[(k, 0)] = current
        for t in range(1, steps + 1):
            current = embed_sparse(cspn_step(current, kappa, center, k), sparse, gamma_k)
            if t in kept:
                snapshots[(k, t)] = current
    logger.debug(f"refine: {height}x{width}, kernels {heads.kernels}, T={steps}")
    return combine(snapshots, tau, sigma, heads.kernels, kept)
