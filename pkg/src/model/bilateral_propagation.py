"""
Bilateral Propagation
Purpose: turn a sparse depth map into a dense initial depth map at one scale.
Key Features:
- Each pixel's depth is a softmax-weighted sum of affine-transformed depths of
  its N nearest valid pixels
- The affine coefficients and weights come from one MLP shared by every
  (target, source) pair, conditioned on image encodings at both pixels, the
  inverse-projected source depth and the target-to-source pixel offset
- Ablations zero the offset input (content only) or the image inputs
  (spatial only) so all variants share one parameter layout
"""

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from src.depth.geometry import CameraIntrinsics, inverse_project
from src.depth.sparse_depth import NeighborIndex, SparseDepthMap, knn, shuffle_weights, weighted_pool
from src.engine import functional as F
from src.engine.nn import BatchNorm, Basic2D, Conv2d, Deconv2d, Linear, Module
from src.engine.tensor import Tensor
from src.errors import DataError, ShapeError

logger = logging.getLogger(__name__)

OFFSET_FEATURES = 2
DEPTH_FEATURES = 3


@dataclass
class PriorEncodings:
    image_encoding: Tensor
    depth_encoding: Tensor
    neighbor_index: NeighborIndex
    sparse: SparseDepthMap

    @property
    def pixels(self) -> int:
        return self.neighbor_index.height * self.neighbor_index.width


@dataclass
class BilateralCoefficients:
    """alpha, beta and omega as (pixels, neighbours) tensors."""

    alpha: Tensor
    beta: Tensor
    omega: Tensor

    @classmethod
    def nearest(cls, pixels: int, n: int = 1) -> "BilateralCoefficients":
        """alpha = 1, beta = 0, uniform omega; with n = 1 this is nearest interpolation."""
        return cls(alpha=Tensor(np.ones((pixels, n))),
                   beta=Tensor(np.zeros((pixels, n))),
                   omega=F.softmax(Tensor(np.zeros((pixels, n))), axis=1))


class CoefficientMLP(Module):
    """
    Four Linear + BN + GeLU layers with the second layer's output added to the
    last one's, then a linear head emitting (alpha, beta, omega logit).

    The head starts at zero weights with an alpha bias of 1, so an untrained
    module averages its neighbours' depths.
    """

    def __init__(self, in_features: int, hidden: int, rng: np.random.Generator):
        super().__init__()
        self.in_features = in_features
        self.layers = [Linear(in_features if i == 0 else hidden, hidden, rng) for i in range(4)]
        self.norms = [BatchNorm(hidden) for _ in range(4)]
        self.head = Linear(hidden, 3, rng, zero_init=True)
        self.head.bias.data[0] = 1.0

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.in_features:
            raise ShapeError("CoefficientMLP", x.shape, (x.shape[0], self.in_features))
        outputs = []
        h = x
        for layer, norm in zip(self.layers, self.norms):
            h = F.gelu(norm(layer(h)))
            outputs.append(h)
        return self.head(outputs[3] + outputs[1])


def mlp_in_features(channels: int) -> int:
    return 2 * channels + DEPTH_FEATURES + OFFSET_FEATURES


def _per_pixel(x: Tensor) -> Tensor:
    """(1, C, H, W) -> (H*W, C)"""
    if x.ndim != 4 or x.shape[0] != 1:
        raise ShapeError("per_pixel", x.shape, (1, "C", "H", "W"))
    _, channels, height, width = x.shape
    return x.reshape(channels, height * width).transpose(1, 0)


def generate_coefficients(enc: PriorEncodings, mlp: CoefficientMLP, ablation: str = "full",
                          normalize_offsets: bool = True) -> BilateralCoefficients:
    """Run the shared MLP over every (target, source) pair, softmax omega per target."""
    index = enc.neighbor_index
    pixels, n = index.index.shape
    _, channels, height, width = enc.image_encoding.shape
    if (height, width) != (index.height, index.width) or tuple(enc.depth_encoding.shape[2:]) != (height, width):
        raise ShapeError("generate_coefficients", enc.image_encoding.shape, (index.height, index.width))
    if n < 1:
        raise DataError("generate_coefficients: empty neighbour lists")

    image = _per_pixel(enc.image_encoding)
    depth = _per_pixel(enc.depth_encoding)
    targets = np.repeat(np.arange(pixels), n)
    sources = index.index.reshape(-1)

    offsets = index.offsets.reshape(-1, OFFSET_FEATURES)
    if normalize_offsets:
        offsets = offsets / float(max(height, width))
    if ablation == "spatial_only":
        image_i = Tensor(np.zeros((pixels * n, channels)))
        image_j = image_i
    else:
        image_i = F.gather(image, targets)
        image_j = F.gather(image, sources)
    if ablation == "content_only":
        offsets = np.zeros_like(offsets)

    pairs = F.concat([image_i, image_j, F.gather(depth, sources), Tensor(offsets)], axis=1)
    out = mlp(pairs)
    alpha = out[:, 0].reshape(pixels, n)
    beta = out[:, 1].reshape(pixels, n)
    omega = F.softmax(out[:, 2].reshape(pixels, n), axis=1)
    return BilateralCoefficients(alpha=alpha, beta=beta, omega=omega)


def propagate(sparse: SparseDepthMap, coeffs: BilateralCoefficients, enc: PriorEncodings) -> Tensor:
    """D'_i = sum_j omega_ij (alpha_ij S_j + beta_ij), as a dense (1, 1, H, W) map."""
    index = enc.neighbor_index
    if coeffs.omega.shape != index.index.shape or sparse.shape != (index.height, index.width):
        raise ShapeError("propagate", coeffs.omega.shape, index.index.shape)
    pixels, n = index.index.shape
    values = sparse.values.reshape(pixels, 1)
    source_depth = F.gather(values, index.index).reshape(pixels, n)
    candidates = coeffs.alpha * source_depth + coeffs.beta
    dense = (coeffs.omega * candidates).sum(axis=1)
    return dense.reshape(1, 1, index.height, index.width)


class ImageEncodingFusion(Module):
    """conv([I^s, deconv([F^{s+1}, invproj(D^{s+1})])]) for every scale but the coarsest."""

    def __init__(self, coarse_channels: int, channels: int, rng: np.random.Generator):
        super().__init__()
        self.deconv = Deconv2d(coarse_channels + DEPTH_FEATURES, channels, rng)
        self.merge = Basic2D(2 * channels, channels, rng)

    def forward(self, image_feat: Tensor, fused_prev: Tensor, depth_feature: Tensor) -> Tensor:
        upsampled = self.deconv(F.concat([fused_prev, depth_feature], axis=1))
        return self.merge(F.concat([image_feat, upsampled], axis=1))


def build_prior_encodings(image_feat: Tensor, fused_prev: Optional[Tensor], depth_prev: Optional[Tensor],
                          intr: CameraIntrinsics, sparse: SparseDepthMap, n: int,
                          encoder: Optional[ImageEncodingFusion] = None,
                          pool_head: Optional[Conv2d] = None, scale: int = 0) -> PriorEncodings:
    """
    Image encoding, sparse map, depth encoding and neighbour index at one scale.

    `intr` are the intrinsics of this scale. With `scale` > 0 and a `pool_head`,
    `sparse` is the full-resolution map and is pooled down with weights shuffled
    from the image encoding; otherwise `sparse` is already at this scale.
    """
    coarsest = encoder is None
    if coarsest:
        if fused_prev is not None or depth_prev is not None:
            raise DataError("build_prior_encodings: coarser inputs given at the coarsest scale")
        image_encoding = image_feat
    else:
        if fused_prev is None or depth_prev is None:
            raise DataError("build_prior_encodings: fused features and depth of the coarser scale are required")
        depth_feature = inverse_project(depth_prev, intr.at_scale(1))
        image_encoding = encoder(image_feat, fused_prev, depth_feature)

    if scale > 0 and pool_head is not None:
        logits = shuffle_weights(pool_head(image_encoding), scale)
        sparse = weighted_pool(sparse, logits, scale)
    if sparse.shape != tuple(image_encoding.shape[2:]):
        raise ShapeError("build_prior_encodings", sparse.shape, image_encoding.shape)

    return PriorEncodings(
        image_encoding=image_encoding,
        depth_encoding=inverse_project(sparse.values, intr),
        neighbor_index=knn(sparse, n),
        sparse=sparse,
    )
