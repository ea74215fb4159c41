"""
Early fusion of the image encoding with the inverse-projected initial depth.

A small U-Net regresses a residual that is added to the initial depth; its
decoder output is the fused feature passed to refinement and the next scale.
"""

import logging

import numpy as np

from src.depth.geometry import CameraIntrinsics, inverse_project
from src.engine import functional as F
from src.engine.nn import BatchNorm, Basic2D, Conv2d, Deconv2d, Module, ResBlock
from src.engine.tensor import Tensor
from src.errors import ShapeError

logger = logging.getLogger(__name__)


class FusionUNet(Module):
    """
    Encoder levels of two residual blocks followed by a stride-2 convolution,
    decoder levels of a stride-2 deconvolution and a skip concatenation.

    Level l runs at width * 2**l channels; the 1-channel residual head is zero-initialised.
    """

    def __init__(self, in_channels: int, width: int, depth: int, rng: np.random.Generator):
        super().__init__()
        if depth < 0:
            raise ValueError(f"U-Net depth must be non-negative, got {depth}")
        self.depth = depth
        widths = [width * 2 ** level for level in range(depth + 1)]
        self.stem = Basic2D(in_channels + 3, width, rng)
        # two residual blocks per level, level l at indices 2l and 2l + 1
        self.encoder = [ResBlock(widths[i // 2], widths[i // 2], rng) for i in range(2 * depth)]
        self.down = [Basic2D(widths[l], widths[l + 1], rng, stride=2) for l in range(depth)]
        self.bottleneck = [ResBlock(widths[depth], widths[depth], rng), ResBlock(widths[depth], widths[depth], rng)]
        self.up = [Deconv2d(widths[l + 1], widths[l], rng) for l in range(depth)]
        self.up_norm = [BatchNorm(widths[l]) for l in range(depth)]
        self.merge = [Basic2D(2 * widths[l], widths[l], rng) for l in range(depth)]
        self.residual_head = Conv2d(width, 1, rng, zero_init=True)

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor]:
        h = self.stem(x)
        skips = []
        for level in range(self.depth):
            h = self.encoder[2 * level + 1](self.encoder[2 * level](h))
            skips.append(h)
            h = self.down[level](h)
        for block in self.bottleneck:
            h = block(h)
        for level in reversed(range(self.depth)):
            h = F.gelu(self.up_norm[level](self.up[level](h)))
            h = self.merge[level](F.concat([skips[level], h], axis=1))
        return h, self.residual_head(h)


def fuse(image_encoding: Tensor, d_prime: Tensor, intr: CameraIntrinsics,
         net: FusionUNet) -> tuple[Tensor, Tensor]:
    """Return (fused feature, D'' = D' + residual)."""
    _, _, height, width = image_encoding.shape
    if tuple(d_prime.shape[2:]) != (height, width):
        raise ShapeError("fuse", image_encoding.shape, d_prime.shape)
    multiple = 2 ** net.depth
    if height % multiple or width % multiple:
        raise ShapeError("fuse", (height, width), (multiple, multiple),
                         f"extents must be divisible by 2**{net.depth} = {multiple}")
    fused, residual = net(F.concat([image_encoding, inverse_project(d_prime, intr)], axis=1))
    return fused, d_prime + residual
