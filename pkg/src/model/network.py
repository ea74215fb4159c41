"""
Depth Completion Network
Purpose: the coarse-to-fine pass turning an image and sparse depth into a depth pyramid.
Key Features:
- Image backbone producing one feature map per scale
- Per scale, from the coarsest: prior encodings, bilateral propagation (Pre.),
  multi-modal fusion (MF.) and spatial propagation refinement (Post.)
- Each stage can be switched off; the stage inputs then pass through unchanged
- Bottom/right zero padding to a size every scale accepts, and the matching crop
"""

import logging
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from src.config.pipeline_config import PipelineConfig
from src.depth.geometry import CameraIntrinsics
from src.depth.sparse_depth import SparseDepthMap
from src.engine.nn import Basic2D, Conv2d, Module, ResBlock
from src.engine.tensor import Tensor
from src.errors import DataError, ShapeError
from src.model.bilateral_propagation import (
    BilateralCoefficients,
    CoefficientMLP,
    ImageEncodingFusion,
    build_prior_encodings,
    generate_coefficients,
    mlp_in_features,
    propagate,
)
from src.model.fusion import FusionUNet, fuse
from src.model.refinement import RefinementHeads, refine

logger = logging.getLogger(__name__)


def image_tensor(image: Union[np.ndarray, Tensor]) -> Tensor:
    """(H, W, C) arrays become (1, C, H, W) tensors; tensors pass through."""
    if isinstance(image, Tensor):
        return image
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        image = image[:, :, None]
    if image.ndim != 3:
        raise ShapeError("image_tensor", image.shape, ("H", "W", "C"))
    return Tensor(np.transpose(image, (2, 0, 1))[None])


@dataclass
class ScaleOutput:
    sparse: SparseDepthMap
    d_prime: Tensor
    d_double_prime: Tensor
    depth: Tensor
    fused: Tensor
    encoding: Tensor


@dataclass
class DepthPyramid:
    """Per-scale outputs; index 0 is full resolution."""

    scales: list[ScaleOutput] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.scales)

    def __getitem__(self, s: int) -> ScaleOutput:
        return self.scales[s]

    @property
    def final(self) -> Tensor:
        return self.scales[0].depth

    def final_depth(self) -> np.ndarray:
        return self.scales[0].depth.data[0, 0]


@dataclass(frozen=True)
class CropRecord:
    height: int
    width: int
    padded_height: int
    padded_width: int


def pad_to_multiple(image: np.ndarray, sparse: SparseDepthMap, m: int) -> tuple[np.ndarray, SparseDepthMap, CropRecord]:
    """Zero-pad an (H, W, C) image and its sparse map at the bottom and right to multiples of m."""
    image = np.asarray(image, dtype=np.float64)
    height, width = image.shape[:2]
    if sparse.shape != (height, width):
        raise ShapeError("pad_to_multiple", image.shape, sparse.shape)
    padded_h = -(-height // m) * m
    padded_w = -(-width // m) * m
    record = CropRecord(height, width, padded_h, padded_w)
    if (padded_h, padded_w) == (height, width):
        return image, sparse, record
    pad = ((0, padded_h - height), (0, padded_w - width))
    padded_image = np.pad(image, pad + ((0, 0),) * (image.ndim - 2))
    return padded_image, SparseDepthMap.from_depth(np.pad(sparse.depth, pad)), record


def crop_valid(output: Union[np.ndarray, Tensor], record: CropRecord) -> np.ndarray:
    """Cut a padded (H', W') grid, or the spatial axes of a tensor, back to the original extents."""
    data = output.data if isinstance(output, Tensor) else np.asarray(output)
    if data.shape[-2:] != (record.padded_height, record.padded_width):
        raise ShapeError("crop_valid", data.shape, (record.padded_height, record.padded_width))
    return data[..., :record.height, :record.width]


class ImageBackbone(Module):
    """Basic2D and two residual blocks at full resolution, then a stride-2 pair per coarser scale."""

    def __init__(self, in_channels: int, widths: list[int], rng: np.random.Generator):
        super().__init__()
        self.stem = Basic2D(in_channels, widths[0], rng)
        self.blocks = []
        for s, width in enumerate(widths):
            previous = widths[max(s - 1, 0)]
            self.blocks.append(ResBlock(previous, width, rng, stride=1 if s == 0 else 2))
            self.blocks.append(ResBlock(width, width, rng))

    def forward(self, image: Tensor) -> list[Tensor]:
        h = self.stem(image)
        features = []
        for s in range(len(self.blocks) // 2):
            h = self.blocks[2 * s + 1](self.blocks[2 * s](h))
            features.append(h)
        return features


class ScaleStage(Module):
    """Every module of one scale; disabled stages hold no parameters."""

    def __init__(self, cfg: PipelineConfig, s: int, rng: np.random.Generator):
        super().__init__()
        width = cfg.widths[s]
        coarsest = s == cfg.scales - 1
        self.scale = s
        self.encoder = None if coarsest else ImageEncodingFusion(cfg.widths[s + 1], width, rng)
        self.pool_head = Conv2d(width, 4 ** s, rng, kernel_size=1) if s > 0 else None
        learned = cfg.stages.pre and cfg.propagation == "learned"
        self.mlp = CoefficientMLP(mlp_in_features(width), cfg.mlp_hidden, rng) if learned else None
        self.fusion = FusionUNet(width, width, cfg.unet_depth_at(s), rng) if cfg.stages.mf else None
        self.refinement = RefinementHeads(width, cfg.kernels, rng) if cfg.stages.post else None

    def forward(self, *args, **kwargs):
        raise NotImplementedError("ScaleStage is a module container; BPNet.forward drives its parts")


class BPNet(Module):
    def __init__(self, cfg: PipelineConfig, seed: Optional[int] = None):
        super().__init__()
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed if seed is None else seed)
        self.backbone = ImageBackbone(cfg.in_channels, cfg.widths, rng)
        self.stages = [ScaleStage(cfg, s, rng) for s in range(cfg.scales)]
        logger.info(f"BPNet built: {cfg.scales} scales, stages {cfg.stages.label()}, "
                    f"ablation {cfg.ablation}, {self.parameter_count()} parameters")

    def forward(self, image: Union[np.ndarray, Tensor], sparse: SparseDepthMap,
                intr: CameraIntrinsics) -> DepthPyramid:
        cfg = self.cfg
        image = image_tensor(image)
        _, channels, height, width = image.shape
        if channels != cfg.in_channels:
            raise ShapeError("BPNet", image.shape, (1, cfg.in_channels, height, width))
        if sparse.shape != (height, width):
            raise ShapeError("BPNet", image.shape, sparse.shape)
        multiple = cfg.pad_multiple()
        if height % multiple or width % multiple:
            raise ShapeError("BPNet", (height, width), (multiple, multiple),
                             f"pad input extents to a multiple of {multiple} first")
        if sparse.count < 1:
            raise DataError("BPNet: the sparse depth map has no valid pixel")

        features = self.backbone(image)
        n = 1 if cfg.propagation == "nearest" else cfg.n_neighbors
        pyramid = [None] * cfg.scales
        fused_prev, depth_prev = None, None
        for s in reversed(range(cfg.scales)):
            stage = self.stages[s]
            intr_s = intr.at_scale(s)
            enc = build_prior_encodings(features[s], fused_prev, depth_prev, intr_s, sparse, n,
                                        encoder=stage.encoder, pool_head=stage.pool_head, scale=s)

            if not cfg.stages.pre:
                d_prime = enc.sparse.values
            else:
                if stage.mlp is None:
                    coeffs = BilateralCoefficients.nearest(enc.pixels, enc.neighbor_index.n)
                else:
                    coeffs = generate_coefficients(enc, stage.mlp, cfg.ablation, cfg.normalize_offsets)
                d_prime = propagate(enc.sparse, coeffs, enc)

            if stage.fusion is not None:
                fused, d_double_prime = fuse(enc.image_encoding, d_prime, intr_s, stage.fusion)
            else:
                fused, d_double_prime = enc.image_encoding, d_prime

            if stage.refinement is not None:
                depth = refine(d_double_prime, fused, enc.sparse, stage.refinement, cfg.iterations(s))
            else:
                depth = d_double_prime

            pyramid[s] = ScaleOutput(sparse=enc.sparse, d_prime=d_prime, d_double_prime=d_double_prime,
                                     depth=depth, fused=fused, encoding=enc.image_encoding)
            fused_prev, depth_prev = fused, depth
        return DepthPyramid(scales=pyramid)
