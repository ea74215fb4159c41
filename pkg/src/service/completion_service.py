import logging
from pathlib import Path
from typing import Optional, Union

import numpy as np

from src.config.pipeline_config import PipelineConfig
from src.depth.geometry import CameraIntrinsics
from src.depth.sparse_depth import SparseDepthMap
from src.engine.tensor import no_grad
from src.errors import DataError, NumericError
from src.model.network import crop_valid, pad_to_multiple
from src.service.training_service import load_model

logger = logging.getLogger(__name__)


class CompletionService:
    """Dense depth from an image and sparse points with a fixed, read-only network."""

    def __init__(self, cfg: PipelineConfig, checkpoint: Optional[Union[str, Path]] = None):
        self.cfg = cfg
        self.checkpoint = checkpoint
        self.model = load_model(cfg, checkpoint)
        logger.info(f"Completion service ready ({'trained' if checkpoint else 'untrained'} weights, "
                    f"{self.model.parameter_count()} parameters)")

    def intrinsics_for(self, height: int, width: int,
                       intrinsics: Optional[CameraIntrinsics] = None) -> CameraIntrinsics:
        if intrinsics is not None:
            return intrinsics
        if self.cfg.intrinsics is not None:
            return self.cfg.intrinsics
        return CameraIntrinsics.centered(height, width)

    def complete(self, image: np.ndarray, sparse: SparseDepthMap,
                 intrinsics: Optional[CameraIntrinsics] = None) -> np.ndarray:
        image = np.asarray(image, dtype=np.float64)
        if image.ndim == 2:
            image = image[:, :, None]
        if image.ndim != 3 or image.shape[2] != self.cfg.in_channels:
            raise DataError(f"Image must be HxWx{self.cfg.in_channels}, got {image.shape}")
        if image.shape[:2] != sparse.shape:
            raise DataError(f"Image {image.shape[:2]} and sparse map {sparse.shape} differ in size")
        if sparse.count < 1:
            raise DataError("At least one sparse depth point is required")
        height, width = sparse.shape
        intr = self.intrinsics_for(height, width, intrinsics)

        padded_image, padded_sparse, record = pad_to_multiple(image, sparse, self.cfg.pad_multiple())
        with no_grad():
            pyramid = self.model(padded_image, padded_sparse, intr)
        depth = np.array(crop_valid(pyramid.final_depth(), record))
        if not np.all(np.isfinite(depth)):
            raise NumericError("Completed depth contains non-finite values")
        logger.info(f"Completed {height}x{width} depth from {sparse.count} points")
        return depth
