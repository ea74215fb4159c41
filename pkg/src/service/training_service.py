"""
Training Service
Purpose: Fit a network end to end on a list of scenes.
Key Features:
- A fresh random sparse input per step, seeded from (run seed, step)
- Optional horizontal flip that also mirrors the principal point
- Multi-scale loss, global-norm gradient clipping and AdamW
- Loss curve CSV and parameter checkpoint per run
- Aborts on the first non-finite loss, naming the step
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np

from src.config.pipeline_config import PipelineConfig
from src.depth.geometry import CameraIntrinsics
from src.depth.sparse_depth import SparseDepthMap, sample_sparse
from src.engine.checkpoint import load_checkpoint, save_checkpoint
from src.engine.optim import AdamW
from src.errors import DataError, NumericError
from src.model.loss import multiscale_loss
from src.model.network import BPNet, CropRecord, pad_to_multiple
from src.service.synthetic_service import Scene
from src.utility.formats import write_loss_csv
from src.utility.spinner import Spinner

logger = logging.getLogger(__name__)


def derive_seed(seed: int, *keys: int) -> int:
    """Deterministic 32-bit seed for a (seed, keys...) cell, independent of evaluation order."""
    return int(np.random.SeedSequence([seed, *keys]).generate_state(1)[0])


@dataclass
class TrainingSample:
    image: np.ndarray
    sparse: SparseDepthMap
    gt: np.ndarray
    valid: np.ndarray
    intrinsics: CameraIntrinsics
    record: CropRecord


def prepare_sample(scene: Scene, sparse: SparseDepthMap, intrinsics: CameraIntrinsics,
                   multiple: int, flip: bool = False) -> TrainingSample:
    """Flip if asked, then pad image, sparse input and ground truth to `multiple`."""
    image, gt = scene.image, scene.depth
    if flip:
        width = gt.shape[1]
        image, gt = image[:, ::-1].copy(), gt[:, ::-1].copy()
        sparse = sparse.flipped()
        intrinsics = intrinsics.flipped(width)
    padded_image, padded_sparse, record = pad_to_multiple(image, sparse, multiple)
    pad = ((0, record.padded_height - record.height), (0, record.padded_width - record.width))
    padded_gt = np.pad(np.where(gt > 0, gt, 0.0), pad)
    return TrainingSample(image=padded_image, sparse=padded_sparse, gt=padded_gt,
                          valid=padded_gt > 0, intrinsics=intrinsics, record=record)


@dataclass
class TrainingResult:
    model: BPNet
    losses: list[float] = field(default_factory=list)
    loss_csv: Optional[Path] = None
    checkpoint: Optional[Path] = None

    @property
    def reduction(self) -> float:
        """Final loss as a fraction of the step-0 loss."""
        if not self.losses or self.losses[0] == 0:
            return 0.0
        return self.losses[-1] / self.losses[0]


class TrainingService:
    def __init__(self, cfg: PipelineConfig, model: Optional[BPNet] = None, progress: bool = False):
        self.cfg = cfg
        self.model = model if model is not None else BPNet(cfg)
        self.progress = progress

    def intrinsics_for(self, scene: Scene) -> CameraIntrinsics:
        return self.cfg.intrinsics if self.cfg.intrinsics is not None else scene.intrinsics

    def train(self, scenes: list[Scene], steps: Optional[int] = None,
              output_dir: Optional[Union[str, Path]] = None) -> TrainingResult:
        if not scenes:
            raise DataError("Training needs at least one scene")
        cfg = self.cfg
        steps = cfg.steps if steps is None else steps
        model = self.model
        optimizer = AdamW(list(model.named_parameters()), lr=cfg.lr,
                          weight_decay=cfg.weight_decay, betas=cfg.betas)
        weights = cfg.lambda_weights()
        multiple = cfg.pad_multiple()
        spinner = Spinner(total=steps, enabled=self.progress)
        result = TrainingResult(model=model)

        logger.info(f"Training {steps} steps on {len(scenes)} scenes, lr={cfg.lr}, seed={cfg.seed}")
        model.train()
        for step in range(steps):
            scene = scenes[step % len(scenes)]
            step_seed = derive_seed(cfg.seed, step)
            sparse = sample_sparse(scene.depth, cfg.n_points, step_seed)
            flip = cfg.hflip and np.random.default_rng(step_seed).random() < 0.5
            sample = prepare_sample(scene, sparse, self.intrinsics_for(scene), multiple, flip=flip)

            optimizer.zero_grad()
            pyramid = model(sample.image, sample.sparse, sample.intrinsics)
            loss = multiscale_loss(pyramid, sample.gt, sample.valid, weights)
            value = loss.item()
            if not np.isfinite(value):
                raise NumericError(f"Non-finite loss {value} at step {step}")
            loss.backward()
            optimizer.clip(cfg.clip_norm)
            optimizer.step()

            result.losses.append(value)
            spinner.spin("steps", loss=value)
            logger.debug(f"step {step}: loss={value:.6g}")
        spinner.finish(f"Trained {steps} steps")

        if output_dir is not None:
            output_dir = Path(output_dir)
            result.loss_csv = output_dir / "loss.csv"
            write_loss_csv(result.loss_csv, result.losses)
            result.checkpoint = Path(cfg.paths.checkpoint) if cfg.paths.checkpoint else output_dir / "model.ckpt"
            save_checkpoint(result.checkpoint, model.state_dict())
        if result.losses:
            logger.info(f"Training done: loss {result.losses[0]:.6g} -> {result.losses[-1]:.6g}")
        return result


def load_model(cfg: PipelineConfig, checkpoint: Optional[Union[str, Path]] = None) -> BPNet:
    """A network for `cfg`, with weights from `checkpoint` when given."""
    model = BPNet(cfg)
    if checkpoint is not None:
        model.load_state_dict(load_checkpoint(checkpoint))
        logger.info(f"Weights loaded from {checkpoint}")
    model.eval()
    return model
