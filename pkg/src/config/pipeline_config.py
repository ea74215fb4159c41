"""
Run configuration: a JSON text file validated by `PipelineConfig`.

Documented keys: scales, n_neighbors, widths, mlp_hidden, unet_depth, kernels,
schedule, stages {pre, mf, post}, ablation, propagation, normalize_offsets,
loss_weights, lr, weight_decay, betas, clip_norm, steps, n_points, hflip, seed,
intrinsics {fx, fy, cx, cy}, paths {scenes, output, checkpoint}, metric_units,
thetas, sweep_counts, sweep_repeats, workers.
"""

import logging
from pathlib import Path
from typing import Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from src.config.settings import settings
from src.depth.geometry import CameraIntrinsics
from src.errors import ConfigError

logger = logging.getLogger(__name__)

Ablation = Literal["full", "content_only", "spatial_only"]


class StageToggles(BaseModel):
    model_config = ConfigDict(extra="forbid")

    pre: bool = True
    mf: bool = True
    post: bool = True

    def label(self) -> str:
        enabled = [name for name in ("pre", "mf", "post") if getattr(self, name)]
        return "+".join(enabled) if enabled else "none"


class RunPaths(BaseModel):
    model_config = ConfigDict(extra="forbid")

    scenes: Optional[str] = None
    output: Optional[str] = None
    checkpoint: Optional[str] = None


class PipelineConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    scales: int = Field(3, ge=1)
    n_neighbors: int = Field(4, ge=1)
    widths: list[int] = [8, 16, 32]
    in_channels: int = Field(3, ge=1)
    mlp_hidden: int = Field(32, ge=1)
    unet_depth: Union[int, list[int]] = 2
    kernels: list[int] = [3, 5, 7]
    schedule: Optional[list[int]] = None
    stages: StageToggles = StageToggles()
    ablation: Ablation = "full"
    propagation: Literal["learned", "nearest"] = "learned"
    normalize_offsets: bool = True
    loss_weights: Optional[list[float]] = None

    lr: float = Field(2e-3, ge=0)
    weight_decay: float = Field(0.05, ge=0)
    betas: tuple[float, float] = (0.9, 0.999)
    clip_norm: float = Field(0.1, gt=0)
    steps: int = Field(500, ge=0)
    n_points: int = Field(50, ge=1)
    hflip: bool = False
    seed: int = 0

    intrinsics: Optional[CameraIntrinsics] = None
    paths: RunPaths = RunPaths()
    metric_units: Literal["m", "mm"] = "m"
    thetas: list[float] = [1.25, 1.25 ** 2, 1.25 ** 3]
    sweep_counts: list[int] = [25, 50, 75]
    sweep_repeats: int = Field(10, ge=1)
    workers: int = Field(settings.DEFAULT_WORKERS, ge=1)

    @model_validator(mode="after")
    def _check_per_scale_lists(self) -> "PipelineConfig":
        if len(self.widths) != self.scales:
            raise ValueError(f"widths has {len(self.widths)} entries for {self.scales} scales")
        if any(k < 1 or k % 2 == 0 for k in self.kernels):
            raise ValueError(f"propagation kernels must be odd, got {self.kernels}")
        for key in ("schedule", "loss_weights"):
            values = getattr(self, key)
            if values is not None and len(values) != self.scales:
                raise ValueError(f"{key} has {len(values)} entries for {self.scales} scales")
        if isinstance(self.unet_depth, list) and len(self.unet_depth) != self.scales:
            raise ValueError(f"unet_depth has {len(self.unet_depth)} entries for {self.scales} scales")
        return self

    def lambda_weights(self) -> list[float]:
        if self.loss_weights is not None:
            return list(self.loss_weights)
        return [4.0 ** -s for s in range(self.scales)]

    def iterations(self, s: int) -> int:
        from src.model.refinement import step_schedule
        if self.schedule is not None:
            return self.schedule[s]
        return step_schedule(s, self.scales)

    def unet_depth_at(self, s: int) -> int:
        return self.unet_depth[s] if isinstance(self.unet_depth, list) else self.unet_depth

    def pad_multiple(self) -> int:
        """Smallest extent multiple that every scale and its fusion U-Net accept."""
        coarsest = 2 ** (self.scales - 1)
        return max([coarsest] + [2 ** (s + self.unet_depth_at(s)) for s in range(self.scales)])

    @classmethod
    def desk(cls, **overrides) -> "PipelineConfig":
        scales = overrides.get("scales", 3)
        overrides.setdefault("widths", [min(8 * 2 ** s, 32) for s in range(scales)])
        return cls(**overrides)

    @classmethod
    def paper(cls, **overrides) -> "PipelineConfig":
        scales = 6
        defaults = dict(
            scales=scales,
            widths=[32, 64, 128, 256, 256, 256],
            unet_depth=[scales - 1 - s for s in range(scales)],
            n_points=500,
            sweep_counts=[250, 300, 350, 400, 450, 500, 550, 600, 650, 700, 750],
        )
        defaults.update(overrides)
        return cls(**defaults)

    @classmethod
    def load(cls, path: Union[str, Path]) -> "PipelineConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"Run config not found: {path}")
        try:
            config = cls.model_validate_json(path.read_text(encoding="utf-8"))
        except ValidationError as e:
            raise ConfigError(f"Invalid run config {path}: {e}") from e
        logger.info(f"Run config loaded from {path}")
        return config

    @classmethod
    def resolve(cls, path: Optional[str] = None) -> "PipelineConfig":
        """`path`, else the BPDEPTH_CONFIG setting, else the desk defaults."""
        chosen = path or settings.BPDEPTH_CONFIG
        if chosen:
            return cls.load(chosen)
        logger.info("No run config given, using desk defaults")
        return cls.desk()

    def save(self, path: Union[str, Path]) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.model_dump_json(indent=2), encoding="utf-8")
