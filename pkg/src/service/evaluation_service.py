"""
Evaluation Service
Purpose: Score depth predictions and run the robustness and ablation protocols.
Key Features:
- RMSE, MAE, iRMSE, iMAE, REL and threshold accuracies per sample, then averaged
- Sparsity sweep over point counts x repeats x scenes with per-cell derived seeds;
  results do not depend on evaluation order or worker count
- Ablation grid over propagation variants and stage toggles, with parameter and
  multiply-add counts per cell
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from src.config.pipeline_config import PipelineConfig, StageToggles
from src.depth.sparse_depth import sample_sparse
from src.engine.nn import count_madds
from src.engine.tensor import no_grad
from src.errors import DataError, NumericError
from src.model.network import BPNet, crop_valid
from src.service.synthetic_service import Scene
from src.service.training_service import TrainingService, derive_seed, prepare_sample

logger = logging.getLogger(__name__)

METRIC_NAMES = ("rmse", "mae", "irmse", "imae", "rel")
UNIT_SCALE = {"m": 1.0, "mm": 1000.0}
# inverse metrics are reported in 1/km for depths in meters
INVERSE_SCALE = 1000.0


def delta_column(theta: float) -> str:
    return f"delta_{theta:.4g}"


@dataclass
class MetricReport:
    rmse: float
    mae: float
    irmse: float
    imae: float
    rel: float
    delta: dict[float, float]
    n: int
    units: str = "m"

    def header(self) -> list[str]:
        return ["n", *METRIC_NAMES, *(delta_column(t) for t in sorted(self.delta))]

    def row(self) -> list:
        return [self.n, *(getattr(self, name) for name in METRIC_NAMES), *(self.delta[t] for t in sorted(self.delta))]


def compute_metrics(pred: np.ndarray, gt: np.ndarray, valid: np.ndarray,
                    thetas: Sequence[float] = (1.25, 1.25 ** 2, 1.25 ** 3), units: str = "m") -> MetricReport:
    """Metrics over valid pixels; depths in meters, errors reported in `units` and 1/km."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    valid = np.asarray(valid, dtype=bool)
    if not (pred.shape == gt.shape == valid.shape):
        raise DataError(f"compute_metrics: shapes {pred.shape}, {gt.shape}, {valid.shape} disagree")
    if units not in UNIT_SCALE:
        raise DataError(f"Unknown metric units {units!r}")
    if not valid.any():
        raise DataError("compute_metrics: empty valid set")
    p, g = pred[valid], gt[valid]
    if np.any(g <= 0):
        raise DataError("compute_metrics: ground truth must be positive on valid pixels")
    if np.any(p <= 0) or not np.all(np.isfinite(p)):
        raise NumericError("compute_metrics: predictions must be finite and positive on valid pixels")

    diff = p - g
    inverse = 1.0 / p - 1.0 / g
    ratio = np.maximum(g / p, p / g)
    scale = UNIT_SCALE[units]
    return MetricReport(
        rmse=float(np.sqrt(np.mean(diff ** 2))) * scale,
        mae=float(np.mean(np.abs(diff))) * scale,
        irmse=float(np.sqrt(np.mean(inverse ** 2))) * INVERSE_SCALE,
        imae=float(np.mean(np.abs(inverse))) * INVERSE_SCALE,
        rel=float(np.mean(np.abs(diff) / g)),
        delta={float(t): float(np.mean(ratio < t)) for t in thetas},
        n=int(valid.sum()),
        units=units,
    )


def average_reports(reports: Sequence[MetricReport]) -> MetricReport:
    """Per-sample-then-mean average; `n` is the total valid pixel count."""
    if not reports:
        raise DataError("average_reports: no reports")
    count = len(reports)
    thetas = sorted(reports[0].delta)
    return MetricReport(
        **{name: math.fsum(getattr(r, name) for r in reports) / count for name in METRIC_NAMES},
        delta={t: math.fsum(r.delta[t] for r in reports) / count for t in thetas},
        n=sum(r.n for r in reports),
        units=reports[0].units,
    )


class Evaluator:
    """Runs a fixed model over scenes; the model is only read, so cells may run in threads."""

    def __init__(self, model: BPNet, cfg: PipelineConfig, workers: Optional[int] = None):
        self.model = model
        self.cfg = cfg
        self.workers = workers if workers is not None else cfg.workers

    def predict(self, scene: Scene, n_points: int, seed: int) -> np.ndarray:
        sparse = sample_sparse(scene.depth, n_points, seed)
        intrinsics = self.cfg.intrinsics if self.cfg.intrinsics is not None else scene.intrinsics
        sample = prepare_sample(scene, sparse, intrinsics, self.cfg.pad_multiple())
        with no_grad():
            pyramid = self.model(sample.image, sample.sparse, sample.intrinsics)
        return crop_valid(pyramid.final_depth(), sample.record)

    def score(self, scene: Scene, n_points: int, seed: int) -> MetricReport:
        pred = self.predict(scene, n_points, seed)
        return compute_metrics(pred, scene.depth, scene.valid, self.cfg.thetas, self.cfg.metric_units)

    def evaluate(self, scenes: Sequence[Scene], n_points: Optional[int] = None,
                 seed: Optional[int] = None) -> list[MetricReport]:
        n_points = self.cfg.n_points if n_points is None else n_points
        seed = self.cfg.seed if seed is None else seed
        self.model.eval()
        cells = {(i,): (scene, derive_seed(seed, i)) for i, scene in enumerate(scenes)}
        results = self.run_cells(cells, n_points)
        return [results[(i,)] for i in range(len(scenes))]

    def run_cells(self, cells: dict[tuple, tuple[Scene, int]], n_points: int) -> dict[tuple, MetricReport]:
        keys = sorted(cells)
        if self.workers <= 1:
            return {key: self.score(cells[key][0], n_points, cells[key][1]) for key in keys}
        with ThreadPoolExecutor(max_workers=self.workers) as pool:
            futures = {key: pool.submit(self.score, cells[key][0], n_points, cells[key][1]) for key in keys}
            return {key: futures[key].result() for key in keys}


@dataclass
class SweepRow:
    count: int
    mean: Optional[MetricReport] = None
    std: dict[str, float] = field(default_factory=dict)
    repeats: int = 0
    warning: str = ""

    @property
    def skipped(self) -> bool:
        return self.mean is None


def sparsity_sweep(evaluator: Evaluator, scenes: Sequence[Scene], counts: Sequence[int],
                   repeats: int, seed: int) -> list[SweepRow]:
    """
    For every count and repeat, sample each scene with the seed of its
    (count, repeat, scene) cell, predict and score. A repeat's value is its mean
    over scenes; rows report mean and population std over repeats.
    """
    if repeats < 1:
        raise DataError(f"Sweep repeats must be positive, got {repeats}")
    if not scenes:
        raise DataError("Sweep needs at least one scene")
    evaluator.model.eval()
    rows = []
    for count in counts:
        supply = min(int((scene.depth > 0).sum()) for scene in scenes)
        if count > supply:
            warning = f"skipped: {count} points requested, smallest scene has {supply} positive pixels"
            logger.warning(f"Sparsity sweep {warning}")
            rows.append(SweepRow(count=count, warning=warning))
            continue
        cells = {(r, i): (scene, derive_seed(seed, count, r, i))
                 for r in range(repeats) for i, scene in enumerate(scenes)}
        results = evaluator.run_cells(cells, count)
        per_repeat = [average_reports([results[(r, i)] for i in range(len(scenes))]) for r in range(repeats)]
        mean = average_reports(per_repeat)
        std = {name: float(np.std([getattr(report, name) for report in per_repeat])) for name in METRIC_NAMES}
        rows.append(SweepRow(count=count, mean=mean, std=std, repeats=repeats))
        logger.info(f"Sweep count {count}: rmse {mean.rmse:.6g} +- {std['rmse']:.3g}")
    return rows


def sweep_table(rows: Sequence[SweepRow]) -> tuple[list[str], list[list]]:
    header = ["count", "repeats", *(f"{n}_mean" for n in METRIC_NAMES), *(f"{n}_std" for n in METRIC_NAMES), "warning"]
    table = []
    for row in rows:
        if row.skipped:
            table.append([row.count, 0, *([""] * (2 * len(METRIC_NAMES))), row.warning])
        else:
            table.append([row.count, row.repeats, *(getattr(row.mean, n) for n in METRIC_NAMES),
                          *(row.std[n] for n in METRIC_NAMES), row.warning])
    return header, table


# (ablation, stages) cells: the propagation variants with every stage, then the stage combinations
DEFAULT_ABLATION_GRID: list[tuple[str, StageToggles]] = [
    ("full", StageToggles()),
    ("content_only", StageToggles()),
    ("spatial_only", StageToggles()),
    ("full", StageToggles(pre=False, mf=True, post=False)),
    ("full", StageToggles(pre=True, mf=True, post=False)),
    ("full", StageToggles(pre=False, mf=True, post=True)),
]


@dataclass
class AblationRow:
    ablation: str
    stages: str
    params: int
    madds: int
    report: MetricReport
    final_loss: float


def count_model_madds(model: BPNet, scene: Scene, cfg: PipelineConfig) -> int:
    """Multiply-adds of one forward pass, counted analytically from layer shapes."""
    evaluator = Evaluator(model, cfg, workers=1)
    with count_madds() as counter:
        evaluator.predict(scene, min(cfg.n_points, int((scene.depth > 0).sum())), cfg.seed)
    return counter[0]


def ablation_run(cfg: PipelineConfig, scenes: Sequence[Scene],
                 grid: Sequence[tuple[str, StageToggles]] = DEFAULT_ABLATION_GRID,
                 steps: Optional[int] = None, eval_scenes: Optional[Sequence[Scene]] = None) -> list[AblationRow]:
    """Train and evaluate one model per cell on shared scenes and seed."""
    eval_scenes = list(eval_scenes) if eval_scenes is not None else list(scenes)
    rows = []
    for ablation, stages in grid:
        cell_cfg = cfg.model_copy(update={"ablation": ablation, "stages": stages})
        label = f"{ablation}/{stages.label()}"
        result = TrainingService(cell_cfg).train(list(scenes), steps=steps)
        model = result.model
        evaluator = Evaluator(model, cell_cfg)
        report = average_reports(evaluator.evaluate(eval_scenes))
        rows.append(AblationRow(
            ablation=ablation,
            stages=stages.label(),
            params=model.parameter_count(),
            madds=count_model_madds(model, eval_scenes[0], cell_cfg),
            report=report,
            final_loss=result.losses[-1] if result.losses else float("nan"),
        ))
        logger.info(f"Ablation {label}: rmse {report.rmse:.6g}, {rows[-1].params} params")
    return rows


def ablation_table(rows: Sequence[AblationRow]) -> tuple[list[str], list[list]]:
    if not rows:
        return ["ablation", "stages", "params", "madds", "final_loss"], []
    header = ["ablation", "stages", "params", "madds", "final_loss", *rows[0].report.header()]
    table = [[r.ablation, r.stages, r.params, r.madds, r.final_loss, *r.report.row()] for r in rows]
    return header, table
