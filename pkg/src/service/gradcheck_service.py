"""
Gradient Check Service
Purpose: Verify every backward rule and the assembled network against central differences.
Key Features:
- One check per differentiable op on small random operands away from kinks
- Checks of inverse projection, weighted pooling, bilateral propagation and refinement
- End-to-end check of a 1-scale 8x8 network, sampling coordinates of every parameter
- Zero-initialised heads are randomised first so no path is trivially zero
"""

import logging
from typing import Callable

import numpy as np

from src.config.pipeline_config import PipelineConfig
from src.config.settings import settings
from src.depth.geometry import CameraIntrinsics, inverse_project
from src.depth.sparse_depth import SparseDepthMap, knn, weighted_pool
from src.engine import functional as F
from src.engine.gradcheck import GradcheckReport, check_gradients
from src.engine.nn import Module
from src.engine.tensor import Tensor
from src.model.bilateral_propagation import CoefficientMLP, PriorEncodings, generate_coefficients, mlp_in_features, propagate
from src.model.loss import multiscale_loss
from src.model.network import BPNet
from src.model.refinement import cspn_step, embed_sparse, neighbor_mask, normalize_affinity
from src.utility.spinner import Spinner

logger = logging.getLogger(__name__)


def randomize_parameters(model: Module, rng: np.random.Generator, scale: float = 0.3) -> None:
    """Give all-zero parameters random values; refinement gates go to (0.2, 0.8)."""
    for name, p in model.named_parameters():
        if name.endswith("gate"):
            p.data[...] = rng.uniform(0.2, 0.8, size=p.shape)
        elif not np.any(p.data):
            p.data[...] = rng.uniform(-scale, scale, size=p.shape)


def small_pipeline_config(**overrides) -> PipelineConfig:
    defaults = dict(scales=1, widths=[4], mlp_hidden=8, unet_depth=1, kernels=[3], n_neighbors=3, n_points=10)
    defaults.update(overrides)
    return PipelineConfig.desk(**defaults)


class GradcheckService:
    def __init__(self, seed: int = 0, max_entries: int = 3, rtol: float = settings.GRADCHECK_RTOL,
                 progress: bool = False):
        self.seed = seed
        self.max_entries = max_entries
        self.rtol = rtol
        self.progress = progress

    def _tensor(self, rng: np.random.Generator, *shape: int, low: float = -1.0, high: float = 1.0) -> Tensor:
        return Tensor(rng.uniform(low, high, size=shape), requires_grad=True)

    def op_checks(self) -> list[tuple[str, Callable[[], Tensor], list[tuple[str, Tensor]]]]:
        rng = np.random.default_rng(self.seed)
        t = lambda *shape, **kw: self._tensor(rng, *shape, **kw)
        a, b = t(3, 4), t(3, 4)
        row = t(1, 4)
        positive = t(3, 4, low=0.5, high=2.0)
        away = Tensor(rng.choice([-1.0, 1.0], size=(3, 4)) * rng.uniform(0.2, 1.0, size=(3, 4)), requires_grad=True)
        m1, m2 = t(3, 5), t(5, 2)
        image = t(1, 2, 5, 5)
        even = t(1, 2, 4, 4)
        conv_w, conv_b = t(3, 2, 3, 3), t(3)
        deconv_w, deconv_b = t(2, 3, 2, 2), t(3)
        gamma, beta = t(2, low=0.5, high=1.5), t(2)
        lin_w, lin_b = t(4, 3), t(3)
        softmax_mask = np.array([[True, True, False, True]] * 3)
        rows = np.array([2, 0, 0, 1])
        running_mean, running_var = np.zeros(2), np.ones(2)

        projections: dict[tuple, np.ndarray] = {}

        def weighted(x: Tensor) -> Tensor:
            # fixed random projection per output shape turns any op output into a scalar
            if x.shape not in projections:
                projections[x.shape] = rng.uniform(-1.0, 1.0, size=x.shape)
            return (x * projections[x.shape]).sum()

        return [
            ("add", lambda: weighted(a + row), [("a", a), ("row", row)]),
            ("mul", lambda: weighted(a * b), [("a", a), ("b", b)]),
            ("div", lambda: weighted(a / positive), [("a", a), ("positive", positive)]),
            ("matmul", lambda: weighted(m1 @ m2), [("m1", m1), ("m2", m2)]),
            ("exp", lambda: weighted(a.exp()), [("a", a)]),
            ("abs", lambda: weighted(away.abs()), [("x", away)]),
            ("square", lambda: weighted(a.square()), [("a", a)]),
            ("sigmoid", lambda: weighted(F.sigmoid(a * 3.0)), [("a", a)]),
            ("gelu", lambda: weighted(F.gelu(a * 2.0)), [("a", a)]),
            ("clip", lambda: weighted(F.clip(away, -0.1, 0.1) + F.clip(a * 0.05, -1.0, 1.0)), [("x", away), ("a", a)]),
            ("softmax", lambda: weighted(F.softmax(a, axis=1, mask=softmax_mask)), [("a", a)]),
            ("sum", lambda: weighted(a.sum(axis=0, keepdims=True)), [("a", a)]),
            ("mean", lambda: weighted(a.mean(axis=1)), [("a", a)]),
            ("amax", lambda: weighted(F.amax(a, axis=1)), [("a", a)]),
            ("reshape_transpose", lambda: weighted(a.reshape(2, 6).transpose(1, 0)), [("a", a)]),
            ("slice", lambda: weighted(a[1:, ::2]), [("a", a)]),
            ("concat", lambda: weighted(F.concat([a, b], axis=1)), [("a", a), ("b", b)]),
            ("gather", lambda: weighted(F.gather(a, rows)), [("a", a)]),
            ("scatter_add", lambda: weighted(F.scatter_add(a, np.array([1, 0, 1]), 2)), [("a", a)]),
            ("linear", lambda: weighted(F.linear(a, lin_w, lin_b)), [("x", a), ("w", lin_w), ("b", lin_b)]),
            ("batch_norm_train", lambda: weighted(F.batch_norm(image, gamma, beta, training=True)),
             [("x", image), ("gamma", gamma), ("beta", beta)]),
            ("batch_norm_eval", lambda: weighted(F.batch_norm(image, gamma, beta, running_mean, running_var,
                                                              training=False)),
             [("x", image), ("gamma", gamma), ("beta", beta)]),
            ("conv2d", lambda: weighted(F.conv2d(image, conv_w, conv_b, padding=1)),
             [("x", image), ("w", conv_w), ("b", conv_b)]),
            ("conv2d_stride2", lambda: weighted(F.conv2d(image, conv_w, conv_b, stride=2, padding=1)),
             [("x", image), ("w", conv_w)]),
            ("deconv2d", lambda: weighted(F.deconv2d(even, deconv_w, deconv_b)),
             [("x", even), ("w", deconv_w), ("b", deconv_b)]),
            ("bilinear_upsample", lambda: weighted(F.bilinear_upsample(image, 2)), [("x", image)]),
            ("unfold", lambda: weighted(F.unfold(image, 3)), [("x", image)]),
        ]

    def module_checks(self) -> list[tuple[str, Callable[[], Tensor], list[tuple[str, Tensor]]]]:
        rng = np.random.default_rng(self.seed + 1)
        height = width = 6
        intr = CameraIntrinsics(fx=5.0, fy=6.0, cx=2.5, cy=2.0)
        depth = Tensor(rng.uniform(1.0, 3.0, size=(1, 1, height, width)), requires_grad=True)
        project_weights = rng.uniform(-1, 1, size=(1, 3, height, width))

        sparse_depth = np.zeros((4, 4))
        sparse_depth[0, 1], sparse_depth[2, 2], sparse_depth[3, 0] = 2.0, 3.0, 4.5
        pool_map = SparseDepthMap.from_depth(sparse_depth)
        logits = Tensor(rng.normal(size=(1, 1, 4, 4)), requires_grad=True)

        sparse = SparseDepthMap.from_depth(np.where(rng.random((height, width)) < 0.3,
                                                    rng.uniform(1.0, 3.0, (height, width)), 0.0))
        if sparse.count == 0:
            sparse = SparseDepthMap.from_depth(np.pad(np.array([[2.0]]), ((0, height - 1), (0, width - 1))))
        channels = 3
        image_encoding = Tensor(rng.normal(size=(1, channels, height, width)), requires_grad=True)
        enc = PriorEncodings(image_encoding=image_encoding, depth_encoding=inverse_project(sparse.values, intr),
                             neighbor_index=knn(sparse, 3), sparse=sparse)
        mlp = CoefficientMLP(mlp_in_features(channels), 6, rng)
        randomize_parameters(mlp, rng)

        raw = Tensor(rng.normal(size=(1, 8, height, width)), requires_grad=True)
        gamma = Tensor(rng.uniform(0.2, 0.8, size=(1, 1, height, width)), requires_grad=True)
        mask = neighbor_mask(3, height, width)

        def refinement_loss() -> Tensor:
            kappa, center = normalize_affinity(raw, mask)
            current = depth
            for _ in range(2):
                current = embed_sparse(cspn_step(current, kappa, center, 3), sparse, gamma)
            return current.square().mean()

        return [
            ("inverse_project", lambda: (inverse_project(depth, intr) * project_weights).sum(), [("depth", depth)]),
            ("weighted_pool", lambda: weighted_pool(pool_map, logits, 1).values.square().sum(), [("logits", logits)]),
            ("bilateral_propagation",
             lambda: propagate(sparse, generate_coefficients(enc, mlp), enc).square().mean(),
             [("image_encoding", image_encoding)] + list(mlp.named_parameters())),
            ("refinement", refinement_loss, [("depth", depth), ("raw_affinity", raw), ("gamma", gamma)]),
        ]

    def pipeline_check(self) -> tuple[str, Callable[[], Tensor], list[tuple[str, Tensor]]]:
        rng = np.random.default_rng(self.seed + 2)
        cfg = small_pipeline_config(seed=self.seed)
        model = BPNet(cfg)
        randomize_parameters(model, rng)
        size = 8
        gt = rng.uniform(1.0, 3.0, size=(size, size))
        flat = rng.choice(size * size, size=cfg.n_points, replace=False)
        sparse_depth = np.zeros(size * size)
        sparse_depth[flat] = gt.reshape(-1)[flat]
        sparse = SparseDepthMap.from_depth(sparse_depth.reshape(size, size))
        image = rng.uniform(0.0, 1.0, size=(size, size, 3))
        intr = CameraIntrinsics.centered(size, size)
        valid = np.ones((size, size), dtype=bool)

        def loss() -> Tensor:
            pyramid = model(image, sparse, intr)
            return multiscale_loss(pyramid, gt, valid, cfg.lambda_weights()) / float(valid.sum())

        return "pipeline_1scale_8x8", loss, list(model.named_parameters())

    def run(self, include_pipeline: bool = True) -> list[GradcheckReport]:
        checks = self.op_checks() + self.module_checks()
        if include_pipeline:
            checks.append(self.pipeline_check())
        spinner = Spinner(total=len(checks), enabled=self.progress)
        rng = np.random.default_rng(self.seed + 3)
        reports = []
        for name, fn, tensors in checks:
            report = check_gradients(fn, tensors, name=name, rtol=self.rtol,
                                     max_entries=self.max_entries, rng=rng)
            reports.append(report)
            spinner.spin(f"checks ({name})")
            if not report.passed:
                logger.error(report.summary())
        failed = sum(not r.passed for r in reports)
        spinner.finish(f"{len(reports) - failed}/{len(reports)} gradient checks passed")
        return reports

