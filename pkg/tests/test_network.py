import unittest

import numpy as np

from src.config.pipeline_config import PipelineConfig, StageToggles
from src.depth.geometry import CameraIntrinsics
from src.depth.sparse_depth import SparseDepthMap, sample_sparse
from src.engine.tensor import Tensor
from src.errors import DataError, ShapeError
from src.model.loss import multiscale_loss
from src.model.network import BPNet, DepthPyramid, ScaleOutput, crop_valid, pad_to_multiple
from src.service.gradcheck_service import randomize_parameters


def _scene(size: int, count: int, seed: int = 0):
    rng = np.random.default_rng(seed)
    gt = rng.uniform(1.0, 4.0, size=(size, size))
    image = rng.uniform(0.0, 1.0, size=(size, size, 3))
    return image, gt, sample_sparse(gt, count, seed)


def _constant_pyramid(values: list[np.ndarray]) -> DepthPyramid:
    scales = []
    for depth in values:
        t = Tensor(depth[None, None])
        scales.append(ScaleOutput(sparse=SparseDepthMap.from_depth(depth), d_prime=t, d_double_prime=t,
                                  depth=t, fused=t, encoding=t))
    return DepthPyramid(scales=scales)


class TestForward(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.cfg = PipelineConfig.desk(seed=3)
        cls.image, cls.gt, cls.sparse = _scene(16, 20)
        cls.intr = CameraIntrinsics.centered(16, 16)

    def test_identity_at_init(self):
        pyramid = BPNet(self.cfg)(self.image, self.sparse, self.intr)
        self.assertEqual(len(pyramid), 3)
        for s in range(3):
            out = pyramid[s]
            self.assertEqual(out.depth.shape, (1, 1, 16 // 2 ** s, 16 // 2 ** s))
            np.testing.assert_array_equal(out.depth.data, out.d_prime.data)
            np.testing.assert_array_equal(out.d_double_prime.data, out.d_prime.data)

    def test_nearest_stub_single_scale(self):
        cfg = PipelineConfig.desk(scales=1, widths=[4], unet_depth=1, propagation="nearest")
        image, _, sparse = _scene(8, 4, seed=1)
        depth = BPNet(cfg)(image, sparse, CameraIntrinsics.centered(8, 8)).final_depth()
        sources = np.argwhere(sparse.valid)
        for y in range(8):
            for x in range(8):
                d2 = ((sources - [y, x]) ** 2).sum(axis=1)
                nearest = sources[np.argmin(d2)]
                self.assertEqual(depth[y, x], sparse.depth[tuple(nearest)])

    def test_random_parameters_stay_finite_and_dense(self):
        for seed in range(2):
            model = BPNet(self.cfg, seed=seed)
            randomize_parameters(model, np.random.default_rng(seed))
            pyramid = model(self.image, self.sparse, self.intr)
            for s in range(3):
                self.assertTrue(np.all(np.isfinite(pyramid[s].depth.data)))

    def test_refinement_changes_output_once_trained(self):
        model = BPNet(self.cfg)
        randomize_parameters(model, np.random.default_rng(4))
        out = model(self.image, self.sparse, self.intr)[0]
        self.assertFalse(np.array_equal(out.depth.data, out.d_double_prime.data))

    def test_stage_combinations(self):
        for toggles in ({"pre": False, "mf": True, "post": False}, {"pre": True, "mf": True, "post": False},
                        {"pre": False, "mf": True, "post": True}, {"pre": True, "mf": True, "post": True}):
            cfg = PipelineConfig.desk(stages=StageToggles(**toggles))
            model = BPNet(cfg)
            self.assertEqual(all(stage.mlp is not None for stage in model.stages), toggles["pre"])
            self.assertEqual(all(stage.refinement is not None for stage in model.stages), toggles["post"])
            pyramid = model(self.image, self.sparse, self.intr)
            self.assertTrue(np.all(np.isfinite(pyramid.final_depth())))

    def test_prepass_off_feeds_sparse_map(self):
        cfg = PipelineConfig.desk(stages=StageToggles(pre=False, mf=True, post=False))
        pyramid = BPNet(cfg)(self.image, self.sparse, self.intr)
        np.testing.assert_array_equal(pyramid[0].d_prime.data[0, 0], self.sparse.depth)

    def test_mlp_adds_parameters(self):
        with_pre = BPNet(PipelineConfig.desk(stages=StageToggles(pre=True, mf=True, post=False)))
        without = BPNet(PipelineConfig.desk(stages=StageToggles(pre=False, mf=True, post=False)))
        self.assertGreater(with_pre.parameter_count() - without.parameter_count(), 0)

    def test_input_errors(self):
        model = BPNet(self.cfg)
        with self.assertRaises(ShapeError):
            model(self.image[:12, :12], SparseDepthMap.from_depth(self.sparse.depth[:12, :12]),
                  CameraIntrinsics.centered(12, 12))
        with self.assertRaises(ShapeError):
            model(self.image[:, :, :2], self.sparse, self.intr)
        with self.assertRaises(DataError):
            model(self.image, SparseDepthMap.from_depth(np.zeros((16, 16))), self.intr)


class TestPadding(unittest.TestCase):
    def test_desk_crop_of_indoor_frame(self):
        image = np.ones((228, 304, 3))
        depth = np.zeros((228, 304))
        depth[100, 200] = 2.0
        padded, sparse, record = pad_to_multiple(image, SparseDepthMap.from_depth(depth), 32)
        self.assertEqual(padded.shape, (256, 320, 3))
        self.assertEqual(sparse.shape, (256, 320))
        self.assertEqual(sparse.count, 1)
        self.assertFalse(np.any(padded[228:]))
        np.testing.assert_array_equal(crop_valid(sparse.depth, record), depth)

    def test_divisible_input_is_unchanged(self):
        image = np.random.default_rng(0).uniform(size=(32, 64, 3))
        sparse = SparseDepthMap.from_depth(np.ones((32, 64)))
        padded, padded_sparse, record = pad_to_multiple(image, sparse, 32)
        self.assertIs(padded, image)
        self.assertIs(padded_sparse, sparse)
        np.testing.assert_array_equal(crop_valid(padded[:, :, 0], record), image[:, :, 0])

    def test_crop_rejects_unpadded_grid(self):
        _, _, record = pad_to_multiple(np.ones((5, 7, 3)), SparseDepthMap.from_depth(np.ones((5, 7))), 4)
        with self.assertRaises(ShapeError):
            crop_valid(np.ones((5, 7)), record)


class TestMultiscaleLoss(unittest.TestCase):
    def setUp(self):
        self.weights = PipelineConfig.desk().lambda_weights()
        self.gt = np.full((8, 8), 2.0)

    def test_exact_prediction(self):
        pyramid = _constant_pyramid([np.full((8, 8), 2.0), np.full((4, 4), 2.0), np.full((2, 2), 2.0)])
        self.assertLess(multiscale_loss(pyramid, self.gt, np.ones((8, 8), bool), self.weights).item(), 1e-24)

    def test_single_pixel_error(self):
        fine = np.full((8, 8), 2.0)
        fine[3, 4] = 3.0
        pyramid = _constant_pyramid([fine, np.full((4, 4), 2.0), np.full((2, 2), 2.0)])
        valid = np.zeros((8, 8), bool)
        valid[3, 4] = True
        self.assertAlmostEqual(multiscale_loss(pyramid, self.gt, valid, self.weights).item(), 1.0, places=12)

    def test_zero_weights_drop_scales(self):
        pyramid = _constant_pyramid([np.full((8, 8), 2.0), np.full((4, 4), 5.0), np.full((2, 2), 7.0)])
        valid = np.ones((8, 8), bool)
        self.assertLess(multiscale_loss(pyramid, self.gt, valid, [1.0, 0.0, 0.0]).item(), 1e-24)
        self.assertGreater(multiscale_loss(pyramid, self.gt, valid, self.weights).item(), 0.0)

    def test_errors(self):
        pyramid = _constant_pyramid([np.full((8, 8), 2.0), np.full((4, 4), 2.0), np.full((2, 2), 2.0)])
        with self.assertRaises(DataError):
            multiscale_loss(pyramid, self.gt, np.zeros((8, 8), bool), self.weights)
        with self.assertRaises(DataError):
            multiscale_loss(pyramid, self.gt, np.ones((8, 8), bool), [0.0, 0.0, 0.0])
        with self.assertRaises(ShapeError):
            multiscale_loss(pyramid, self.gt, np.ones((8, 8), bool), [1.0])


class TestConfigConstants(unittest.TestCase):
    def test_defaults(self):
        cfg = PipelineConfig.desk()
        self.assertEqual(cfg.lambda_weights(), [1.0, 0.25, 1.0 / 16.0])
        self.assertEqual(cfg.kernels, [3, 5, 7])
        self.assertEqual(cfg.n_neighbors, 4)
        self.assertEqual(cfg.clip_norm, 0.1)
        self.assertEqual(cfg.weight_decay, 0.05)
        self.assertEqual(cfg.widths, [8, 16, 32])

    def test_full_size_schedule(self):
        cfg = PipelineConfig.paper()
        self.assertEqual([cfg.iterations(s) for s in range(6)], [12, 10, 8, 6, 4, 2])
        self.assertEqual(cfg.pad_multiple(), 32)
        self.assertEqual(cfg.lambda_weights()[2], 1.0 / 16.0)

    def test_per_scale_lists_must_match(self):
        from pydantic import ValidationError
        with self.assertRaises(ValidationError):
            PipelineConfig(scales=2, widths=[8, 16, 32])
        with self.assertRaises(ValidationError):
            PipelineConfig.desk(kernels=[3, 4])


if __name__ == "__main__":
    unittest.main()
