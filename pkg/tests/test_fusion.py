import unittest

import numpy as np

from src.depth.geometry import CameraIntrinsics
from src.engine.gradcheck import check_gradients
from src.engine.tensor import Tensor
from src.errors import ShapeError
from src.model.fusion import FusionUNet, fuse
from src.service.gradcheck_service import randomize_parameters


class TestFuse(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.rng = np.random.default_rng(0)

    def test_zero_residual_head_keeps_depth(self):
        net = FusionUNet(4, 4, 1, self.rng)
        d_prime = Tensor(self.rng.uniform(1, 3, size=(1, 1, 8, 8)))
        fused, d2 = fuse(Tensor(self.rng.normal(size=(1, 4, 8, 8))), d_prime, CameraIntrinsics.centered(8, 8), net)
        np.testing.assert_array_equal(d2.data, d_prime.data)
        self.assertEqual(fused.shape, (1, 4, 8, 8))

    def test_feature_keeps_input_extents(self):
        net = FusionUNet(8, 8, 2, self.rng)
        fused, d2 = fuse(Tensor(self.rng.normal(size=(1, 8, 32, 40))), Tensor(np.ones((1, 1, 32, 40))),
                         CameraIntrinsics.centered(32, 40), net)
        self.assertEqual(fused.shape, (1, 8, 32, 40))
        self.assertEqual(d2.shape, (1, 1, 32, 40))

    def test_skip_shapes_across_depths(self):
        for depth in (0, 1, 2, 3):
            net = FusionUNet(3, 4, depth, self.rng)
            size = 2 ** depth * 2
            fused, _ = fuse(Tensor(np.zeros((1, 3, size, size))), Tensor(np.ones((1, 1, size, size))),
                            CameraIntrinsics.centered(size, size), net)
            self.assertEqual(fused.shape, (1, 4, size, size))
            self.assertEqual(len(net.encoder), 2 * depth)

    def test_identity_path_gradient(self):
        net = FusionUNet(2, 4, 1, self.rng)
        d_prime = Tensor(self.rng.uniform(1, 3, size=(1, 1, 4, 6)), requires_grad=True)
        _, d2 = fuse(Tensor(self.rng.normal(size=(1, 2, 4, 6))), d_prime, CameraIntrinsics.centered(4, 6), net)
        d2.mean().backward()
        np.testing.assert_allclose(d_prime.grad, 1.0 / 24.0, rtol=0, atol=1e-15)

    def test_indivisible_extents_name_the_multiple(self):
        net = FusionUNet(2, 4, 2, self.rng)
        with self.assertRaises(ShapeError) as ctx:
            fuse(Tensor(np.zeros((1, 2, 6, 8))), Tensor(np.ones((1, 1, 6, 8))), CameraIntrinsics.centered(6, 8), net)
        self.assertIn("4", str(ctx.exception))

    def test_gradients_through_one_fuse(self):
        rng = np.random.default_rng(1)
        net = FusionUNet(2, 3, 1, rng)
        randomize_parameters(net, rng)
        image = Tensor(rng.normal(size=(1, 2, 4, 4)), requires_grad=True)
        d_prime = Tensor(rng.uniform(1, 2, size=(1, 1, 4, 4)), requires_grad=True)
        intr = CameraIntrinsics.centered(4, 4)
        weights = rng.normal(size=(1, 3, 4, 4))

        def loss():
            fused, d2 = fuse(image, d_prime, intr, net)
            return (fused * weights).mean() + d2.square().mean()

        report = check_gradients(loss, [("image", image), ("d_prime", d_prime)] + list(net.named_parameters()),
                                 max_entries=2)
        self.assertTrue(report.passed, report.summary())


if __name__ == "__main__":
    unittest.main()
