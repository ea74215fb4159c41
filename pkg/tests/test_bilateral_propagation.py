import unittest

import numpy as np

from src.depth.geometry import CameraIntrinsics, inverse_project
from src.depth.sparse_depth import NeighborIndex, SparseDepthMap, knn
from src.engine.gradcheck import check_gradients
from src.engine.nn import Conv2d
from src.engine.tensor import Tensor
from src.errors import DataError
from src.model.bilateral_propagation import (
    BilateralCoefficients,
    CoefficientMLP,
    ImageEncodingFusion,
    PriorEncodings,
    build_prior_encodings,
    generate_coefficients,
    mlp_in_features,
    propagate,
)
from src.service.gradcheck_service import randomize_parameters


def _instance(seed: int, height: int = 6, width: int = 7, count: int = 5, channels: int = 3, n: int = 3):
    rng = np.random.default_rng(seed)
    depth = np.zeros(height * width)
    depth[rng.choice(height * width, size=count, replace=False)] = rng.uniform(1.0, 4.0, size=count)
    sparse = SparseDepthMap.from_depth(depth.reshape(height, width))
    intr = CameraIntrinsics.centered(height, width)
    enc = PriorEncodings(
        image_encoding=Tensor(rng.normal(size=(1, channels, height, width)), requires_grad=True),
        depth_encoding=inverse_project(sparse.values, intr),
        neighbor_index=knn(sparse, n),
        sparse=sparse,
    )
    mlp = CoefficientMLP(mlp_in_features(channels), 8, rng)
    randomize_parameters(mlp, rng)
    mlp.eval()
    return enc, mlp


class TestCoefficientMLP(unittest.TestCase):
    def test_untrained_head_averages_neighbours(self):
        enc, _ = _instance(0)
        mlp = CoefficientMLP(mlp_in_features(3), 8, np.random.default_rng(0))
        coeffs = generate_coefficients(enc, mlp)
        np.testing.assert_array_equal(coeffs.alpha.data, 1.0)
        np.testing.assert_array_equal(coeffs.beta.data, 0.0)
        np.testing.assert_allclose(coeffs.omega.data, 1.0 / 3.0, atol=1e-15)


class TestGenerateCoefficients(unittest.TestCase):
    def test_omega_is_a_distribution(self):
        enc, mlp = _instance(1)
        omega = generate_coefficients(enc, mlp).omega.data
        self.assertTrue(np.all((omega > 0) & (omega < 1)))
        np.testing.assert_allclose(omega.sum(axis=1), 1.0, atol=1e-12)

    def test_single_neighbour_has_unit_weight(self):
        enc, mlp = _instance(2, n=1)
        np.testing.assert_array_equal(generate_coefficients(enc, mlp).omega.data, 1.0)

    def test_identical_pairs_share_weight(self):
        enc, mlp = _instance(3)
        index = enc.neighbor_index
        first = index.index[:, :1]
        twin = NeighborIndex(index=np.repeat(first, 2, axis=1),
                             offsets=np.repeat(index.offsets[:, :1], 2, axis=1),
                             height=index.height, width=index.width)
        twin_enc = PriorEncodings(enc.image_encoding, enc.depth_encoding, twin, enc.sparse)
        np.testing.assert_allclose(generate_coefficients(twin_enc, mlp).omega.data, 0.5, atol=1e-15)

    def test_fewer_valid_pixels_than_neighbours(self):
        enc, mlp = _instance(4, count=2, n=5)
        omega = generate_coefficients(enc, mlp).omega.data
        self.assertEqual(omega.shape[1], 2)
        np.testing.assert_allclose(omega.sum(axis=1), 1.0, atol=1e-12)

    def test_mlp_gradients(self):
        enc, mlp = _instance(5)
        mlp.train()
        report = check_gradients(lambda: propagate(enc.sparse, generate_coefficients(enc, mlp), enc).mean(),
                                 list(mlp.named_parameters()), max_entries=3)
        self.assertTrue(report.passed, report.summary())


class TestPropagate(unittest.TestCase):
    def test_nearest_interpolation(self):
        depth = np.zeros((5, 5))
        depth[0, 0], depth[4, 4] = 1.5, 3.0
        sparse = SparseDepthMap.from_depth(depth)
        index = knn(sparse, 1)
        enc = PriorEncodings(Tensor(np.zeros((1, 1, 5, 5))), Tensor(np.zeros((1, 3, 5, 5))), index, sparse)
        dense = propagate(sparse, BilateralCoefficients.nearest(25), enc).data[0, 0]
        ys, xs = np.mgrid[:5, :5]
        expected = np.where(ys ** 2 + xs ** 2 <= (4 - ys) ** 2 + (4 - xs) ** 2, 1.5, 3.0)
        np.testing.assert_array_equal(dense, expected)

    def test_zero_alpha_ignores_sparse_depth(self):
        enc, mlp = _instance(6)
        coeffs = generate_coefficients(enc, mlp)
        coeffs = BilateralCoefficients(alpha=Tensor(np.zeros(coeffs.alpha.shape)), beta=coeffs.beta,
                                       omega=coeffs.omega)
        expected = (coeffs.omega.data * coeffs.beta.data).sum(axis=1)
        scaled = SparseDepthMap.from_depth(enc.sparse.depth * 7.0)
        np.testing.assert_allclose(propagate(scaled, coeffs, enc).data.reshape(-1), expected, atol=1e-15)

    def test_matches_scalar_loop(self):
        for seed in range(3):
            enc, mlp = _instance(10 + seed)
            coeffs = generate_coefficients(enc, mlp)
            dense = propagate(enc.sparse, coeffs, enc).data.reshape(-1)
            flat_depth = enc.sparse.depth.reshape(-1)
            index = enc.neighbor_index.index
            for i in range(index.shape[0]):
                total = 0.0
                for k in range(index.shape[1]):
                    j = index[i, k]
                    total += coeffs.omega.data[i, k] * (coeffs.alpha.data[i, k] * flat_depth[j] + coeffs.beta.data[i, k])
                self.assertAlmostEqual(dense[i], total, delta=1e-12)

    def test_convex_in_candidates(self):
        for ablation in ("full", "content_only", "spatial_only"):
            enc, mlp = _instance(20)
            coeffs = generate_coefficients(enc, mlp, ablation=ablation)
            dense = propagate(enc.sparse, coeffs, enc).data.reshape(-1)
            source = enc.sparse.depth.reshape(-1)[enc.neighbor_index.index]
            candidates = coeffs.alpha.data * source + coeffs.beta.data
            self.assertTrue(np.all(dense >= candidates.min(axis=1) - 1e-12), ablation)
            self.assertTrue(np.all(dense <= candidates.max(axis=1) + 1e-12), ablation)
            np.testing.assert_allclose(coeffs.omega.data.sum(axis=1), 1.0, atol=1e-12)

    def test_permuted_neighbours(self):
        enc, mlp = _instance(21, n=4)
        index = enc.neighbor_index
        perm = np.array([2, 0, 3, 1])
        permuted = NeighborIndex(index=index.index[:, perm], offsets=index.offsets[:, perm],
                                 height=index.height, width=index.width)
        permuted_enc = PriorEncodings(enc.image_encoding, enc.depth_encoding, permuted, enc.sparse)
        base = generate_coefficients(enc, mlp)
        moved = generate_coefficients(permuted_enc, mlp)
        np.testing.assert_allclose(moved.omega.data, base.omega.data[:, perm], atol=1e-12)
        np.testing.assert_allclose(propagate(enc.sparse, moved, permuted_enc).data,
                                   propagate(enc.sparse, base, enc).data, atol=1e-12)

    def test_ablations_zero_their_inputs(self):
        enc, mlp = _instance(22)
        spatial = generate_coefficients(enc, mlp, ablation="spatial_only")
        shifted = PriorEncodings(Tensor(enc.image_encoding.data + 5.0), enc.depth_encoding,
                                 enc.neighbor_index, enc.sparse)
        np.testing.assert_array_equal(generate_coefficients(shifted, mlp, ablation="spatial_only").alpha.data,
                                      spatial.alpha.data)
        content = generate_coefficients(enc, mlp, ablation="content_only")
        self.assertFalse(np.allclose(content.alpha.data, spatial.alpha.data))


class TestBuildPriorEncodings(unittest.TestCase):
    def setUp(self):
        self.rng = np.random.default_rng(0)
        depth = np.zeros((8, 8))
        depth[1, 2], depth[6, 5] = 2.0, 3.0
        self.sparse = SparseDepthMap.from_depth(depth)
        self.intr = CameraIntrinsics.centered(8, 8)

    def test_coarsest_scale_keeps_image_feature(self):
        image_feat = Tensor(self.rng.normal(size=(1, 4, 8, 8)))
        enc = build_prior_encodings(image_feat, None, None, self.intr, self.sparse, 2)
        self.assertIs(enc.image_encoding, image_feat)
        np.testing.assert_array_equal(enc.depth_encoding.data[0, 2], self.sparse.depth)
        self.assertEqual(enc.neighbor_index.n, 2)

    def test_finer_scale_shapes(self):
        encoder = ImageEncodingFusion(6, 4, self.rng)
        enc = build_prior_encodings(Tensor(self.rng.normal(size=(1, 4, 8, 8))),
                                    Tensor(self.rng.normal(size=(1, 6, 4, 4))), Tensor(np.zeros((1, 1, 4, 4))),
                                    self.intr, self.sparse, 2, encoder=encoder)
        self.assertEqual(enc.image_encoding.shape, (1, 4, 8, 8))

    def test_zero_coarse_depth_contributes_zero_channels(self):
        depth_feature = inverse_project(np.zeros((4, 4)), self.intr.at_scale(1))
        self.assertFalse(np.any(depth_feature.data))

    def test_pooled_sparse_input(self):
        head = Conv2d(4, 4, self.rng, kernel_size=1)
        enc = build_prior_encodings(Tensor(self.rng.normal(size=(1, 4, 4, 4))), None, None,
                                    self.intr.at_scale(1), self.sparse, 2, pool_head=head, scale=1)
        self.assertEqual(enc.sparse.shape, (4, 4))
        self.assertEqual(enc.sparse.count, 2)

    def test_missing_coarse_inputs(self):
        encoder = ImageEncodingFusion(6, 4, self.rng)
        with self.assertRaises(DataError):
            build_prior_encodings(Tensor(np.zeros((1, 4, 8, 8))), None, None, self.intr, self.sparse, 2,
                                  encoder=encoder)
        with self.assertRaises(DataError):
            build_prior_encodings(Tensor(np.zeros((1, 4, 8, 8))), Tensor(np.zeros((1, 6, 4, 4))), None,
                                  self.intr, self.sparse, 2)


if __name__ == "__main__":
    unittest.main()
