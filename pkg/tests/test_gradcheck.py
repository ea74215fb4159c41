import unittest

import numpy as np

from src.engine.gradcheck import check_gradients
from src.engine.tensor import Tensor
from src.service.gradcheck_service import GradcheckService, randomize_parameters, small_pipeline_config
from src.model.network import BPNet


class TestCheckGradients(unittest.TestCase):
    def test_matches_a_correct_gradient(self):
        x = Tensor(np.array([0.5, -1.5]), requires_grad=True)
        report = check_gradients(lambda: (x * x).sum(), [("x", x)], name="square")
        self.assertTrue(report.passed, report.summary())
        self.assertEqual(report.checked, 2)

    def test_detects_a_wrong_gradient(self):
        # detached factors hide two thirds of d(x^3)/dx from backward()
        x = Tensor(np.array([1.3]), requires_grad=True)
        report = check_gradients(lambda: (x * x.detach() * x.detach()).sum(), [("x", x)], name="cube")
        self.assertFalse(report.passed)
        self.assertIn("x[0]", report.worst)


class TestGradcheckService(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.service = GradcheckService(seed=0, max_entries=3)

    def _assert_all_pass(self, checks):
        rng = np.random.default_rng(7)
        for name, fn, tensors in checks:
            report = check_gradients(fn, tensors, name=name, max_entries=3, rng=rng)
            print(report.summary())
            self.assertTrue(report.passed, report.summary())

    def test_every_op(self):
        checks = self.service.op_checks()
        self.assertGreaterEqual(len(checks), 25)
        self._assert_all_pass(checks)

    def test_modules(self):
        checks = self.service.module_checks()
        self.assertEqual([c[0] for c in checks],
                         ["inverse_project", "weighted_pool", "bilateral_propagation", "refinement"])
        self._assert_all_pass(checks)

    def test_pipeline(self):
        name, fn, tensors = self.service.pipeline_check()
        self.assertEqual(name, "pipeline_1scale_8x8")
        self.assertGreater(len(tensors), 10)
        self._assert_all_pass([(name, fn, tensors)])

    def test_run_reports_every_check(self):
        reports = GradcheckService(seed=1).run(include_pipeline=False)
        self.assertTrue(all(r.passed for r in reports), [r.summary() for r in reports if not r.passed])
        self.assertEqual(len(reports), len(self.service.op_checks()) + 4)


class TestRandomizeParameters(unittest.TestCase):
    def test_no_zero_parameter_left(self):
        model = BPNet(small_pipeline_config())
        randomize_parameters(model, np.random.default_rng(0))
        for name, p in model.named_parameters():
            self.assertTrue(np.any(p.data), name)
            if name.endswith("gate"):
                self.assertTrue(np.all((p.data >= 0.2) & (p.data <= 0.8)))


if __name__ == "__main__":
    unittest.main()
