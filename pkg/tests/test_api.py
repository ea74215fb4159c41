import unittest

import numpy as np
from fastapi.testclient import TestClient

from src.main import app


class TestCompletionApi(unittest.TestCase):
    """Test: image + sparse points -> dense depth, and the rejected requests"""

    @classmethod
    def setUpClass(cls):
        rng = np.random.default_rng(0)
        cls.image = rng.uniform(0.0, 1.0, size=(12, 10, 3)).tolist()
        cls.points = [{"x": 1, "y": 2, "depth_m": 2.0}, {"x": 8, "y": 9, "depth_m": 3.5},
                      {"x": 5, "y": 5, "depth_m": 2.5}]

    def test_health(self):
        with TestClient(app) as client:
            resp = client.get("/api/health")
            self.assertEqual(resp.status_code, 200)
            self.assertIn("running", resp.json()["message"])

    def test_complete(self):
        """Use TestClient as context manager to ensure startup_event is called"""
        with TestClient(app) as client:
            resp = client.post("/api/complete", json={"image": self.image, "points": self.points})
            self.assertEqual(resp.status_code, 200)
            body = resp.json()
            self.assertEqual(body["status"], "success")
            self.assertEqual((body["height"], body["width"]), (12, 10))
            depth = np.array(body["depth"])
            self.assertEqual(depth.shape, (12, 10))
            self.assertTrue(np.all(np.isfinite(depth)))

    def test_complete_with_intrinsics(self):
        intrinsics = {"fx": 12.0, "fy": 12.0, "cx": 4.5, "cy": 5.5}
        with TestClient(app) as client:
            resp = client.post("/api/complete", json={"image": self.image, "points": self.points,
                                                      "intrinsics": intrinsics})
            self.assertEqual(resp.status_code, 200)

    def test_rejected_requests(self):
        with TestClient(app) as client:
            outside = [{"x": 10, "y": 0, "depth_m": 1.0}]
            self.assertEqual(client.post("/api/complete", json={"image": self.image, "points": outside}).status_code, 400)
            negative = [{"x": 0, "y": 0, "depth_m": -1.0}]
            self.assertEqual(client.post("/api/complete", json={"image": self.image, "points": negative}).status_code, 400)
            self.assertEqual(client.post("/api/complete", json={"image": self.image, "points": []}).status_code, 400)
            grey = np.zeros((12, 10, 1)).tolist()
            self.assertEqual(client.post("/api/complete", json={"image": grey, "points": self.points}).status_code, 400)
            ragged = [[[0.0, 0.0, 0.0]], [[0.0, 0.0, 0.0], [0.0, 0.0, 0.0]]]
            self.assertEqual(client.post("/api/complete", json={"image": ragged, "points": self.points}).status_code, 400)
            self.assertEqual(client.post("/api/complete", json={"points": self.points}).status_code, 422)


if __name__ == "__main__":
    unittest.main()
