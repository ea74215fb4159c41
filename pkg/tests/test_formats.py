import os
import tempfile
import unittest

import numpy as np

from src.depth.sparse_depth import SparseDepthMap
from src.errors import DataError
from src.utility.formats import (
    read_pfm,
    read_rows,
    read_sparse_csv,
    write_pfm,
    write_pgm_preview,
    write_rows,
    write_sparse_csv,
)


class TestFormats(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.dir = self.tmp.name

    def tearDown(self):
        self.tmp.cleanup()

    def test_pfm_grids(self):
        rng = np.random.default_rng(0)
        for grid in (rng.uniform(0, 5, size=(3, 4)), rng.uniform(0, 1, size=(2, 5, 3))):
            path = os.path.join(self.dir, "grid.pfm")
            write_pfm(path, grid)
            loaded = read_pfm(path)
            self.assertEqual(loaded.shape, grid.shape)
            self.assertEqual(loaded.dtype, np.float64)
            np.testing.assert_array_equal(loaded, grid.astype(np.float32))

    def test_pfm_rows_are_stored_bottom_up(self):
        path = os.path.join(self.dir, "rows.pfm")
        write_pfm(path, np.array([[1.0], [2.0]]))
        with open(path, "rb") as f:
            payload = f.read()
        self.assertTrue(payload.startswith(b"Pf\n1 2\n-1.0\n"))
        self.assertEqual(np.frombuffer(payload[-8:], "<f4").tolist(), [2.0, 1.0])

    def test_big_endian_pfm(self):
        path = os.path.join(self.dir, "big.pfm")
        with open(path, "wb") as f:
            f.write(b"Pf\n2 1\n1.0\n")
            f.write(np.array([1.5, 2.5], ">f4").tobytes())
        np.testing.assert_array_equal(read_pfm(path), [[1.5, 2.5]])

    def test_bad_pfm(self):
        path = os.path.join(self.dir, "bad.pfm")
        with open(path, "wb") as f:
            f.write(b"P6\n1 1\n255\n\x00")
        with self.assertRaises(DataError):
            read_pfm(path)
        with open(path, "wb") as f:
            f.write(b"Pf\n2 2\n-1.0\n" + np.zeros(3, "<f4").tobytes())
        with self.assertRaises(DataError):
            read_pfm(path)
        with self.assertRaises(DataError):
            read_pfm(os.path.join(self.dir, "missing.pfm"))

    def test_pgm_preview_range(self):
        path = os.path.join(self.dir, "preview.pgm")
        write_pgm_preview(path, np.array([[1.0, 2.0], [3.0, 5.0]]))
        with open(path, "rb") as f:
            payload = f.read()
        self.assertTrue(payload.startswith(b"P5\n2 2\n255\n"))
        self.assertEqual(list(payload[-4:]), [0, 64, 128, 255])

    def test_sparse_csv(self):
        depth = np.zeros((4, 5))
        depth[1, 3], depth[2, 0] = 2.25, 0.1
        path = os.path.join(self.dir, "sparse.csv")
        write_sparse_csv(path, SparseDepthMap.from_depth(depth))
        np.testing.assert_array_equal(read_sparse_csv(path, 4, 5).depth, depth)

    def test_sparse_csv_rejects_bad_points(self):
        path = os.path.join(self.dir, "sparse.csv")
        for body in ("x,y,depth_m\n5,0,1.0\n", "x,y,depth_m\n0,0,-2\n", "x,y,z\n0,0,1\n", "x,y,depth_m\na,0,1\n"):
            with open(path, "w", encoding="utf-8") as f:
                f.write(body)
            with self.assertRaises(DataError, msg=body):
                read_sparse_csv(path, 4, 5)

    def test_rows_keep_float_precision(self):
        path = os.path.join(self.dir, "rows.csv")
        write_rows(path, ["name", "value"], [["a", 0.1 + 0.2], ["b", 3]])
        rows = read_rows(path)
        self.assertEqual(float(rows[0]["value"]), 0.1 + 0.2)
        self.assertEqual(rows[1], {"name": "b", "value": "3"})


if __name__ == "__main__":
    unittest.main()
