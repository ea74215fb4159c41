"""
Synthetic Scene Service
Purpose: Generate and store small RGB-D scenes for training and evaluation.
Key Features:
- Piecewise-planar depth: one slanted background plane plus nearer boxes
- Image = region albedo x depth shading + texture noise, so depth edges are image edges
- Fully determined by the master seed (one spawned stream per scene)
- Scene directories carry a `scenes.json` manifest with PFM paths and intrinsics
"""

import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np
from pydantic import BaseModel, ValidationError

from src.depth.geometry import CameraIntrinsics
from src.errors import DataError
from src.utility.formats import read_pfm, write_pfm

logger = logging.getLogger(__name__)

MANIFEST_NAME = "scenes.json"


@dataclass
class Scene:
    name: str
    image: np.ndarray
    depth: np.ndarray
    intrinsics: CameraIntrinsics

    @property
    def shape(self) -> tuple[int, int]:
        return self.depth.shape

    @property
    def valid(self) -> np.ndarray:
        return self.depth > 0


class SceneRecord(BaseModel):
    name: str
    image: str
    depth: str
    intrinsics: CameraIntrinsics


class SceneManifest(BaseModel):
    seed: Optional[int] = None
    scenes: list[SceneRecord]


class SceneGenerator(ABC):
    @abstractmethod
    def generate(self, count: int, seed: int) -> list[Scene]:
        """Generate `count` scenes deterministically from `seed`"""
        pass


class PiecewisePlanarGenerator(SceneGenerator):
    def __init__(self, height: int = 32, width: int = 32, max_boxes: int = 3,
                 depth_range: tuple[float, float] = (2.0, 5.0), noise: float = 0.02):
        if height < 4 or width < 4:
            raise DataError(f"Synthetic scenes need at least 4x4 pixels, got {height}x{width}")
        self.height = height
        self.width = width
        self.max_boxes = max_boxes
        self.depth_range = depth_range
        self.noise = noise

    def _scene(self, rng: np.random.Generator, name: str) -> Scene:
        h, w = self.height, self.width
        near, far = self.depth_range
        ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)

        base = rng.uniform(near + 0.5, far)
        slope_x, slope_y = rng.uniform(-0.5, 0.5, size=2)
        depth = base + slope_x * (xs / w - 0.5) + slope_y * (ys / h - 0.5)
        region = np.zeros((h, w), dtype=np.int64)

        for box in range(1, int(rng.integers(1, self.max_boxes + 1)) + 1):
            bh = int(rng.integers(h // 6 + 1, h // 2 + 1))
            bw = int(rng.integers(w // 6 + 1, w // 2 + 1))
            top = int(rng.integers(0, h - bh + 1))
            left = int(rng.integers(0, w - bw + 1))
            box_depth = rng.uniform(near, base - 0.25)
            tilt = rng.uniform(-0.2, 0.2)
            patch = box_depth + tilt * (xs[top:top + bh, left:left + bw] - left) / bw
            depth[top:top + bh, left:left + bw] = patch
            region[top:top + bh, left:left + bw] = box
        depth = np.clip(depth, near * 0.5, None)

        albedo = rng.uniform(0.2, 1.0, size=(region.max() + 1, 3))
        shading = near / depth
        image = albedo[region] * shading[:, :, None]
        image += self.noise * rng.standard_normal(image.shape)
        intrinsics = CameraIntrinsics.centered(h, w)
        return Scene(name=name, image=image, depth=depth, intrinsics=intrinsics)

    def generate(self, count: int, seed: int) -> list[Scene]:
        if count < 1:
            raise DataError(f"Scene count must be positive, got {count}")
        streams = np.random.SeedSequence(seed).spawn(count)
        scenes = [self._scene(np.random.default_rng(stream), f"scene_{i:03d}") for i, stream in enumerate(streams)]
        logger.info(f"Generated {count} synthetic {self.height}x{self.width} scenes (seed {seed})")
        return scenes


def save_scenes(directory: Union[str, Path], scenes: list[Scene], seed: Optional[int] = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    records = []
    for scene in scenes:
        image_name, depth_name = f"{scene.name}_image.pfm", f"{scene.name}_depth.pfm"
        write_pfm(directory / image_name, scene.image)
        write_pfm(directory / depth_name, scene.depth)
        records.append(SceneRecord(name=scene.name, image=image_name, depth=depth_name,
                                   intrinsics=scene.intrinsics))
    manifest = directory / MANIFEST_NAME
    manifest.write_text(SceneManifest(seed=seed, scenes=records).model_dump_json(indent=2), encoding="utf-8")
    logger.info(f"Wrote {len(scenes)} scenes to {directory}")
    return manifest


def load_scenes(directory: Union[str, Path]) -> list[Scene]:
    directory = Path(directory)
    manifest_path = directory / MANIFEST_NAME
    if not manifest_path.exists():
        raise DataError(f"No scene manifest at {manifest_path}")
    try:
        manifest = SceneManifest.model_validate_json(manifest_path.read_text(encoding="utf-8"))
    except ValidationError as e:
        raise DataError(f"Invalid scene manifest {manifest_path}: {e}") from e
    if not manifest.scenes:
        raise DataError(f"Scene manifest {manifest_path} lists no scenes")

    scenes = []
    for record in manifest.scenes:
        image = read_pfm(directory / record.image)
        depth = read_pfm(directory / record.depth)
        if image.shape[:2] != depth.shape:
            raise DataError(f"{record.name}: image {image.shape} and depth {depth.shape} disagree")
        scenes.append(Scene(name=record.name, image=image, depth=depth, intrinsics=record.intrinsics))
    logger.info(f"Loaded {len(scenes)} scenes from {directory}")
    return scenes
