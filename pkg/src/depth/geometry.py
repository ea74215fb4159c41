"""
Camera intrinsics and inverse projection of depth maps into camera space.

Pixel (x, y) sits at integer indices, x along the width axis.
"""

from typing import Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from src.engine import functional as F
from src.engine.tensor import Tensor, as_tensor


class CameraIntrinsics(BaseModel):
    model_config = ConfigDict(frozen=True)

    fx: float = Field(gt=0)
    fy: float = Field(gt=0)
    cx: float
    cy: float

    def at_scale(self, s: int) -> "CameraIntrinsics":
        return at_scale(self, s)

    def flipped(self, width: int) -> "CameraIntrinsics":
        """Intrinsics of the horizontally mirrored image."""
        return CameraIntrinsics(fx=self.fx, fy=self.fy, cx=(width - 1) - self.cx, cy=self.cy)

    @classmethod
    def centered(cls, height: int, width: int, focal: Optional[float] = None) -> "CameraIntrinsics":
        focal = float(focal if focal is not None else max(height, width))
        return cls(fx=focal, fy=focal, cx=(width - 1) / 2.0, cy=(height - 1) / 2.0)


def at_scale(intr: CameraIntrinsics, s: int) -> CameraIntrinsics:
    if s < 0:
        raise ValueError(f"Scale must be non-negative, got {s}")
    factor = float(2 ** s)
    return CameraIntrinsics(fx=intr.fx / factor, fy=intr.fy / factor,
                            cx=intr.cx / factor, cy=intr.cy / factor)


def ray_grid(height: int, width: int, intr: CameraIntrinsics) -> tuple[np.ndarray, np.ndarray]:
    """Per-pixel (x - cx) / fx and (y - cy) / fy."""
    xs = (np.arange(width, dtype=np.float64) - intr.cx) / intr.fx
    ys = (np.arange(height, dtype=np.float64) - intr.cy) / intr.fy
    return np.broadcast_to(xs[None, :], (height, width)), np.broadcast_to(ys[:, None], (height, width))


def inverse_project(depth: Union[Tensor, np.ndarray], intr: CameraIntrinsics) -> Tensor:
    """
    Depth (H, W) or (1, 1, H, W) to camera-space (1, 3, H, W) with channels X, Y, Z.

    Zero depth maps to the origin; the result is differentiable in depth.
    """
    depth = as_tensor(depth)
    if depth.ndim == 2:
        depth = depth.reshape(1, 1, *depth.shape)
    height, width = depth.shape[2], depth.shape[3]
    rays_x, rays_y = ray_grid(height, width, intr)
    x = F.mul(depth, rays_x[None, None])
    y = F.mul(depth, rays_y[None, None])
    return F.concat([x, y, depth], axis=1)
