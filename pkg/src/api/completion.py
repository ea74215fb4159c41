from typing import Optional

import numpy as np
from fastapi import APIRouter, Depends, HTTPException, Request, status
from pydantic import BaseModel

from src.depth.geometry import CameraIntrinsics
from src.depth.sparse_depth import SparseDepthMap
from src.errors import DataError, NumericError, ShapeError
from src.service.completion_service import CompletionService

router = APIRouter(prefix="/api/complete", tags=["complete"])


def get_completion_service(request: Request) -> CompletionService:
    """Dependency to get the completion service from app state."""
    return request.app.state.completion_service


class SparsePoint(BaseModel):
    x: int
    y: int
    depth_m: float


class CompletionRequest(BaseModel):
    image: list[list[list[float]]]
    points: list[SparsePoint]
    intrinsics: Optional[CameraIntrinsics] = None


@router.post("")
async def complete_depth(
    request: CompletionRequest,
    completion_service: CompletionService = Depends(get_completion_service),
):
    """
    POST /api/complete
    Body: {
        "image": [[[r, g, b], ...], ...],
        "points": [{"x": 3, "y": 5, "depth_m": 2.4}],
        "intrinsics": {"fx": 32, "fy": 32, "cx": 15.5, "cy": 15.5}
    }

    Response: {
        "status": "success",
        "height": 32,
        "width": 32,
        "depth": [[...], ...]
    }
    """
    try:
        image = np.asarray(request.image, dtype=np.float64)
    except ValueError:
        raise HTTPException(status_code=status.HTTP_400_BAD_REQUEST, detail="Image rows must all have the same length")
    if image.ndim != 3 or image.shape[0] == 0 or image.shape[1] == 0:
        raise HTTPException(status_code=status.HTTP_400_BAD_REQUEST, detail="Image must be a non-empty HxWx3 array")
    if not request.points:
        raise HTTPException(status_code=status.HTTP_400_BAD_REQUEST, detail="At least one sparse point is required")

    height, width = image.shape[:2]
    depth = np.zeros((height, width))
    for point in request.points:
        if not (0 <= point.x < width and 0 <= point.y < height) or not point.depth_m > 0:
            raise HTTPException(status_code=status.HTTP_400_BAD_REQUEST,
                                detail=f"Point ({point.x}, {point.y}, {point.depth_m}) is outside the image or not positive")
        depth[point.y, point.x] = point.depth_m

    try:
        dense = completion_service.complete(image, SparseDepthMap.from_depth(depth), request.intrinsics)
    except (DataError, ShapeError) as e:
        raise HTTPException(status_code=status.HTTP_400_BAD_REQUEST, detail=str(e))
    except NumericError as e:
        raise HTTPException(status_code=status.HTTP_500_INTERNAL_SERVER_ERROR, detail=str(e))

    return {
        "status": "success",
        "height": height,
        "width": width,
        "depth": dense.tolist(),
    }
