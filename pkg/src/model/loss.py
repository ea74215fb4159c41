import logging
from typing import Sequence

import numpy as np

from src.engine import functional as F
from src.engine.tensor import Tensor
from src.errors import DataError, ShapeError
from src.model.network import DepthPyramid

logger = logging.getLogger(__name__)


def multiscale_loss(pyramid: DepthPyramid, gt: np.ndarray, valid: np.ndarray,
                    weights: Sequence[float]) -> Tensor:
    """
    sum_s lambda_s * sum over valid pixels of (gt - upsample_s(D^s))**2.

    Every D^s is bilinearly upsampled by 2**s to the ground-truth grid; scales
    with a zero weight are skipped.
    """
    gt = np.asarray(gt, dtype=np.float64)
    valid = np.asarray(valid, dtype=bool)
    if gt.shape != valid.shape:
        raise ShapeError("multiscale_loss", gt.shape, valid.shape)
    if not valid.any():
        raise DataError("multiscale_loss: no valid ground-truth pixel")
    if len(weights) != len(pyramid):
        raise ShapeError("multiscale_loss", (len(weights),), (len(pyramid),), "one weight per scale")

    mask = valid.astype(np.float64)[None, None]
    target = np.where(valid, gt, 0.0)[None, None]
    total = None
    for s, weight in enumerate(weights):
        if weight == 0:
            continue
        upsampled = F.bilinear_upsample(pyramid[s].depth, 2 ** s)
        if tuple(upsampled.shape[2:]) != gt.shape:
            raise ShapeError("multiscale_loss", upsampled.shape, gt.shape, f"scale {s}")
        term = ((upsampled - target).square() * mask).sum() * float(weight)
        total = term if total is None else total + term
    if total is None:
        raise DataError("multiscale_loss: every loss weight is zero")
    return total
