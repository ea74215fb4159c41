"""
Central finite-difference checks of analytic gradients.

Relative error per coordinate is |analytic - numeric| / max(|analytic|, |numeric|, floor);
the floor keeps coordinates whose true gradient is ~0 from dominating.
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from src.config.settings import settings
from src.engine.tensor import Tensor

logger = logging.getLogger(__name__)


@dataclass
class GradcheckReport:
    name: str
    max_rel_error: float = 0.0
    worst: str = ""
    checked: int = 0
    rtol: float = settings.GRADCHECK_RTOL
    details: list[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.rtol

    def summary(self) -> str:
        status = "ok" if self.passed else "FAIL"
        return f"{self.name}: {status} max_rel_error={self.max_rel_error:.3e} over {self.checked} coordinates (worst {self.worst})"


def numerical_gradient(fn: Callable[[], Tensor], tensor: Tensor, index: tuple[int, ...],
                       h: float = settings.GRADCHECK_STEP) -> float:
    original = tensor.data[index]
    tensor.data[index] = original + h
    plus = fn().item()
    tensor.data[index] = original - h
    minus = fn().item()
    tensor.data[index] = original
    return (plus - minus) / (2.0 * h)


def check_gradients(
    fn: Callable[[], Tensor],
    tensors: Sequence[tuple[str, Tensor]],
    name: str = "gradcheck",
    h: float = settings.GRADCHECK_STEP,
    rtol: float = settings.GRADCHECK_RTOL,
    floor: float = settings.GRADCHECK_FLOOR,
    max_entries: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> GradcheckReport:
    """
    Compare backward() of the scalar `fn()` with central differences.

    With `max_entries`, only that many coordinates per tensor are sampled.
    """
    for _, t in tensors:
        t.zero_grad()
    fn().backward()
    analytic = {label: (np.zeros_like(t.data) if t.grad is None else t.grad.copy()) for label, t in tensors}

    rng = rng if rng is not None else np.random.default_rng(0)
    report = GradcheckReport(name=name, rtol=rtol)
    for label, t in tensors:
        coordinates = list(np.ndindex(t.shape))
        if max_entries is not None and len(coordinates) > max_entries:
            picks = rng.choice(len(coordinates), size=max_entries, replace=False)
            coordinates = [coordinates[i] for i in sorted(picks)]
        for index in coordinates:
            numeric = numerical_gradient(fn, t, index, h)
            exact = float(analytic[label][index])
            error = abs(exact - numeric) / max(abs(exact), abs(numeric), floor)
            report.checked += 1
            if error > report.max_rel_error:
                report.max_rel_error = error
                report.worst = f"{label}{list(index)} analytic={exact:.6e} numeric={numeric:.6e}"
    for _, t in tensors:
        t.zero_grad()
    logger.debug(report.summary())
    return report
