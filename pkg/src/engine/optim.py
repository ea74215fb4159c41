import logging
from typing import Optional, Sequence

import numpy as np

from src.engine.nn import Parameter
from src.errors import NumericError

logger = logging.getLogger(__name__)


def _check_finite(params: Sequence[Parameter], names: Optional[Sequence[str]] = None) -> None:
    for index, p in enumerate(params):
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            label = names[index] if names else (p.name or f"param[{index}]")
            raise NumericError(f"Non-finite gradient in parameter {label}")


def clip_grad_norm(params: Sequence[Parameter], max_norm: float) -> float:
    """
    Rescale gradients in place so that their global l2 norm is at most `max_norm`.

    Returns the norm measured before clipping.
    """
    grads = [p.grad for p in params if p.grad is not None]
    if not grads:
        return 0.0
    total = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))
    if not np.isfinite(total):
        _check_finite(params)
    if total > max_norm:
        scale = max_norm / total
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return total


def adamw_step(params: Sequence[Parameter], grads: Sequence[Optional[np.ndarray]], lr: float,
               weight_decay: float, betas: tuple[float, float], step_count: int,
               moments: dict[int, tuple[np.ndarray, np.ndarray]], eps: float = 1e-8,
               names: Optional[Sequence[str]] = None) -> None:
    """
    One decoupled-weight-decay Adam update, in place.

    `step_count` is 1-based; `moments` maps parameter position to (m, v) and is
    updated in place.
    """
    beta1, beta2 = betas
    for index, (p, grad) in enumerate(zip(params, grads)):
        if grad is None:
            grad = np.zeros_like(p.data)
        if not np.all(np.isfinite(grad)):
            label = names[index] if names else (p.name or f"param[{index}]")
            raise NumericError(f"Non-finite gradient in parameter {label}")
        m, v = moments.get(index, (np.zeros_like(p.data), np.zeros_like(p.data)))
        m = beta1 * m + (1.0 - beta1) * grad
        v = beta2 * v + (1.0 - beta2) * grad * grad
        moments[index] = (m, v)
        m_hat = m / (1.0 - beta1 ** step_count)
        v_hat = v / (1.0 - beta2 ** step_count)
        p.data *= 1.0 - lr * weight_decay
        p.data -= lr * m_hat / (np.sqrt(v_hat) + eps)


class AdamW:
    def __init__(self, named_params: Sequence[tuple[str, Parameter]], lr: float = 1e-3,
                 weight_decay: float = 0.05, betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.names = [name for name, _ in named_params]
        self.params = [p for _, p in named_params]
        self.lr = lr
        self.weight_decay = weight_decay
        self.betas = betas
        self.eps = eps
        self.step_count = 0
        self.moments: dict[int, tuple[np.ndarray, np.ndarray]] = {}

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def clip(self, max_norm: float) -> float:
        return clip_grad_norm(self.params, max_norm)

    def step(self) -> None:
        self.step_count += 1
        adamw_step(self.params, [p.grad for p in self.params], self.lr, self.weight_decay,
                   self.betas, self.step_count, self.moments, eps=self.eps, names=self.names)
