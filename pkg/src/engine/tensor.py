"""
Tensor Engine
Purpose: a dense float64 tensor with reverse-mode differentiation.
Key Features:
- Every differentiable op is a `Function` with a numpy forward and backward rule
- A graph node is recorded only when some input requires a gradient
- Gradient recording can be switched off per thread (`no_grad`) so read-only
  evaluation workers can share one parameter set
"""

import logging
import threading
from abc import ABC, abstractmethod
from contextlib import contextmanager
from typing import Any, Iterator, Optional, Sequence, Union

import numpy as np

from src.errors import ShapeError

logger = logging.getLogger(__name__)

ArrayLike = Union[np.ndarray, float, int, Sequence[float], Sequence[Sequence[float]]]

_grad_mode = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_grad_mode, "enabled", True)


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording for the current thread."""
    previous = is_grad_enabled()
    _grad_mode.enabled = False
    try:
        yield
    finally:
        _grad_mode.enabled = previous


class Function(ABC):
    """
    Base class of differentiable operations.

    `forward` receives the numpy data of the input tensors, `backward` receives
    dL/d(output) and returns one gradient (or None) per input tensor.
    """

    def __init__(self, *tensors: "Tensor"):
        self.tensors = tensors

    @abstractmethod
    def forward(self, *arrays: np.ndarray, **kwargs: Any) -> np.ndarray:
        pass

    @abstractmethod
    def backward(self, grad: np.ndarray) -> tuple[Optional[np.ndarray], ...]:
        pass

    @classmethod
    def apply(cls, *tensors: "Tensor", **kwargs: Any) -> "Tensor":
        func = cls(*tensors)
        out_data = func.forward(*(t.data for t in tensors), **kwargs)
        requires_grad = is_grad_enabled() and any(t.requires_grad for t in tensors)
        return Tensor(out_data, requires_grad=requires_grad, creator=func if requires_grad else None)

    @property
    def name(self) -> str:
        return type(self).__name__


def as_tensor(value: Union["Tensor", ArrayLike]) -> "Tensor":
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


class Tensor:
    """
    Dense row-major float64 array with an optional gradient buffer.

    Only the gradient buffer is mutated after creation; parameters are updated in
    place by optimizers.
    """

    def __init__(
        self,
        data: ArrayLike,
        requires_grad: bool = False,
        creator: Optional[Function] = None,
        name: Optional[str] = None,
    ):
        self.data = np.ascontiguousarray(np.asarray(data, dtype=np.float64))
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.creator = creator
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def __len__(self) -> int:
        return self.data.shape[0]

    def __repr__(self) -> str:
        label = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, grad: np.ndarray) -> None:
        if grad.shape != self.shape:
            raise ShapeError("accumulate_grad", grad.shape, self.shape)
        if self.grad is None:
            self.grad = np.array(grad, dtype=np.float64, copy=True)
        else:
            self.grad = self.grad + grad

    def _topological_order(self) -> list["Tensor"]:
        order: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            if node.creator is not None:
                for parent in reversed(node.creator.tensors):
                    if parent.requires_grad and id(parent) not in visited:
                        stack.append((parent, False))
        return order

    def backward(self) -> None:
        """
        Propagate d(self)/d(x) into every reachable tensor that requires a gradient.

        Leaf gradients accumulate across calls; the graph is kept, so clearing leaf
        gradients and calling again reproduces the same values.
        """
        if self.size != 1:
            raise ShapeError("backward", self.shape, (), "loss must be a scalar")
        if not self.requires_grad:
            raise RuntimeError("backward: loss does not require a gradient")

        order = self._topological_order()
        pending: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}

        for node in reversed(order):
            grad = pending.pop(id(node), None)
            if grad is None:
                continue
            if node.creator is None:
                node._accumulate(grad)
                continue
            node.grad = grad
            input_grads = node.creator.backward(grad)
            for parent, parent_grad in zip(node.creator.tensors, input_grads):
                if parent_grad is None or not parent.requires_grad:
                    continue
                if parent_grad.shape != parent.shape:
                    raise ShapeError(f"{node.creator.name}.backward", parent_grad.shape, parent.shape)
                key = id(parent)
                pending[key] = pending[key] + parent_grad if key in pending else parent_grad

    # Operator sugar; the rules live in src.engine.functional
    def __add__(self, other):
        from src.engine import functional as F
        return F.add(self, other)

    def __radd__(self, other):
        from src.engine import functional as F
        return F.add(other, self)

    def __sub__(self, other):
        from src.engine import functional as F
        return F.sub(self, other)

    def __rsub__(self, other):
        from src.engine import functional as F
        return F.sub(other, self)

    def __mul__(self, other):
        from src.engine import functional as F
        return F.mul(self, other)

    def __rmul__(self, other):
        from src.engine import functional as F
        return F.mul(other, self)

    def __truediv__(self, other):
        from src.engine import functional as F
        return F.div(self, other)

    def __rtruediv__(self, other):
        from src.engine import functional as F
        return F.div(other, self)

    def __neg__(self):
        from src.engine import functional as F
        return F.mul(self, -1.0)

    def __matmul__(self, other):
        from src.engine import functional as F
        return F.matmul(self, other)

    def __getitem__(self, key):
        from src.engine import functional as F
        return F.slice_(self, key)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        from src.engine import functional as F
        return F.sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        from src.engine import functional as F
        return F.mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        from src.engine import functional as F
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return F.reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        from src.engine import functional as F
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return F.transpose(self, axes)

    def exp(self) -> "Tensor":
        from src.engine import functional as F
        return F.exp(self)

    def abs(self) -> "Tensor":
        from src.engine import functional as F
        return F.abs_(self)

    def square(self) -> "Tensor":
        from src.engine import functional as F
        return F.square(self)
