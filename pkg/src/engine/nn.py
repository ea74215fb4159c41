"""
Parameterised layers on top of the functional ops.

Weights are drawn from a caller-supplied `numpy.random.Generator` so that a
model built from a seed is reproducible bit for bit.
"""

import logging
import threading
from abc import ABC, abstractmethod
from contextlib import contextmanager
from typing import Iterator, Optional

import numpy as np

from src.config.settings import settings
from src.engine import functional as F
from src.engine.tensor import Tensor

logger = logging.getLogger(__name__)

_madds_state = threading.local()


@contextmanager
def count_madds() -> Iterator[list[int]]:
    """Collect analytic multiply-add counts of every layer called in the block."""
    counter = [0]
    previous = getattr(_madds_state, "counter", None)
    _madds_state.counter = counter
    try:
        yield counter
    finally:
        _madds_state.counter = previous


def _record_madds(count: int) -> None:
    counter = getattr(_madds_state, "counter", None)
    if counter is not None:
        counter[0] += int(count)


class Parameter(Tensor):
    def __init__(self, data, name: Optional[str] = None):
        super().__init__(data, requires_grad=True, name=name)


def kaiming_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Module(ABC):
    """Base class of layers: parameter traversal, buffers and train/eval mode."""

    def __init__(self):
        self.training = True

    @abstractmethod
    def forward(self, *args, **kwargs):
        pass

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def _children(self) -> Iterator[tuple[str, object]]:
        for name, value in vars(self).items():
            if isinstance(value, (Module, Parameter)):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for index, item in enumerate(value):
                    if isinstance(item, (Module, Parameter)):
                        yield f"{name}.{index}", item
            elif isinstance(value, dict):
                for key in sorted(value):
                    if isinstance(value[key], (Module, Parameter)):
                        yield f"{name}.{key}", value[key]

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, child in self._children():
            full = f"{prefix}{name}"
            if isinstance(child, Parameter):
                yield full, child
            else:
                yield from child.named_parameters(prefix=f"{full}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, buffer in getattr(self, "_buffers", {}).items():
            yield f"{prefix}{name}", buffer
        for name, child in self._children():
            if isinstance(child, Module):
                yield from child.named_buffers(prefix=f"{prefix}{name}.")

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, child in self._children():
            if isinstance(child, Module):
                yield from child.modules()

    def train(self, mode: bool = True) -> "Module":
        for module in self.modules():
            module.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def parameter_count(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters()}
        state.update({name: buffer for name, buffer in self.named_buffers()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        from src.errors import DataError
        targets = {name: p.data for name, p in self.named_parameters()}
        targets.update(dict(self.named_buffers()))
        missing = sorted(set(targets) - set(state))
        if missing:
            raise DataError(f"Checkpoint is missing {len(missing)} tensors, first: {missing[0]}")
        for name, target in targets.items():
            if state[name].shape != target.shape:
                raise DataError(f"Checkpoint tensor {name} has shape {state[name].shape}, expected {target.shape}")
            target[...] = state[name]


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator,
                 zero_init: bool = False):
        super().__init__()
        shape = (in_features, out_features)
        weight = np.zeros(shape) if zero_init else kaiming_uniform(rng, shape, in_features)
        self.weight = Parameter(weight)
        self.bias = Parameter(np.zeros(out_features))

    def forward(self, x: Tensor) -> Tensor:
        _record_madds(x.shape[0] * self.weight.shape[0] * self.weight.shape[1])
        return F.linear(x, self.weight, self.bias)


class Conv2d(Module):
    def __init__(self, in_channels: int, out_channels: int, rng: np.random.Generator,
                 kernel_size: int = 3, stride: int = 1, zero_init: bool = False, bias: bool = True):
        super().__init__()
        shape = (out_channels, in_channels, kernel_size, kernel_size)
        fan_in = in_channels * kernel_size * kernel_size
        weight = np.zeros(shape) if zero_init else kaiming_uniform(rng, shape, fan_in)
        self.weight = Parameter(weight)
        self.bias = Parameter(np.zeros(out_channels)) if bias else None
        self.stride = stride
        self.padding = kernel_size // 2

    def forward(self, x: Tensor) -> Tensor:
        out = F.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)
        o, c, k, _ = self.weight.shape
        _record_madds(k * k * c * o * out.shape[0] * out.shape[2] * out.shape[3])
        return out


class Deconv2d(Module):
    """Stride-2 upsampling by a 2x2 transposed convolution."""

    def __init__(self, in_channels: int, out_channels: int, rng: np.random.Generator, stride: int = 2):
        super().__init__()
        shape = (in_channels, out_channels, stride, stride)
        self.weight = Parameter(kaiming_uniform(rng, shape, in_channels))
        self.bias = Parameter(np.zeros(out_channels))
        self.stride = stride

    def forward(self, x: Tensor) -> Tensor:
        c, o, k, _ = self.weight.shape
        _record_madds(k * k * c * o * x.shape[0] * x.shape[2] * x.shape[3])
        return F.deconv2d(x, self.weight, self.bias, stride=self.stride)


class BatchNorm(Module):
    def __init__(self, num_features: int, eps: float = settings.BN_EPS,
                 momentum: float = settings.BN_MOMENTUM):
        super().__init__()
        self.gamma = Parameter(np.ones(num_features))
        self.beta = Parameter(np.zeros(num_features))
        self._buffers = {
            "running_mean": np.zeros(num_features),
            "running_var": np.ones(num_features),
        }
        self.eps = eps
        self.momentum = momentum

    def forward(self, x: Tensor) -> Tensor:
        return F.batch_norm(
            x, self.gamma, self.beta,
            running_mean=self._buffers["running_mean"],
            running_var=self._buffers["running_var"],
            training=self.training, momentum=self.momentum, eps=self.eps)


class Basic2D(Module):
    """conv3x3 -> batch norm -> GeLU"""

    def __init__(self, in_channels: int, out_channels: int, rng: np.random.Generator,
                 kernel_size: int = 3, stride: int = 1):
        super().__init__()
        self.conv = Conv2d(in_channels, out_channels, rng, kernel_size=kernel_size, stride=stride, bias=False)
        self.bn = BatchNorm(out_channels)

    def forward(self, x: Tensor) -> Tensor:
        return F.gelu(self.bn(self.conv(x)))


class ResBlock(Module):
    """Two conv-BN stages with an identity (or 1x1 projection) shortcut."""

    def __init__(self, in_channels: int, out_channels: int, rng: np.random.Generator, stride: int = 1):
        super().__init__()
        self.conv1 = Conv2d(in_channels, out_channels, rng, stride=stride, bias=False)
        self.bn1 = BatchNorm(out_channels)
        self.conv2 = Conv2d(out_channels, out_channels, rng, bias=False)
        self.bn2 = BatchNorm(out_channels)
        self.shortcut = None
        if stride != 1 or in_channels != out_channels:
            self.shortcut = Conv2d(in_channels, out_channels, rng, kernel_size=1, stride=stride, bias=False)
            self.shortcut_bn = BatchNorm(out_channels)

    def forward(self, x: Tensor) -> Tensor:
        out = F.gelu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        identity = x if self.shortcut is None else self.shortcut_bn(self.shortcut(x))
        return F.gelu(out + identity)
