"""
Differentiable operations over `Tensor`.

Layouts: image-like tensors are (N, C, H, W); pair/feature tables are (M, F).
Broadcasting follows numpy for the elementwise ops and is summed back out in
their backward rules; every other op checks its shapes and raises `ShapeError`.
"""

import logging
from typing import Optional, Sequence, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

from src.engine.tensor import ArrayLike, Function, Tensor, as_tensor
from src.errors import ShapeError

logger = logging.getLogger(__name__)

Operand = Union[Tensor, ArrayLike]

_SQRT_2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def unbroadcast(grad: np.ndarray, to_shape: tuple[int, ...]) -> np.ndarray:
    """Sum out broadcast dimensions so that `grad` matches `to_shape`."""
    if grad.shape == to_shape:
        return grad
    while grad.ndim > len(to_shape):
        grad = grad.sum(axis=0)
    for dim, extent in enumerate(to_shape):
        if extent == 1 and grad.shape[dim] != 1:
            grad = grad.sum(axis=dim, keepdims=True)
    return grad


def _check_broadcast(op: str, a: np.ndarray, b: np.ndarray) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# ---------------------------------------------------------------- elementwise

class Add(Function):
    def forward(self, a, b):
        _check_broadcast("add", a, b)
        self.shapes = (a.shape, b.shape)
        return a + b

    def backward(self, grad):
        return unbroadcast(grad, self.shapes[0]), unbroadcast(grad, self.shapes[1])


class Mul(Function):
    def forward(self, a, b):
        _check_broadcast("mul", a, b)
        self.a, self.b = a, b
        return a * b

    def backward(self, grad):
        return unbroadcast(grad * self.b, self.a.shape), unbroadcast(grad * self.a, self.b.shape)


class Div(Function):
    def forward(self, a, b):
        _check_broadcast("div", a, b)
        self.a, self.b = a, b
        return a / b

    def backward(self, grad):
        grad_a = grad / self.b
        grad_b = -grad * self.a / (self.b * self.b)
        return unbroadcast(grad_a, self.a.shape), unbroadcast(grad_b, self.b.shape)


class Exp(Function):
    def forward(self, x):
        self.out = np.exp(x)
        return self.out

    def backward(self, grad):
        return (grad * self.out,)


class Abs(Function):
    def forward(self, x):
        self.sign = np.sign(x)
        return np.abs(x)

    def backward(self, grad):
        return (grad * self.sign,)


class Square(Function):
    def forward(self, x):
        self.x = x
        return x * x

    def backward(self, grad):
        return (2.0 * self.x * grad,)


class Sigmoid(Function):
    def forward(self, x):
        out = np.empty_like(x)
        positive = x >= 0
        out[positive] = 1.0 / (1.0 + np.exp(-x[positive]))
        expx = np.exp(x[~positive])
        out[~positive] = expx / (1.0 + expx)
        self.out = out
        return out

    def backward(self, grad):
        return (grad * self.out * (1.0 - self.out),)


class Gelu(Function):
    """Exact GeLU, x * Phi(x)."""

    def forward(self, x):
        self.x = x
        self.cdf = 0.5 * (1.0 + erf(x / _SQRT_2))
        return x * self.cdf

    def backward(self, grad):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * self.x * self.x)
        return (grad * (self.cdf + self.x * pdf),)


class Clip(Function):
    """
    Clamp into [low, high]; the gradient passes on the closed interval.

    With `straight_through_low` it also passes below `low`, so a clamped
    parameter can still be pulled back into range.
    """

    def forward(self, x, low: float = 0.0, high: float = 1.0, straight_through_low: bool = False):
        self.inside = (x <= high) if straight_through_low else (x >= low) & (x <= high)
        return np.clip(x, low, high)

    def backward(self, grad):
        return (grad * self.inside,)


# ------------------------------------------------------------------ reductions

def _normalize_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


class Sum(Function):
    def forward(self, x, axis=None, keepdims: bool = False):
        self.shape = x.shape
        self.axes = _normalize_axes(axis, x.ndim)
        self.keepdims = keepdims
        return np.asarray(x.sum(axis=self.axes, keepdims=keepdims))

    def backward(self, grad):
        if not self.keepdims:
            grad = np.expand_dims(grad, self.axes)
        return (np.broadcast_to(grad, self.shape).copy(),)


class Mean(Sum):
    def forward(self, x, axis=None, keepdims: bool = False):
        out = super().forward(x, axis=axis, keepdims=keepdims)
        self.count = int(np.prod([x.shape[a] for a in self.axes])) if x.ndim else 1
        return out / self.count

    def backward(self, grad):
        (full,) = super().backward(grad)
        return (full / self.count,)


class Amax(Function):
    """Maximum along one axis; the gradient goes to the first maximiser."""

    def forward(self, x, axis: int = -1, keepdims: bool = False):
        self.shape = x.shape
        self.axis = axis % x.ndim
        self.keepdims = keepdims
        self.argmax = np.expand_dims(np.argmax(x, axis=self.axis), self.axis)
        out = np.take_along_axis(x, self.argmax, axis=self.axis)
        return out if keepdims else np.squeeze(out, axis=self.axis)

    def backward(self, grad):
        if not self.keepdims:
            grad = np.expand_dims(grad, self.axis)
        full = np.zeros(self.shape)
        np.put_along_axis(full, self.argmax, grad, axis=self.axis)
        return (full,)


# ------------------------------------------------------------------ structural

class MatMul(Function):
    def forward(self, a, b):
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ShapeError("matmul", a.shape, b.shape)
        self.a, self.b = a, b
        return a @ b

    def backward(self, grad):
        return grad @ self.b.T, self.a.T @ grad


class Reshape(Function):
    def forward(self, x, shape=()):
        self.shape = x.shape
        try:
            return x.reshape(shape)
        except ValueError:
            raise ShapeError("reshape", x.shape, shape) from None

    def backward(self, grad):
        return (grad.reshape(self.shape),)


class Transpose(Function):
    def forward(self, x, axes=()):
        if sorted(axes) != list(range(x.ndim)):
            raise ShapeError("transpose", x.shape, axes, "axes must permute all dimensions")
        self.inverse = np.argsort(axes)
        return np.ascontiguousarray(x.transpose(axes))

    def backward(self, grad):
        return (grad.transpose(self.inverse),)


class Slice(Function):
    def forward(self, x, key=None):
        self.shape = x.shape
        self.key = key
        return np.array(x[key], dtype=np.float64, copy=True)

    def backward(self, grad):
        full = np.zeros(self.shape)
        key = self.key if isinstance(self.key, tuple) else (self.key,)
        if all(k is None or k is Ellipsis or isinstance(k, (slice, int)) for k in key):
            full[self.key] += grad
        else:
            np.add.at(full, self.key, grad)
        return (full,)


class Concat(Function):
    def forward(self, *arrays, axis: int = 0):
        reference = arrays[0]
        axis = axis % reference.ndim
        for other in arrays[1:]:
            if other.ndim != reference.ndim or any(
                    other.shape[d] != reference.shape[d] for d in range(reference.ndim) if d != axis):
                raise ShapeError("concat", reference.shape, other.shape, f"axis={axis}")
        self.axis = axis
        self.splits = np.cumsum([a.shape[axis] for a in arrays])[:-1]
        return np.concatenate(arrays, axis=axis)

    def backward(self, grad):
        return tuple(np.split(grad, self.splits, axis=self.axis))


class Gather(Function):
    """Rows of `x` picked by an integer index array of any shape."""

    def forward(self, x, index=None):
        index = np.asarray(index, dtype=np.int64)
        if index.size and (index.min() < 0 or index.max() >= x.shape[0]):
            raise ShapeError("gather", x.shape, index.shape, "index out of range")
        self.shape = x.shape
        self.index = index
        return x[index]

    def backward(self, grad):
        full = np.zeros(self.shape)
        np.add.at(full, self.index, grad)
        return (full,)


class ScatterAdd(Function):
    """Sum rows of `x` into `size` output rows selected by `index`."""

    def forward(self, x, index=None, size: int = 0):
        index = np.asarray(index, dtype=np.int64)
        if x.shape[:index.ndim] != index.shape:
            raise ShapeError("scatter_add", x.shape, index.shape)
        self.index = index
        out = np.zeros((size,) + x.shape[index.ndim:])
        np.add.at(out, index, x)
        return out

    def backward(self, grad):
        return (grad[self.index],)


class Softmax(Function):
    """Softmax along `axis`; entries with a False mask get zero probability."""

    def forward(self, x, axis: int = -1, mask: Optional[np.ndarray] = None):
        self.axis = axis
        if mask is not None:
            mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
            if not np.all(mask.any(axis=axis)):
                raise ShapeError("softmax", x.shape, mask.shape, "a softmax group is fully masked")
            x = np.where(mask, x, -np.inf)
        shifted = x - np.max(x, axis=axis, keepdims=True)
        e = np.exp(shifted)
        self.out = e / e.sum(axis=axis, keepdims=True)
        return self.out

    def backward(self, grad):
        inner = (grad * self.out).sum(axis=self.axis, keepdims=True)
        return (self.out * (grad - inner),)


# ------------------------------------------------------------- dense layers

class Linear(Function):
    def forward(self, x, weight, bias=None):
        if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
            raise ShapeError("linear", x.shape, weight.shape)
        self.x, self.weight = x, weight
        out = x @ weight
        return out + bias if bias is not None else out

    def backward(self, grad):
        grads = [grad @ self.weight.T, self.x.T @ grad]
        if len(self.tensors) == 3:
            grads.append(grad.sum(axis=0))
        return tuple(grads)


class BatchNorm(Function):
    """
    Per-channel normalization over every axis except axis 1.

    Training mode normalizes with batch statistics and updates the running
    estimates in place; evaluation mode uses the running estimates.
    """

    def forward(self, x, gamma, beta, running_mean=None, running_var=None,
                training: bool = True, momentum: float = 0.1, eps: float = 1e-5):
        if x.ndim < 2 or x.shape[1] != gamma.shape[0]:
            raise ShapeError("batch_norm", x.shape, gamma.shape)
        self.axes = (0,) + tuple(range(2, x.ndim))
        view = [1] * x.ndim
        view[1] = x.shape[1]
        self.view = tuple(view)
        self.training = training
        if training:
            mean = x.mean(axis=self.axes)
            var = x.var(axis=self.axes)
            count = x.size // x.shape[1]
            if running_mean is not None:
                unbiased = var * count / (count - 1) if count > 1 else var
                running_mean *= 1.0 - momentum
                running_mean += momentum * mean
                running_var *= 1.0 - momentum
                running_var += momentum * unbiased
        else:
            mean, var = running_mean, running_var
        self.inv_std = (1.0 / np.sqrt(var + eps)).reshape(self.view)
        self.xhat = (x - mean.reshape(self.view)) * self.inv_std
        self.gamma = gamma.reshape(self.view)
        return self.xhat * self.gamma + beta.reshape(self.view)

    def backward(self, grad):
        grad_gamma = (grad * self.xhat).sum(axis=self.axes)
        grad_beta = grad.sum(axis=self.axes)
        grad_xhat = grad * self.gamma
        if not self.training:
            return grad_xhat * self.inv_std, grad_gamma, grad_beta
        mean_g = grad_xhat.mean(axis=self.axes, keepdims=True)
        mean_gx = (grad_xhat * self.xhat).mean(axis=self.axes, keepdims=True)
        grad_x = self.inv_std * (grad_xhat - mean_g - self.xhat * mean_gx)
        return grad_x, grad_gamma, grad_beta


def _conv_windows(padded: np.ndarray, k: int, stride: int, out_h: int, out_w: int) -> np.ndarray:
    windows = sliding_window_view(padded, (k, k), axis=(2, 3))
    return windows[:, :, ::stride, ::stride][:, :, :out_h, :out_w]


class Conv2d(Function):
    """Cross-correlation, input (N, C, H, W), weight (O, C, k, k), odd k."""

    def forward(self, x, weight, bias=None, stride: int = 1, padding: int = 0):
        if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
            raise ShapeError("conv2d", x.shape, weight.shape)
        k = weight.shape[2]
        if k % 2 == 0 or weight.shape[3] != k:
            raise ShapeError("conv2d", x.shape, weight.shape, "kernel must be square and odd")
        n, c, h, w = x.shape
        out_h = (h + 2 * padding - k) // stride + 1
        out_w = (w + 2 * padding - k) // stride + 1
        if out_h < 1 or out_w < 1:
            raise ShapeError("conv2d", x.shape, weight.shape, "input smaller than kernel")
        padded = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
        self.windows = _conv_windows(padded, k, stride, out_h, out_w)
        self.weight = weight
        self.padded_shape = padded.shape
        self.geometry = (k, stride, padding, h, w, out_h, out_w)
        out = np.einsum("nchwij,ocij->nohw", self.windows, weight, optimize=True)
        if bias is not None:
            out = out + bias.reshape(1, -1, 1, 1)
        return out

    def backward(self, grad):
        k, stride, padding, h, w, out_h, out_w = self.geometry
        grad_weight = np.einsum("nchwij,nohw->ocij", self.windows, grad, optimize=True)
        columns = np.einsum("nohw,ocij->nchwij", grad, self.weight, optimize=True)
        grad_padded = np.zeros(self.padded_shape)
        for i in range(k):
            for j in range(k):
                grad_padded[:, :, i:i + stride * out_h:stride, j:j + stride * out_w:stride] += columns[..., i, j]
        grad_x = grad_padded[:, :, padding:padding + h, padding:padding + w]
        grads = [grad_x, grad_weight]
        if len(self.tensors) == 3:
            grads.append(grad.sum(axis=(0, 2, 3)))
        return tuple(grads)


class Deconv2d(Function):
    """Transposed convolution, input (N, C, H, W), weight (C, O, k, k)."""

    def forward(self, x, weight, bias=None, stride: int = 2, padding: int = 0):
        if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[0]:
            raise ShapeError("deconv2d", x.shape, weight.shape)
        k = weight.shape[2]
        n, c, h, w = x.shape
        full_h, full_w = (h - 1) * stride + k, (w - 1) * stride + k
        if full_h - 2 * padding < 1 or full_w - 2 * padding < 1:
            raise ShapeError("deconv2d", x.shape, weight.shape, "padding larger than output")
        columns = np.einsum("nchw,coij->nohwij", x, weight, optimize=True)
        full = np.zeros((n, weight.shape[1], full_h, full_w))
        for i in range(k):
            for j in range(k):
                full[:, :, i:i + stride * h:stride, j:j + stride * w:stride] += columns[..., i, j]
        self.x, self.weight = x, weight
        self.geometry = (k, stride, padding, h, w, full_h, full_w)
        out = full[:, :, padding:full_h - padding, padding:full_w - padding]
        if bias is not None:
            out = out + bias.reshape(1, -1, 1, 1)
        return np.ascontiguousarray(out)

    def backward(self, grad):
        k, stride, padding, h, w, full_h, full_w = self.geometry
        grad_full = np.zeros(grad.shape[:2] + (full_h, full_w))
        grad_full[:, :, padding:full_h - padding, padding:full_w - padding] = grad
        columns = np.empty(grad.shape[:2] + (h, w, k, k))
        for i in range(k):
            for j in range(k):
                columns[..., i, j] = grad_full[:, :, i:i + stride * h:stride, j:j + stride * w:stride]
        grad_x = np.einsum("nohwij,coij->nchw", columns, self.weight, optimize=True)
        grad_weight = np.einsum("nchw,nohwij->coij", self.x, columns, optimize=True)
        grads = [grad_x, grad_weight]
        if len(self.tensors) == 3:
            grads.append(grad.sum(axis=(0, 2, 3)))
        return tuple(grads)


def bilinear_matrix(size: int, factor: int) -> np.ndarray:
    """(size*factor, size) interpolation matrix, half-pixel centers, edge clamped."""
    target = np.arange(size * factor)
    source = np.clip((target + 0.5) / factor - 0.5, 0.0, size - 1)
    low = np.floor(source).astype(np.int64)
    high = np.minimum(low + 1, size - 1)
    frac = source - low
    matrix = np.zeros((size * factor, size))
    np.add.at(matrix, (target, low), 1.0 - frac)
    np.add.at(matrix, (target, high), frac)
    return matrix


class BilinearUpsample(Function):
    def forward(self, x, factor: int = 2):
        if x.ndim != 4 or factor < 1:
            raise ShapeError("bilinear_upsample", x.shape, (factor,))
        self.rows = bilinear_matrix(x.shape[2], factor)
        self.cols = bilinear_matrix(x.shape[3], factor)
        return np.einsum("ph,nchw,qw->ncpq", self.rows, x, self.cols, optimize=True)

    def backward(self, grad):
        return (np.einsum("ph,ncpq,qw->nchw", self.rows, grad, self.cols, optimize=True),)


class Unfold(Function):
    """(N, C, H, W) -> (N, C, k*k, H, W) zero-padded k x k neighbourhoods, row-major."""

    def forward(self, x, k: int = 3):
        if x.ndim != 4 or k % 2 == 0:
            raise ShapeError("unfold", x.shape, (k, k), "kernel must be odd")
        r = k // 2
        n, c, h, w = x.shape
        padded = np.pad(x, ((0, 0), (0, 0), (r, r), (r, r)))
        self.geometry = (k, r, h, w, padded.shape)
        out = np.empty((n, c, k * k, h, w))
        for i in range(k):
            for j in range(k):
                out[:, :, i * k + j] = padded[:, :, i:i + h, j:j + w]
        return out

    def backward(self, grad):
        k, r, h, w, padded_shape = self.geometry
        grad_padded = np.zeros(padded_shape)
        for i in range(k):
            for j in range(k):
                grad_padded[:, :, i:i + h, j:j + w] += grad[:, :, i * k + j]
        return (grad_padded[:, :, r:r + h, r:r + w],)


# ----------------------------------------------------------- public wrappers

def add(a: Operand, b: Operand) -> Tensor:
    return Add.apply(as_tensor(a), as_tensor(b))


def sub(a: Operand, b: Operand) -> Tensor:
    return Add.apply(as_tensor(a), Mul.apply(as_tensor(b), Tensor(-1.0)))


def mul(a: Operand, b: Operand) -> Tensor:
    return Mul.apply(as_tensor(a), as_tensor(b))


def div(a: Operand, b: Operand) -> Tensor:
    return Div.apply(as_tensor(a), as_tensor(b))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    return MatMul.apply(a, b)


def exp(x: Tensor) -> Tensor:
    return Exp.apply(x)


def abs_(x: Tensor) -> Tensor:
    return Abs.apply(x)


def square(x: Tensor) -> Tensor:
    return Square.apply(x)


def sigmoid(x: Tensor) -> Tensor:
    return Sigmoid.apply(x)


def gelu(x: Tensor) -> Tensor:
    return Gelu.apply(x)


def clip(x: Tensor, low: float, high: float, straight_through_low: bool = False) -> Tensor:
    return Clip.apply(x, low=low, high=high, straight_through_low=straight_through_low)


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    return Sum.apply(x, axis=axis, keepdims=keepdims)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    return Mean.apply(x, axis=axis, keepdims=keepdims)


def amax(x: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    return Amax.apply(x, axis=axis, keepdims=keepdims)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    return Reshape.apply(x, shape=tuple(shape))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    return Transpose.apply(x, axes=tuple(axes))


def slice_(x: Tensor, key) -> Tensor:
    return Slice.apply(x, key=key)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    return Concat.apply(*tensors, axis=axis)


def gather(x: Tensor, index: np.ndarray) -> Tensor:
    return Gather.apply(x, index=index)


def scatter_add(x: Tensor, index: np.ndarray, size: int) -> Tensor:
    return ScatterAdd.apply(x, index=index, size=size)


def softmax(x: Tensor, axis: int = -1, mask: Optional[np.ndarray] = None) -> Tensor:
    return Softmax.apply(x, axis=axis, mask=mask)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    tensors = (x, weight) if bias is None else (x, weight, bias)
    return Linear.apply(*tensors)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor,
               running_mean: Optional[np.ndarray] = None, running_var: Optional[np.ndarray] = None,
               training: bool = True, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    return BatchNorm.apply(x, gamma, beta, running_mean=running_mean, running_var=running_var,
                           training=training, momentum=momentum, eps=eps)


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    tensors = (x, weight) if bias is None else (x, weight, bias)
    return Conv2d.apply(*tensors, stride=stride, padding=padding)


def deconv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
             stride: int = 2, padding: int = 0) -> Tensor:
    tensors = (x, weight) if bias is None else (x, weight, bias)
    return Deconv2d.apply(*tensors, stride=stride, padding=padding)


def bilinear_upsample(x: Tensor, factor: int) -> Tensor:
    if factor == 1:
        return x
    return BilinearUpsample.apply(x, factor=factor)


def unfold(x: Tensor, k: int) -> Tensor:
    return Unfold.apply(x, k=k)
