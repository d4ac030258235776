"""Differentiable operations.

Each operation is a `Function` subclass, with a lower-case helper that calls `Function.apply`. The helpers
are what the rest of the package uses.
"""

import typing

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import special

from ..exceptions import (
    DegenerateStatisticsError,
    InvalidArgumentError,
    NumericalDomainError,
    ShapeMismatchError,
)
from .tensor import ArrayLike, Function, Tensor, check_broadcast

__all__ = (
    "DIVISION_EPSILON",
    "add",
    "batch_norm",
    "bilinear_sample",
    "concat",
    "conv2d",
    "cross",
    "div",
    "elementwise",
    "exp",
    "flip",
    "getitem",
    "leaky_relu",
    "log",
    "matmul",
    "mean",
    "mul",
    "neg",
    "norm",
    "power",
    "relu",
    "reshape",
    "scatter_rows",
    "sigmoid",
    "softmax",
    "softplus",
    "sqrt",
    "stack",
    "sub",
    "sum",
    "tanh",
    "transpose",
    "upsample_nearest",
)

DIVISION_EPSILON = 1e-12


# Element-wise binary operations
class Add(Function):
    def forward(self, a, b):
        check_broadcast(a, b)
        return a + b

    def backward(self, grad):
        return grad, grad


class Sub(Function):
    def forward(self, a, b):
        check_broadcast(a, b)
        return a - b

    def backward(self, grad):
        return grad, -grad


class Mul(Function):
    def forward(self, a, b):
        check_broadcast(a, b)
        self.a, self.b = a, b
        return a * b

    def backward(self, grad):
        return grad * self.b, grad * self.a


class Div(Function):
    def forward(self, a, b):
        check_broadcast(a, b)
        if np.any(np.abs(b) < DIVISION_EPSILON):
            raise NumericalDomainError(f"Division by a value with magnitude below {DIVISION_EPSILON}")
        self.a, self.b = a, b
        return a / b

    def backward(self, grad):
        grad_a = grad / self.b
        grad_b = -grad * self.a / (self.b * self.b) if self.needs_input_grad[1] else None
        return grad_a, grad_b


class Pow(Function):
    def forward(self, a, b):
        check_broadcast(a, b)
        self.a, self.b = a, b
        self.out = np.power(a, b)
        return self.out

    def backward(self, grad):
        grad_a = grad * self.b * np.power(self.a, self.b - 1)
        grad_b = None
        if self.needs_input_grad[1]:
            if np.any(self.a <= 0):
                raise NumericalDomainError("Gradient of the exponent requires a strictly positive base")
            grad_b = grad * self.out * np.log(self.a)
        return grad_a, grad_b


class Neg(Function):
    def forward(self, a):
        return -a

    def backward(self, grad):
        return (-grad,)


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    return Add.apply(a, b)


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    return Sub.apply(a, b)


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    return Mul.apply(a, b)


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Divides ``a`` by ``b``.

    :raises NumericalDomainError: any divisor has magnitude below `DIVISION_EPSILON`.
    """
    return Div.apply(a, b)


def power(a: ArrayLike, b: ArrayLike) -> Tensor:
    return Pow.apply(a, b)


def neg(a: ArrayLike) -> Tensor:
    return Neg.apply(a)


_ELEMENTWISE = {"add": Add, "sub": Sub, "mul": Mul, "div": Div, "pow": Pow}


def elementwise(kind: str, a: ArrayLike, b: ArrayLike) -> Tensor:
    """Applies the named binary operation with numpy broadcasting.

    :param kind: One of ``add``, ``sub``, ``mul``, ``div`` or ``pow``.
    :raises ShapeMismatchError: the shapes do not broadcast.
    """
    try:
        fn = _ELEMENTWISE[kind]
    except KeyError:
        raise InvalidArgumentError(f"Unknown element-wise operation {kind!r}") from None
    return fn.apply(a, b)


# Linear algebra
class MatMul(Function):
    def forward(self, a, b):
        if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
            raise ShapeMismatchError(shapes=(a.shape, b.shape))
        try:
            np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
        except ValueError as e:
            raise ShapeMismatchError(shapes=(a.shape, b.shape)) from e
        self.a, self.b = a, b
        return np.matmul(a, b)

    def backward(self, grad):
        grad_a = np.matmul(grad, np.swapaxes(self.b, -1, -2)) if self.needs_input_grad[0] else None
        grad_b = np.matmul(np.swapaxes(self.a, -1, -2), grad) if self.needs_input_grad[1] else None
        return grad_a, grad_b


def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Batched matrix product over the last two axes; leading axes broadcast."""
    return MatMul.apply(a, b)


class Cross(Function):
    def forward(self, a, b):
        if a.shape[-1] != 3 or b.shape[-1] != 3:
            raise ShapeMismatchError(shapes=(a.shape, b.shape))
        self.a, self.b = a, b
        return np.cross(a, b)

    def backward(self, grad):
        return np.cross(self.b, grad), np.cross(grad, self.a)


def cross(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Cross product along the last axis."""
    return Cross.apply(a, b)


class Conv2d(Function):
    def forward(self, x, weight, bias=None, *, stride: int = 1, padding: int = 0):
        if stride < 1:
            raise InvalidArgumentError(f"Convolution stride must be positive, got {stride}")
        if padding < 0:
            raise InvalidArgumentError(f"Convolution padding must be non-negative, got {padding}")
        if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
            raise ShapeMismatchError(shapes=(x.shape, weight.shape))
        kh, kw = weight.shape[2:]
        padded = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
        if kh > padded.shape[2] or kw > padded.shape[3]:
            raise ShapeMismatchError(
                f"Kernel {weight.shape[2:]} is larger than the padded input {padded.shape[2:]}",
                shapes=(x.shape, weight.shape),
            )
        windows = sliding_window_view(padded, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
        self.padded_shape = padded.shape
        self.windows = windows
        self.weight = weight
        self.stride = stride
        self.padding = padding
        self.has_bias = bias is not None
        # (b, c, h', w', kh, kw) x (o, c, kh, kw) -> (b, h', w', o)
        out = np.tensordot(windows, weight, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
        if bias is not None:
            out = out + bias.reshape(1, -1, 1, 1)
        return np.ascontiguousarray(out)

    def backward(self, grad):
        grad_x = grad_w = grad_b = None
        if self.needs_input_grad[1]:
            grad_w = np.tensordot(grad, self.windows, axes=([0, 2, 3], [0, 2, 3]))
        if self.has_bias and self.needs_input_grad[2]:
            grad_b = grad.sum(axis=(0, 2, 3))
        if self.needs_input_grad[0]:
            s = self.stride
            kh, kw = self.weight.shape[2:]
            oh, ow = grad.shape[2:]
            grad_padded = np.zeros(self.padded_shape, dtype=grad.dtype)
            for i in range(kh):
                for j in range(kw):
                    contrib = np.tensordot(grad, self.weight[:, :, i, j], axes=([1], [0])).transpose(0, 3, 1, 2)
                    grad_padded[:, :, i : i + s * oh : s, j : j + s * ow : s] += contrib
            p = self.padding
            h, w = self.padded_shape[2] - 2 * p, self.padded_shape[3] - 2 * p
            grad_x = grad_padded[:, :, p : p + h, p : p + w]
        if self.has_bias:
            return grad_x, grad_w, grad_b
        return grad_x, grad_w


def conv2d(
    x: ArrayLike, weight: ArrayLike, bias: typing.Optional[ArrayLike] = None, *, stride: int = 1, padding: int = 0
) -> Tensor:
    """2D cross-correlation over ``(batch, channels, height, width)`` inputs with zero padding.

    :param x: Input of shape ``(B, C_in, H, W)``.
    :param weight: Kernel of shape ``(C_out, C_in, KH, KW)``.
    :param bias: Optional bias of shape ``(C_out,)``.
    :param stride: Positive stride applied to both spatial axes.
    :param padding: Zero padding applied to every spatial border.
    :returns: Output of shape ``(B, C_out, (H + 2p - KH) // s + 1, (W + 2p - KW) // s + 1)``.
    """
    if bias is None:
        return Conv2d.apply(x, weight, stride=stride, padding=padding)
    return Conv2d.apply(x, weight, bias, stride=stride, padding=padding)


# Activations and unary maths
class ReLU(Function):
    def forward(self, x):
        self.mask = x > 0
        return np.where(self.mask, x, 0).astype(x.dtype, copy=False)

    def backward(self, grad):
        return (grad * self.mask,)


class LeakyReLU(Function):
    def forward(self, x, *, slope: float = 0.2):
        self.scale = np.where(x > 0, 1.0, slope).astype(x.dtype)
        return x * self.scale

    def backward(self, grad):
        return (grad * self.scale,)


class Tanh(Function):
    def forward(self, x):
        self.out = np.tanh(x)
        return self.out

    def backward(self, grad):
        return (grad * (1 - self.out * self.out),)


class Sigmoid(Function):
    def forward(self, x):
        self.out = special.expit(x)
        return self.out

    def backward(self, grad):
        return (grad * self.out * (1 - self.out),)


class Softplus(Function):
    def forward(self, x):
        self.x = x
        return np.logaddexp(0, x).astype(x.dtype, copy=False)

    def backward(self, grad):
        return (grad * special.expit(self.x),)


class Softmax(Function):
    def forward(self, x, *, axis: int = -1):
        shifted = x - x.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        self.out = e / e.sum(axis=axis, keepdims=True)
        self.axis = axis
        return self.out

    def backward(self, grad):
        dot = (grad * self.out).sum(axis=self.axis, keepdims=True)
        return (self.out * (grad - dot),)


class Exp(Function):
    def forward(self, x):
        self.out = np.exp(x)
        return self.out

    def backward(self, grad):
        return (grad * self.out,)


class Log(Function):
    def forward(self, x):
        if np.any(x <= 0):
            raise NumericalDomainError("Logarithm of a non-positive value")
        self.x = x
        return np.log(x)

    def backward(self, grad):
        return (grad / self.x,)


class Sqrt(Function):
    def forward(self, x):
        if np.any(x < 0):
            raise NumericalDomainError("Square root of a negative value")
        self.out = np.sqrt(x)
        return self.out

    def backward(self, grad):
        safe = np.where(self.out > 0, self.out, 1)
        return (np.where(self.out > 0, grad * 0.5 / safe, 0),)


class Norm(Function):
    def forward(self, x):
        self.x = x
        self.out = np.sqrt(np.sum(x * x))
        return self.out

    def backward(self, grad):
        if self.out == 0:
            # subgradient at the origin
            return (np.zeros_like(self.x),)
        return (grad * self.x / self.out,)


def relu(x: ArrayLike) -> Tensor:
    return ReLU.apply(x)


def leaky_relu(x: ArrayLike, slope: float = 0.2) -> Tensor:
    return LeakyReLU.apply(x, slope=slope)


def tanh(x: ArrayLike) -> Tensor:
    return Tanh.apply(x)


def sigmoid(x: ArrayLike) -> Tensor:
    return Sigmoid.apply(x)


def softplus(x: ArrayLike) -> Tensor:
    """``log(1 + exp(x))``, evaluated stably."""
    return Softplus.apply(x)


def softmax(x: ArrayLike, axis: int = -1) -> Tensor:
    """Softmax along ``axis``. Each slice along that axis sums to 1."""
    return Softmax.apply(x, axis=axis)


def exp(x: ArrayLike) -> Tensor:
    return Exp.apply(x)


def log(x: ArrayLike) -> Tensor:
    return Log.apply(x)


def sqrt(x: ArrayLike) -> Tensor:
    return Sqrt.apply(x)


def norm(x: ArrayLike) -> Tensor:
    """Euclidean norm over every element. The gradient at the origin is taken to be zero."""
    return Norm.apply(x)


# Reductions and shape manipulation
def _normalise_axes(axis, ndim: int) -> typing.Tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


class Sum(Function):
    def forward(self, x, *, axis=None, keepdims: bool = False):
        self.shape = x.shape
        self.axes = _normalise_axes(axis, x.ndim)
        self.keepdims = keepdims
        return np.asarray(x.sum(axis=self.axes, keepdims=keepdims))

    def backward(self, grad):
        if not self.keepdims:
            grad = np.expand_dims(grad, self.axes)
        return (np.broadcast_to(grad, self.shape).copy(),)


class Mean(Sum):
    def forward(self, x, *, axis=None, keepdims: bool = False):
        total = super().forward(x, axis=axis, keepdims=keepdims)
        self.count = int(np.prod([x.shape[a] for a in self.axes])) if x.ndim else 1
        return np.asarray(total / max(self.count, 1), dtype=x.dtype)

    def backward(self, grad):
        (full,) = super().backward(grad)
        return (full / max(self.count, 1),)


class Reshape(Function):
    def forward(self, x, *, shape):
        self.shape = x.shape
        return x.reshape(shape)

    def backward(self, grad):
        return (grad.reshape(self.shape),)


class Transpose(Function):
    def forward(self, x, *, axes=None):
        self.axes = tuple(axes) if axes is not None else tuple(reversed(range(x.ndim)))
        return np.transpose(x, self.axes)

    def backward(self, grad):
        return (np.transpose(grad, np.argsort(self.axes)),)


class GetItem(Function):
    def forward(self, x, *, index):
        self.shape = x.shape
        self.dtype = x.dtype
        self.index = index
        return np.asarray(x[index])

    def backward(self, grad):
        full = np.zeros(self.shape, dtype=self.dtype)
        np.add.at(full, self.index, grad)
        return (full,)


class Concat(Function):
    def forward(self, *arrays, axis: int = 0):
        self.axis = axis
        self.sizes = [a.shape[axis] for a in arrays]
        try:
            return np.concatenate(arrays, axis=axis)
        except ValueError as e:
            raise ShapeMismatchError(shapes=[a.shape for a in arrays]) from e

    def backward(self, grad):
        return np.split(grad, np.cumsum(self.sizes)[:-1], axis=self.axis)


class Stack(Function):
    def forward(self, *arrays, axis: int = 0):
        self.axis = axis
        try:
            return np.stack(arrays, axis=axis)
        except ValueError as e:
            raise ShapeMismatchError(shapes=[a.shape for a in arrays]) from e

    def backward(self, grad):
        return [np.take(grad, i, axis=self.axis) for i in range(grad.shape[self.axis])]


class Flip(Function):
    def forward(self, x, *, axis: int):
        self.axis = axis
        return np.flip(x, axis=axis).copy()

    def backward(self, grad):
        return (np.flip(grad, axis=self.axis).copy(),)


class ScatterRows(Function):
    def forward(self, values, *, index, size: int):
        self.index = index
        out = np.zeros((size,) + values.shape[1:], dtype=values.dtype)
        np.add.at(out, index, values)
        return out

    def backward(self, grad):
        return (grad[self.index],)


def sum(x: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    return Sum.apply(x, axis=axis, keepdims=keepdims)


def mean(x: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    return Mean.apply(x, axis=axis, keepdims=keepdims)


def reshape(x: ArrayLike, shape: typing.Sequence[int]) -> Tensor:
    return Reshape.apply(x, shape=tuple(shape))


def transpose(x: ArrayLike, axes: typing.Optional[typing.Sequence[int]] = None) -> Tensor:
    return Transpose.apply(x, axes=axes)


def getitem(x: ArrayLike, index) -> Tensor:
    """Basic or advanced indexing. Repeated advanced indices accumulate their gradients."""
    return GetItem.apply(x, index=index)


def concat(tensors: typing.Sequence[ArrayLike], axis: int = 0) -> Tensor:
    return Concat.apply(*tensors, axis=axis)


def stack(tensors: typing.Sequence[ArrayLike], axis: int = 0) -> Tensor:
    return Stack.apply(*tensors, axis=axis)


def flip(x: ArrayLike, axis: int) -> Tensor:
    return Flip.apply(x, axis=axis)


def scatter_rows(values: ArrayLike, index: np.ndarray, size: int) -> Tensor:
    """Places ``values[i]`` at row ``index[i]`` of a zero tensor with ``size`` rows."""
    return ScatterRows.apply(values, index=np.asarray(index), size=size)


# Layers that need their own backward
class BatchNorm(Function):
    def forward(
        self,
        x,
        gamma,
        beta,
        *,
        running_mean: np.ndarray,
        running_var: np.ndarray,
        training: bool,
        momentum: float = 0.1,
        eps: float = 1e-5,
    ):
        if x.ndim not in (2, 4) or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
            raise ShapeMismatchError(shapes=(x.shape, gamma.shape, beta.shape))
        self.axes = (0,) if x.ndim == 2 else (0, 2, 3)
        bshape = (1, -1) if x.ndim == 2 else (1, -1, 1, 1)
        self.training = training
        if training:
            count = int(np.prod([x.shape[a] for a in self.axes]))
            if count < 2:
                raise DegenerateStatisticsError(
                    f"Batch statistics need at least two values per channel, got {count} for input {x.shape}"
                )
            mu = x.mean(axis=self.axes)
            var = x.var(axis=self.axes)
            running_mean *= 1 - momentum
            running_mean += momentum * mu
            running_var *= 1 - momentum
            running_var += momentum * var * count / (count - 1)
            self.count = count
        else:
            mu, var = running_mean, running_var
        self.inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype).reshape(bshape)
        self.x_hat = (x - mu.reshape(bshape)) * self.inv_std
        self.gamma = gamma.reshape(bshape)
        return self.x_hat * self.gamma + beta.reshape(bshape)

    def backward(self, grad):
        grad_gamma = (grad * self.x_hat).sum(axis=self.axes)
        grad_beta = grad.sum(axis=self.axes)
        g = grad * self.gamma
        if self.training:
            n = self.count
            mean_g = g.sum(axis=self.axes, keepdims=True) / n
            mean_gx = (g * self.x_hat).sum(axis=self.axes, keepdims=True) / n
            grad_x = self.inv_std * (g - mean_g - self.x_hat * mean_gx)
        else:
            grad_x = g * self.inv_std
        return grad_x, grad_gamma, grad_beta


def batch_norm(
    x: ArrayLike,
    gamma: ArrayLike,
    beta: ArrayLike,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    *,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Batch normalisation over every axis but the channel axis (1).

    In training mode batch statistics are used and the running statistics are updated in place; in evaluation
    mode the running statistics are used and nothing is updated.

    :raises DegenerateStatisticsError: training mode with fewer than two values per channel.
    """
    return BatchNorm.apply(
        x,
        gamma,
        beta,
        running_mean=running_mean,
        running_var=running_var,
        training=training,
        momentum=momentum,
        eps=eps,
    )


class UpsampleNearest(Function):
    def forward(self, x, *, factor: int = 2):
        if factor < 1:
            raise InvalidArgumentError(f"Upsampling factor must be positive, got {factor}")
        self.factor = factor
        return x.repeat(factor, axis=-2).repeat(factor, axis=-1)

    def backward(self, grad):
        f = self.factor
        *lead, h, w = grad.shape
        return (grad.reshape(*lead, h // f, f, w // f, f).sum(axis=(-3, -1)),)


def upsample_nearest(x: ArrayLike, factor: int = 2) -> Tensor:
    """Nearest-neighbour upsampling of the last two axes by an integer factor."""
    return UpsampleNearest.apply(x, factor=factor)


class BilinearSample(Function):
    def forward(self, texture, uv):
        if texture.ndim != 3 or uv.shape[-1] != 2:
            raise ShapeMismatchError(shapes=(texture.shape, uv.shape))
        channels, height, width = texture.shape
        self.texture = texture
        self.lead = uv.shape[:-1]
        flat = uv.reshape(-1, 2)
        x = flat[:, 0] * width - 0.5
        y_raw = flat[:, 1] * height - 0.5
        y = np.clip(y_raw, 0, height - 1)
        self.clamped = (y_raw < 0) | (y_raw > height - 1)
        x0 = np.floor(x)
        y0 = np.floor(y)
        self.fx = (x - x0).astype(texture.dtype)
        self.fy = (y - y0).astype(texture.dtype)
        self.x0 = x0.astype(np.int64) % width
        self.x1 = (self.x0 + 1) % width
        self.y0 = y0.astype(np.int64)
        self.y1 = np.minimum(self.y0 + 1, height - 1)
        self.t00 = texture[:, self.y0, self.x0]
        self.t01 = texture[:, self.y0, self.x1]
        self.t10 = texture[:, self.y1, self.x0]
        self.t11 = texture[:, self.y1, self.x1]
        fx, fy = self.fx, self.fy
        out = (
            (1 - fx) * (1 - fy) * self.t00 + fx * (1 - fy) * self.t01 + (1 - fx) * fy * self.t10 + fx * fy * self.t11
        )
        return out.T.reshape(*self.lead, channels)

    def backward(self, grad):
        channels, height, width = self.texture.shape
        g = grad.reshape(-1, channels).T
        fx, fy = self.fx, self.fy
        grad_tex = grad_uv = None
        if self.needs_input_grad[0]:
            grad_tex = np.zeros_like(self.texture)
            for yy, xx, weight in (
                (self.y0, self.x0, (1 - fx) * (1 - fy)),
                (self.y0, self.x1, fx * (1 - fy)),
                (self.y1, self.x0, (1 - fx) * fy),
                (self.y1, self.x1, fx * fy),
            ):
                np.add.at(grad_tex, (slice(None), yy, xx), g * weight)
        if self.needs_input_grad[1]:
            du = ((1 - fy) * (self.t01 - self.t00) + fy * (self.t11 - self.t10)) * width
            dv = ((1 - fx) * (self.t10 - self.t00) + fx * (self.t11 - self.t01)) * height
            gu = (g * du).sum(axis=0)
            gv = np.where(self.clamped, 0, (g * dv).sum(axis=0))
            grad_uv = np.stack([gu, gv], axis=-1).reshape(*self.lead, 2)
        return grad_tex, grad_uv


def bilinear_sample(texture: ArrayLike, uv: ArrayLike) -> Tensor:
    """Samples a ``(C, H, W)`` texture at normalised ``(..., 2)`` coordinates.

    Texel ``(i, j)`` has its centre at ``u = (j + 0.5) / W``, ``v = (i + 0.5) / H``. The ``u`` axis wraps
    around, the ``v`` axis is clamped to the edge texels. Differentiable with respect to both the texture and
    the coordinates.

    :returns: Samples of shape ``(..., C)``.
    """
    return BilinearSample.apply(texture, uv)
