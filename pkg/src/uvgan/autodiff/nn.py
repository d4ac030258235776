import logging
import typing

import numpy as np

from ..exceptions import DivergenceError, ShapeMismatchError
from . import ops
from .tensor import Tensor, default_dtype

__all__ = ("BatchNorm", "Conv2d", "Linear", "Module", "Parameter", "check_finite")

log = logging.getLogger(__name__)


class Parameter(Tensor):
    """A tensor that is trained: it always requires a gradient and is returned by `Module.parameters`."""

    __slots__ = ()

    def __init__(self, data, *, dtype=None, name: typing.Optional[str] = None):
        super().__init__(data, requires_grad=True, dtype=dtype, name=name)


def check_finite(tensor: Tensor, layer: str) -> Tensor:
    """Raises `DivergenceError` naming ``layer`` if ``tensor`` holds NaN or infinite values."""
    if not np.all(np.isfinite(tensor.data)):
        raise DivergenceError(layer=layer)
    return tensor


class Module:
    """Base class for anything holding parameters.

    Parameters are discovered from instance attributes: `Parameter` attributes, child `Module` attributes and
    lists of modules are all walked in attribute definition order. Non-trainable state (running statistics and
    frozen weights) is registered with `register_buffer` so that it is saved with the parameters.
    """

    training: bool = True

    def __init__(self):
        self._buffers: typing.Dict[str, np.ndarray] = {}

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        if "_buffers" not in self.__dict__:
            self._buffers = {}
        self._buffers[name] = value

    def _children(self) -> typing.Iterator[typing.Tuple[str, typing.Any]]:
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            if isinstance(value, (Parameter, Module)):
                yield name, value
            elif isinstance(value, (list, tuple)) and value and all(isinstance(v, Module) for v in value):
                for i, child in enumerate(value):
                    yield f"{name}.{i}", child

    def modules(self) -> typing.Iterator["Module"]:
        yield self
        for _, value in self._children():
            if isinstance(value, Module):
                yield from value.modules()

    def named_parameters(self, prefix: str = "") -> typing.Iterator[typing.Tuple[str, Parameter]]:
        for name, value in self._children():
            if isinstance(value, Parameter):
                yield prefix + name, value
            else:
                yield from value.named_parameters(prefix + name + ".")

    def parameters(self) -> typing.List[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> typing.Iterator[typing.Tuple[str, np.ndarray]]:
        for name, value in getattr(self, "_buffers", {}).items():
            yield prefix + name, value
        for name, value in self._children():
            if isinstance(value, Module):
                yield from value.named_buffers(prefix + name + ".")

    def train(self, mode: bool = True) -> "Module":
        for module in self.modules():
            module.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def state_dict(self) -> typing.Dict[str, np.ndarray]:
        """Returns copies of every parameter and buffer, keyed by dotted path."""
        state = {name: p.data.copy() for name, p in self.named_parameters()}
        state.update({name: b.copy() for name, b in self.named_buffers()})
        return state

    def load_state_dict(self, state: typing.Mapping[str, np.ndarray], *, strict: bool = True) -> None:
        """Copies values from ``state`` into the parameters and buffers in place.

        :param state: Mapping as produced by `state_dict`.
        :param strict: Raise ``KeyError`` if any entry is missing.
        :raises ShapeMismatchError: a stored array has the wrong shape.
        """
        targets = {name: p.data for name, p in self.named_parameters()}
        targets.update(dict(self.named_buffers()))
        for name, target in targets.items():
            if name not in state:
                if strict:
                    raise KeyError(f"Missing entry {name!r} in state dict")
                log.warning("State dict has no entry for %r, leaving it untouched", name)
                continue
            value = np.asarray(state[name])
            if value.shape != target.shape:
                raise ShapeMismatchError(f"Entry {name!r} has the wrong shape", shapes=(value.shape, target.shape))
            target[...] = value

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Linear(Module):
    """Fully connected layer, ``y = x W^T + b``."""

    def __init__(self, in_features: int, out_features: int, *, rng: np.random.Generator, bias: bool = True):
        super().__init__()
        bound = 1 / np.sqrt(in_features)
        self.weight = Parameter(rng.uniform(-bound, bound, (out_features, in_features)))
        self.bias = Parameter(np.zeros(out_features)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        out = ops.matmul(x, ops.transpose(self.weight))
        return out + self.bias if self.bias is not None else out


class Conv2d(Module):
    """2D convolution layer with He-normal initialisation."""

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel_size: int = 3,
        *,
        rng: np.random.Generator,
        stride: int = 1,
        padding: typing.Optional[int] = None,
        bias: bool = True,
        zero_init: bool = False,
        init_scale: float = 1.0,
    ):
        super().__init__()
        shape = (out_channels, in_channels, kernel_size, kernel_size)
        if zero_init:
            weight = np.zeros(shape)
        else:
            std = init_scale * np.sqrt(2.0 / (in_channels * kernel_size * kernel_size))
            weight = rng.normal(0.0, std, shape)
        self.weight = Parameter(weight)
        self.bias = Parameter(np.zeros(out_channels)) if bias else None
        self.stride = stride
        self.padding = kernel_size // 2 if padding is None else padding

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class BatchNorm(Module):
    """Batch normalisation for ``(B, C)`` or ``(B, C, H, W)`` inputs."""

    def __init__(self, channels: int, *, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.gamma = Parameter(np.ones(channels))
        self.beta = Parameter(np.zeros(channels))
        self.register_buffer("running_mean", np.zeros(channels, dtype=default_dtype()))
        self.register_buffer("running_var", np.ones(channels, dtype=default_dtype()))
        self.momentum = momentum
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return ops.batch_norm(
            x,
            self.gamma,
            self.beta,
            self._buffers["running_mean"],
            self._buffers["running_var"],
            training=self.training,
            momentum=self.momentum,
            eps=self.eps,
        )
