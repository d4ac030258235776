"""Core tensor type and the explicit gradient tape.

Every differentiable operation is a `Function` subclass. Calling `Function.apply` runs the forward pass on raw
numpy arrays and, if any input requires a gradient and grad mode is enabled, appends a record to the current
thread's `Tape`. `backward` walks that tape in reverse recording order, so each recorded node is visited exactly
once, after every node that consumed its output.
"""

import contextlib
import logging
import threading
import time
import typing

import numpy as np

from ..exceptions import EmptyTapeError, NonScalarLossError, ShapeMismatchError

__all__ = (
    "Function",
    "Tape",
    "TapeRecord",
    "Tensor",
    "as_tensor",
    "backward",
    "current_tape",
    "default_dtype",
    "grad_enabled",
    "no_grad",
    "precision",
    "set_default_dtype",
    "unbroadcast",
)

log = logging.getLogger(__name__)

ArrayLike = typing.Union["Tensor", np.ndarray, float, int, typing.Sequence]

_DEFAULT_DTYPE = np.dtype(np.float32)
_local = threading.local()


def default_dtype() -> np.dtype:
    """Returns the dtype new tensors are created with when none is given."""
    return _DEFAULT_DTYPE


def set_default_dtype(dtype: typing.Union[np.dtype, type, str]) -> None:
    """Sets the dtype new tensors are created with. Only float32 and float64 are supported."""
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise TypeError(f"Unsupported tensor dtype: {dtype}")
    _DEFAULT_DTYPE = dtype


@contextlib.contextmanager
def precision(dtype: typing.Union[np.dtype, type, str]):
    """Temporarily switches the default dtype.

    ??? example
        ```py
        with precision(np.float64):
            x = Tensor([1.0, 2.0], requires_grad=True)
        ```
    """
    previous = default_dtype()
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


def grad_enabled() -> bool:
    """Whether operations are currently being recorded on the tape."""
    return getattr(_local, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Context manager that disables tape recording in the current thread."""
    previous = grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = previous


def unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sums ``grad`` down to ``shape``, undoing numpy broadcasting."""
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, size in enumerate(shape) if size == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """An n-dimensional array with an optional accumulated gradient.

    :param data: Anything numpy can turn into an array.
    :param requires_grad: Whether gradients should be accumulated into `grad` during backward.
    :param dtype: Override the default dtype (see `precision`).
    :param name: Optional name, used in repr and by checkpoints.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "__weakref__")
    __array_priority__ = 1000

    def __init__(
        self,
        data: ArrayLike,
        requires_grad: bool = False,
        *,
        dtype: typing.Union[np.dtype, type, str, None] = None,
        name: typing.Optional[str] = None,
    ):
        if isinstance(data, Tensor):
            data = data.data
        self.data: np.ndarray = np.array(data, dtype=dtype or default_dtype())
        self.requires_grad = requires_grad
        self.grad: typing.Optional[np.ndarray] = None
        self.name = name

    @classmethod
    def _wrap(cls, array: np.ndarray) -> "Tensor":
        """Wraps an already computed array without copying or casting it."""
        obj = cls.__new__(cls)
        obj.data = np.asarray(array)
        obj.requires_grad = False
        obj.grad = None
        obj.name = None
        return obj

    # introspection
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        """Returns the underlying array. Mutating it bypasses the tape."""
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        """Returns a tensor sharing data with this one, but disconnected from the tape."""
        return Tensor._wrap(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        extra = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad}{extra})"

    # operators are resolved lazily to avoid an import cycle with .ops
    def __add__(self, other):
        from . import ops

        return ops.add(self, other)

    def __radd__(self, other):
        from . import ops

        return ops.add(other, self)

    def __sub__(self, other):
        from . import ops

        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops

        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops

        return ops.mul(self, other)

    def __rmul__(self, other):
        from . import ops

        return ops.mul(other, self)

    def __truediv__(self, other):
        from . import ops

        return ops.div(self, other)

    def __rtruediv__(self, other):
        from . import ops

        return ops.div(other, self)

    def __pow__(self, other):
        from . import ops

        return ops.power(self, other)

    def __neg__(self):
        from . import ops

        return ops.neg(self)

    def __matmul__(self, other):
        from . import ops

        return ops.matmul(self, other)

    def __getitem__(self, index):
        from . import ops

        return ops.getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        from . import ops

        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        from . import ops

        return ops.mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        from . import ops

        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        from . import ops

        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return ops.transpose(self, axes or None)

    @property
    def T(self) -> "Tensor":
        return self.transpose()

    def backward(self, *, retain_tape: bool = False) -> None:
        """Shortcut for ``backward(self)``."""
        backward(self, retain_tape=retain_tape)


def as_tensor(value: ArrayLike) -> Tensor:
    """Returns ``value`` if it is already a tensor, otherwise wraps it as a constant."""
    if isinstance(value, Tensor):
        return value
    if isinstance(value, np.ndarray) and value.dtype.kind == "f":
        return Tensor._wrap(value)
    return Tensor(value)


class Function:
    """Base class for differentiable operations.

    Subclasses implement `forward`, which receives plain numpy arrays (plus keyword options) and returns the
    output array, and `backward`, which receives the gradient of the output and returns one gradient (or None)
    per positional input. Anything `backward` needs should be stashed on ``self`` during `forward`.

    Gradients returned for broadcast inputs are reduced back to the input's shape automatically.
    """

    needs_input_grad: typing.Tuple[bool, ...] = ()

    def forward(self, *arrays: np.ndarray, **options) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> typing.Sequence[typing.Optional[np.ndarray]]:
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs: ArrayLike, **options) -> Tensor:
        tensors = tuple(as_tensor(x) for x in inputs)
        fn = cls()
        fn.needs_input_grad = tuple(t.requires_grad for t in tensors)
        out = Tensor._wrap(fn.forward(*(t.data for t in tensors), **options))
        if grad_enabled() and any(fn.needs_input_grad):
            out.requires_grad = True
            current_tape().record(fn, tensors, out)
        return out

    def __repr__(self) -> str:
        return f"<{self.__class__.__name__}>"


class TapeRecord(typing.NamedTuple):
    function: Function
    inputs: typing.Tuple[Tensor, ...]
    output: Tensor


class Tape:
    """Ordered record of the differentiable operations executed in one thread.

    Tapes are per-thread: `current_tape` returns the tape for the calling thread, and worker threads never
    record onto the main thread's tape.
    """

    def __init__(self):
        self.records: typing.List[TapeRecord] = []

    def __len__(self) -> int:
        return len(self.records)

    def __repr__(self) -> str:
        return f"<Tape records={len(self.records)}>"

    def record(self, function: Function, inputs: typing.Tuple[Tensor, ...], output: Tensor) -> None:
        self.records.append(TapeRecord(function, inputs, output))

    def clear(self) -> None:
        """Drops every record, and with them every saved intermediate."""
        self.records.clear()

    def backward(self, loss: Tensor, *, retain: bool = False) -> None:
        """Propagates the gradient of ``loss`` through every recorded operation.

        :param loss: A single-element tensor produced by an operation on this tape.
        :param retain: Keep the records so backward can be called again. Gradients then accumulate.
        :raises NonScalarLossError: ``loss`` has more than one element.
        :raises EmptyTapeError: nothing has been recorded, or ``loss`` does not depend on anything recorded.
        """
        if loss.size != 1:
            raise NonScalarLossError(f"Backward requires a single-element loss, got shape {loss.shape}")
        if not self.records or not loss.requires_grad:
            raise EmptyTapeError("No differentiable operations lead to this loss")
        start = time.perf_counter()
        pending: typing.Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        touched: typing.Dict[int, typing.Tuple[Tensor, np.ndarray]] = {}
        visited = 0
        for record in reversed(self.records):
            grad = pending.pop(id(record.output), None)
            if grad is None:
                continue
            visited += 1
            touched[id(record.output)] = (record.output, grad)
            input_grads = record.function.backward(grad)
            for tensor, input_grad in zip(record.inputs, input_grads):
                if input_grad is None or not tensor.requires_grad:
                    continue
                input_grad = unbroadcast(np.asarray(input_grad, dtype=tensor.dtype), tensor.shape)
                key = id(tensor)
                if key in pending:
                    pending[key] = pending[key] + input_grad
                else:
                    pending[key] = input_grad
                    touched.setdefault(key, (tensor, input_grad))
        if visited == 0:
            raise EmptyTapeError("The loss was not produced by any operation on the current tape")
        # whatever is still pending belongs to leaves
        for key, grad in pending.items():
            tensor = touched[key][0]
            touched[key] = (tensor, grad)
        for tensor, grad in touched.values():
            tensor.grad = grad.copy() if tensor.grad is None else tensor.grad + grad
        log.debug(
            "Backward visited %d of %d records in %.2fms",
            visited,
            len(self.records),
            (time.perf_counter() - start) * 1000,
        )
        if not retain:
            self.clear()


def current_tape() -> Tape:
    """Returns the calling thread's tape, creating it if needed."""
    tape = getattr(_local, "tape", None)
    if tape is None:
        tape = _local.tape = Tape()
    return tape


def backward(loss: Tensor, *, retain_tape: bool = False) -> None:
    """Backpropagates ``loss`` through the current thread's tape. See `Tape.backward`."""
    current_tape().backward(loss, retain=retain_tape)


def check_broadcast(a: np.ndarray, b: np.ndarray) -> tuple:
    """Returns the broadcast shape of two arrays, or raises `ShapeMismatchError` naming both shapes."""
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as e:
        raise ShapeMismatchError(shapes=(a.shape, b.shape)) from e
