"""Finite-difference verification of analytic gradients."""

import logging
import typing

import numpy as np

from .tensor import Tensor, backward, no_grad

__all__ = ("gradcheck", "numerical_gradient", "relative_error")

log = logging.getLogger(__name__)


def numerical_gradient(fn: typing.Callable[[], float], array: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of ``fn`` with respect to every element of ``array``.

    ``array`` is perturbed in place, one element at a time, and restored afterwards.
    """
    grad = np.zeros(array.shape, dtype=np.float64)
    it = np.nditer(array, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        original = array[idx].copy()
        array[idx] = original + h
        f_plus = fn()
        array[idx] = original - h
        f_minus = fn()
        array[idx] = original
        grad[idx] = (f_plus - f_minus) / (2 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max-norm relative error, ``max|a - n| / max(max|a|, max|n|)``. Zero when both are zero."""
    scale = max(float(np.max(np.abs(analytic), initial=0.0)), float(np.max(np.abs(numeric), initial=0.0)))
    if scale == 0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric))) / scale


def gradcheck(fn: typing.Callable[[], Tensor], inputs: typing.Sequence[Tensor], *, h: float = 1e-6) -> float:
    """Compares the tape's gradients of ``fn()`` against central differences.

    ``fn`` must rebuild its scalar output from the current values of ``inputs`` each time it is called.
    Use float64 tensors (see `precision`) for meaningful results.

    :returns: The worst `relative_error` over all inputs.
    """
    for t in inputs:
        t.grad = None
    backward(fn())
    analytic = [np.zeros(t.shape) if t.grad is None else t.grad.astype(np.float64) for t in inputs]

    def evaluate() -> float:
        with no_grad():
            return fn().item()

    worst = 0.0
    for tensor, grad in zip(inputs, analytic):
        error = relative_error(grad, numerical_gradient(evaluate, tensor.data, h))
        log.debug("gradcheck %r: relative error %.3g", tensor, error)
        worst = max(worst, error)
    return worst
