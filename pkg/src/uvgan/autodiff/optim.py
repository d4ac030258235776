import logging
import typing

import numpy as np

from ..exceptions import ShapeMismatchError
from .tensor import Tensor

__all__ = ("Adam", "AdamState", "adam_step")

log = logging.getLogger(__name__)


class AdamState:
    """First and second moment estimates for a list of parameters, plus the step counter."""

    def __init__(self, shapes: typing.Sequence[tuple], dtype=np.float64):
        self.m = [np.zeros(s, dtype=dtype) for s in shapes]
        self.v = [np.zeros(s, dtype=dtype) for s in shapes]
        self.t = 0

    def __repr__(self) -> str:
        return f"<AdamState tensors={len(self.m)} t={self.t}>"


def adam_step(
    params: typing.Sequence[np.ndarray],
    grads: typing.Sequence[typing.Optional[np.ndarray]],
    state: AdamState,
    *,
    lr: float = 1e-4,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """Applies one bias-corrected Adam update to ``params`` in place.

    Parameters whose gradient is None are left untouched, but the step counter still advances.

    :raises ShapeMismatchError: a gradient does not match its parameter's shape.
    """
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeMismatchError(
            f"Got {len(params)} parameters, {len(grads)} gradients and {len(state.m)} moment buffers"
        )
    state.t += 1
    t = state.t
    correction1 = 1 - beta1**t
    correction2 = 1 - beta2**t
    for i, (param, grad) in enumerate(zip(params, grads)):
        if grad is None:
            continue
        if grad.shape != param.shape:
            raise ShapeMismatchError(shapes=(param.shape, grad.shape))
        m, v = state.m[i], state.v[i]
        m *= beta1
        m += (1 - beta1) * grad
        v *= beta2
        v += (1 - beta2) * grad * grad
        m_hat = m / correction1
        v_hat = v / correction2
        param -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(param.dtype, copy=False)


class Adam:
    """Adam optimiser over a fixed list of tensors.

    ??? example
        ```py
        optimiser = Adam(model.parameters(), lr=1e-4)
        loss = model(x).sum()
        optimiser.zero_grad()
        backward(loss)
        optimiser.step()
        ```
    """

    def __init__(
        self,
        params: typing.Iterable[Tensor],
        *,
        lr: float = 1e-4,
        betas: typing.Tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
    ):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.state = AdamState([p.shape for p in self.params])
        log.debug("Created Adam optimiser over %d tensors (lr=%s)", len(self.params), lr)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        adam_step(
            [p.data for p in self.params],
            [p.grad for p in self.params],
            self.state,
            lr=self.lr,
            beta1=self.betas[0],
            beta2=self.betas[1],
            eps=self.eps,
        )
