"""Attention blocks for the texture generator.

`PositionAttention` computes its attention map from a learnable positional embedding only: which texel attends
to which is a property of the UV layout, not of the features passing through. The map can therefore be
precomputed once the weights are fixed.
"""

import logging
import typing

import numpy as np

from ..autodiff import ops
from ..autodiff.nn import BatchNorm, Conv2d, Module, Parameter
from ..autodiff.tensor import Tensor
from ..exceptions import InvalidArgumentError, ShapeMismatchError

__all__ = ("PositionAttention", "SelfAttention", "attend")

log = logging.getLogger(__name__)

EMBEDDING_STD = 0.02


def _swap_last(x: Tensor) -> Tensor:
    return ops.transpose(x, (*range(x.ndim - 2), x.ndim - 1, x.ndim - 2))


def attend(attention: Tensor, values: Tensor, heads: int) -> Tensor:
    """Applies per-head attention maps to a feature map.

    :param attention: ``(heads, N, N)`` or ``(B, heads, N, N)`` row-stochastic maps.
    :param values: ``(B, C, H, W)`` features with ``N = H * W`` and ``C`` divisible by ``heads``.
    :returns: ``(B, C, H, W)``; position ``i`` of head ``h`` is ``sum_j A[h, i, j] * V[h, :, j]``.
    """
    batch, channels, height, width = values.shape
    v = values.reshape(batch, heads, channels // heads, height * width)
    out = ops.matmul(v, _swap_last(attention))
    return out.reshape(batch, channels, height, width)


class _AttentionBase(Module):
    def __init__(self, channels: int, *, heads: int, key_dim: int, rng: np.random.Generator, zero_value: bool):
        super().__init__()
        if channels % heads:
            raise InvalidArgumentError(f"{channels} channels cannot be split over {heads} heads")
        self.channels = channels
        self.heads = heads
        self.key_dim = key_dim
        self.value = Conv2d(channels, channels, 1, rng=rng, zero_init=zero_value)
        self.norm = BatchNorm(channels)

    def _scores(self, keys: Tensor, queries: Tensor) -> Tensor:
        # keys/queries: (..., heads, key_dim, N) -> (..., heads, N, N)
        scores = ops.matmul(_swap_last(queries), keys)
        return ops.softmax(scores / np.sqrt(self.key_dim), axis=-1)

    def _output(self, features: Tensor, attention: Tensor) -> Tensor:
        attended = attend(attention, self.value(features), self.heads)
        return self.norm(attended) + features


class PositionAttention(_AttentionBase):
    """Multi-head attention whose keys and queries come from a learnable embedding ``P``.

    ``A = softmax(Q(P)^T K(P) / sqrt(d))`` per head, ``F_out = BN(A V(F)) + F``.

    :param channels: Feature channels ``C``; must be divisible by ``heads``.
    :param size: ``(H, W)`` of the features this block is applied to.
    :param heads: Number of heads.
    :param key_dim: Key and query channels per head.
    :param embedding_channels: Channels of ``P``. Defaults to ``channels``.
    :param zero_value: Start the value projection at zero, making the block an exact identity.
    """

    def __init__(
        self,
        channels: int,
        size: typing.Tuple[int, int],
        *,
        rng: np.random.Generator,
        heads: int = 4,
        key_dim: int = 32,
        embedding_channels: typing.Optional[int] = None,
        zero_value: bool = False,
    ):
        super().__init__(channels, heads=heads, key_dim=key_dim, rng=rng, zero_value=zero_value)
        embedding_channels = embedding_channels or channels
        self.size = tuple(size)
        self.embedding = Parameter(rng.normal(0.0, EMBEDDING_STD, (embedding_channels, *self.size)), name="P")
        self.key = Conv2d(embedding_channels, heads * key_dim, 1, rng=rng)
        self.query = Conv2d(embedding_channels, heads * key_dim, 1, rng=rng)

    def attention_map(self) -> Tensor:
        """The ``(heads, N, N)`` attention map. It depends on the parameters only."""
        p = self.embedding.reshape(1, *self.embedding.shape)
        n = self.size[0] * self.size[1]
        keys = self.key(p).reshape(self.heads, self.key_dim, n)
        queries = self.query(p).reshape(self.heads, self.key_dim, n)
        return self._scores(keys, queries)

    def forward(self, features: Tensor) -> Tensor:
        """:raises ShapeMismatchError: the features' spatial size differs from the embedding's."""
        if features.ndim != 4 or features.shape[1] != self.channels or features.shape[2:] != self.size:
            raise ShapeMismatchError(
                f"Position attention built for {self.channels}x{self.size[0]}x{self.size[1]} features",
                shapes=(features.shape, self.embedding.shape),
            )
        return self._output(features, self.attention_map())


class SelfAttention(_AttentionBase):
    """Same block with keys and queries computed from the features themselves, so the map varies per input."""

    def __init__(
        self,
        channels: int,
        *,
        rng: np.random.Generator,
        heads: int = 4,
        key_dim: int = 32,
        zero_value: bool = False,
    ):
        super().__init__(channels, heads=heads, key_dim=key_dim, rng=rng, zero_value=zero_value)
        self.key = Conv2d(channels, heads * key_dim, 1, rng=rng)
        self.query = Conv2d(channels, heads * key_dim, 1, rng=rng)

    def attention_map(self, features: Tensor) -> Tensor:
        batch, _, height, width = features.shape
        shape = (batch, self.heads, self.key_dim, height * width)
        return self._scores(self.key(features).reshape(*shape), self.query(features).reshape(*shape))

    def forward(self, features: Tensor) -> Tensor:
        if features.ndim != 4 or features.shape[1] != self.channels:
            raise ShapeMismatchError(shapes=(features.shape,))
        return self._output(features, self.attention_map(features))
