import logging
import typing

import numpy as np

from ..autodiff import ops
from ..autodiff.nn import Conv2d, Module, Parameter
from ..autodiff.tensor import Tensor, as_tensor
from ..exceptions import InvalidArgumentError, ShapeMismatchError
from .attention import EMBEDDING_STD

if typing.TYPE_CHECKING:
    from ..config import GanConfig

__all__ = ("Discriminator", "PatchBranch")

log = logging.getLogger(__name__)

LEAKY_SLOPE = 0.2


class PatchBranch(Module):
    """``depth`` stride-2 3x3 convolutions with leaky ReLU, then a 1x1 convolution to one logit per patch.

    Each output logit sees a ``2 ** (depth + 1) - 1`` pixel square of the input.
    """

    def __init__(self, in_channels: int, channels: int, depth: int, *, rng: np.random.Generator):
        super().__init__()
        self.convs = []
        previous = in_channels
        for i in range(depth):
            out = channels * 2 ** min(i, 3)
            self.convs.append(Conv2d(previous, out, 3, rng=rng, stride=2))
            previous = out
        self.logit = Conv2d(previous, 1, 1, rng=rng)
        self.depth = depth

    @property
    def receptive_field(self) -> int:
        return 2 ** (self.depth + 1) - 1

    def forward(self, x: Tensor) -> Tensor:
        for conv in self.convs:
            x = ops.leaky_relu(conv(x), LEAKY_SLOPE)
        return self.logit(x)


class Discriminator(Module):
    """Two-scale patch discriminator with a learnable positional embedding.

    The input is the texture, its visibility mask and an embedding ``E`` with the texture's height and width,
    shared across the batch, concatenated along channels. The embedding lets the discriminator judge a patch by
    where it sits in the UV layout. One branch looks at roughly 32x32 patches and one at 16x16 patches.

    :param resolution: ``(H, W)`` of the textures; must be divisible by 16.
    :param embedding_channels: Channels of ``E``. 0 removes the embedding.
    :param channels: Width of the first convolution of each branch.
    """

    def __init__(
        self,
        *,
        resolution: typing.Tuple[int, int] = (128, 128),
        embedding_channels: int = 8,
        channels: int = 32,
        seed: int = 0,
    ):
        super().__init__()
        rng = np.random.default_rng(seed)
        height, width = resolution
        if height % 16 or width % 16:
            raise InvalidArgumentError(f"Discriminator resolution {resolution} must be divisible by 16")
        self.resolution = (height, width)
        self.embedding_channels = embedding_channels
        self.embedding = (
            Parameter(rng.normal(0.0, EMBEDDING_STD, (embedding_channels, height, width)), name="E")
            if embedding_channels
            else None
        )
        in_channels = 3 + 1 + embedding_channels
        self.large = PatchBranch(in_channels, channels, 4, rng=rng)
        self.small = PatchBranch(in_channels, channels, 3, rng=rng)

    @classmethod
    def from_config(cls, config: "GanConfig", *, seed: int = 0) -> "Discriminator":
        return cls(
            resolution=config.resolution,
            embedding_channels=config.embedding_channels,
            channels=config.disc_channels,
            seed=seed,
        )

    def inputs(self, texture, visibility) -> Tensor:
        """Concatenates texture, visibility and the batch-shared embedding.

        :raises ShapeMismatchError: texture and visibility disagree, or do not match the configured resolution.
        """
        texture, visibility = as_tensor(texture), as_tensor(visibility)
        if visibility.ndim == 3:
            visibility = visibility.reshape(visibility.shape[0], 1, *visibility.shape[1:])
        if (
            texture.ndim != 4
            or texture.shape[1] != 3
            or visibility.shape != (texture.shape[0], 1, *texture.shape[2:])
            or texture.shape[2:] != self.resolution
        ):
            raise ShapeMismatchError(
                f"Discriminator expects (B, 3, {self.resolution[0]}, {self.resolution[1]}) textures with matching "
                "(B, 1, H, W) visibility",
                shapes=(texture.shape, visibility.shape),
            )
        parts = [texture, visibility]
        if self.embedding is not None:
            ones = np.ones((texture.shape[0], 1, 1, 1), dtype=self.embedding.dtype)
            parts.append(self.embedding.reshape(1, *self.embedding.shape) * ones)
        return ops.concat(parts, axis=1)

    def forward(self, texture, visibility) -> typing.Tuple[Tensor, Tensor]:
        """:returns: ``(logits_32, logits_16)`` patch logit maps of shapes ``(B, 1, H/16, W/16)`` and
        ``(B, 1, H/8, W/8)``."""
        x = self.inputs(texture, visibility)
        return self.large(x), self.small(x)
