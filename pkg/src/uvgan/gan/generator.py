import logging
import math
import typing

import numpy as np

from ..autodiff import ops
from ..autodiff.nn import BatchNorm, Conv2d, Linear, Module
from ..autodiff.tensor import Tensor, no_grad
from ..exceptions import InvalidArgumentError, ShapeMismatchError
from .attention import PositionAttention, SelfAttention

if typing.TYPE_CHECKING:
    from ..config import GanConfig

__all__ = ("BASE_SIZE", "Generator", "ResBlock", "sample_textures")

log = logging.getLogger(__name__)

BASE_SIZE = 4
NUM_BLOCKS = 7
ATTENTION_AFTER_BLOCK = 1


class ResBlock(Module):
    """``x + conv(relu(bn(conv(relu(bn(x))))))``, with a 1x1 projection on the skip when channels change."""

    def __init__(self, in_channels: int, out_channels: int, *, rng: np.random.Generator):
        super().__init__()
        self.norm1 = BatchNorm(in_channels)
        self.conv1 = Conv2d(in_channels, out_channels, 3, rng=rng)
        self.norm2 = BatchNorm(out_channels)
        self.conv2 = Conv2d(out_channels, out_channels, 3, rng=rng)
        self.skip = Conv2d(in_channels, out_channels, 1, rng=rng) if in_channels != out_channels else None

    def forward(self, x: Tensor) -> Tensor:
        h = self.conv1(ops.relu(self.norm1(x)))
        h = self.conv2(ops.relu(self.norm2(h)))
        return h + (self.skip(x) if self.skip is not None else x)


class Generator(Module):
    """Texture generator: latent vector to a ``(3, H, W)`` texture in ``[-1, 1]``.

    The latent is projected to a coarse grid, then seven residual blocks run with upsampling steps in between
    (one per doubling; any blocks left over run at the final resolution). Position attention follows the second
    block. With a symmetry axis, only half the texture is generated and the other half is its exact mirror.

    :param latent_dim: Size of the latent vector.
    :param resolution: ``(H, W)`` of the output texture.
    :param base_channels: Channels at the coarsest grid; halved with every upsampling down to ``min_channels``.
    :param symmetry: ``"height"`` mirrors the first spatial axis, ``"width"`` the second, ``"none"`` disables it.
    :param attention: ``"position"``, ``"self"`` (negative control) or ``"none"``.
    """

    def __init__(
        self,
        *,
        latent_dim: int = 64,
        resolution: typing.Tuple[int, int] = (128, 128),
        base_channels: int = 64,
        min_channels: int = 16,
        symmetry: typing.Literal["height", "width", "none"] = "height",
        attention: typing.Literal["position", "self", "none"] = "position",
        heads: int = 4,
        key_dim: int = 32,
        seed: int = 0,
    ):
        super().__init__()
        rng = np.random.default_rng(seed)
        height, width = resolution
        halves = {"height": (2, 1), "width": (1, 2), "none": (1, 1)}.get(symmetry)
        if halves is None:
            raise InvalidArgumentError(f"Unknown symmetry {symmetry!r}")
        if height % halves[0] or width % halves[1]:
            raise InvalidArgumentError(f"Resolution {resolution} cannot be mirrored along {symmetry}")
        generated = (height // halves[0], width // halves[1])
        if min(generated) < BASE_SIZE:
            raise InvalidArgumentError(f"Generator resolution {resolution} is too small")
        upsamplings = min(int(math.log2(min(generated) // BASE_SIZE)), NUM_BLOCKS - 1)
        base = (generated[0] >> upsamplings, generated[1] >> upsamplings)
        if (base[0] << upsamplings, base[1] << upsamplings) != generated:
            raise InvalidArgumentError(f"Generator resolution {resolution} is not a power-of-two multiple of {base}")
        self.latent_dim = latent_dim
        self.resolution = (height, width)
        self.symmetry = symmetry
        self.base = base
        self.upsamplings = upsamplings

        channels = [max(base_channels >> min(i, upsamplings), min_channels) for i in range(NUM_BLOCKS)]
        self.project = Linear(latent_dim, channels[0] * base[0] * base[1], rng=rng)
        self.blocks = []
        previous = channels[0]
        for c in channels:
            self.blocks.append(ResBlock(previous, c, rng=rng))
            previous = c
        size = (base[0] << min(ATTENTION_AFTER_BLOCK, upsamplings), base[1] << min(ATTENTION_AFTER_BLOCK, upsamplings))
        attn_channels = channels[ATTENTION_AFTER_BLOCK]
        if attention == "position":
            self.attention = PositionAttention(attn_channels, size, rng=rng, heads=heads, key_dim=key_dim)
        elif attention == "self":
            self.attention = SelfAttention(attn_channels, rng=rng, heads=heads, key_dim=key_dim)
        else:
            self.attention = None
        self.out_norm = BatchNorm(previous)
        self.out_conv = Conv2d(previous, 3, 3, rng=rng)
        log.debug(
            "Generator %s: base %s, %d upsamplings, %d parameters",
            self.resolution,
            base,
            upsamplings,
            self.num_parameters(),
        )

    @classmethod
    def from_config(cls, config: "GanConfig", *, seed: int = 0) -> "Generator":
        return cls(
            latent_dim=config.latent_dim,
            resolution=config.resolution,
            base_channels=config.base_channels,
            min_channels=config.min_channels,
            symmetry=config.symmetry,
            attention=config.attention,
            heads=config.heads,
            key_dim=config.key_dim,
            seed=seed,
        )

    def mirror(self, half: Tensor) -> Tensor:
        """Assembles the full texture from the generated half and its reflection."""
        if self.symmetry == "height":
            return ops.concat([half, ops.flip(half, axis=2)], axis=2)
        if self.symmetry == "width":
            return ops.concat([half, ops.flip(half, axis=3)], axis=3)
        return half

    def forward(self, z) -> Tensor:
        """:raises ShapeMismatchError: ``z`` is not ``(B, latent_dim)``."""
        z = z if isinstance(z, Tensor) else Tensor(z)
        if z.ndim != 2 or z.shape[1] != self.latent_dim:
            raise ShapeMismatchError(
                f"Expected latents of shape (B, {self.latent_dim}), got {z.shape}", shapes=(z.shape,)
            )
        x = self.project(z).reshape(z.shape[0], -1, *self.base)
        for i, block in enumerate(self.blocks):
            if 0 < i <= self.upsamplings:
                x = ops.upsample_nearest(x, 2)
            x = block(x)
            if i == ATTENTION_AFTER_BLOCK and self.attention is not None:
                x = self.attention(x)
        x = ops.tanh(self.out_conv(ops.relu(self.out_norm(x))))
        return self.mirror(x)


def sample_textures(generator: Generator, n: int, seed: int, *, batch_size: int = 16) -> np.ndarray:
    """Generates ``n`` textures from ``n`` latents drawn with ``seed``, in evaluation mode.

    :returns: ``(n, 3, H, W)`` array in ``[0, 1]``.
    """
    if n < 1:
        raise InvalidArgumentError(f"Need at least one sample, got {n}")
    z = np.random.default_rng(seed).standard_normal((n, generator.latent_dim))
    training = generator.training
    generator.eval()
    try:
        with no_grad():
            out = [generator(z[i : i + batch_size]).data for i in range(0, n, batch_size)]
    finally:
        generator.train(training)
    return ((np.concatenate(out, axis=0) + 1) / 2).astype(np.float32)
