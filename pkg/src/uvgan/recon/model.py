import logging
import typing

import numpy as np

from ..autodiff import ops
from ..autodiff.nn import BatchNorm, Conv2d, Linear, Module, check_finite
from ..autodiff.tensor import Tensor, as_tensor
from ..exceptions import InvalidArgumentError, ShapeMismatchError
from ..geometry.camera import WeakPerspectiveCamera

if typing.TYPE_CHECKING:
    from ..config import ReconConfig

__all__ = ("ConvDecoder", "ConvEncoder", "ReconModel", "encode_decode", "encode_image")

log = logging.getLogger(__name__)

DEFORMATION_HEAD_SCALE = 1e-3


class ConvEncoder(Module):
    """Stride-2 convolution, batch norm and ReLU per stage. Each stage halves the resolution."""

    def __init__(self, channels: typing.Sequence[int], *, rng: np.random.Generator, in_channels: int = 3):
        super().__init__()
        self.convs = []
        self.norms = []
        previous = in_channels
        for c in channels:
            self.convs.append(Conv2d(previous, c, 3, rng=rng, stride=2))
            self.norms.append(BatchNorm(c))
            previous = c
        self.out_channels = previous

    def forward(self, x: Tensor) -> Tensor:
        for i, (conv, norm) in enumerate(zip(self.convs, self.norms)):
            x = check_finite(ops.relu(norm(conv(x))), f"encoder.{i}")
        return x


class ConvDecoder(Module):
    """Maps a latent vector to a ``(C, H, W)`` map through nearest upsampling and convolutions.

    The latent is projected to a ``channels[0] x H/2^n x W/2^n`` grid, then each of the ``n = len(channels)``
    stages doubles the resolution.

    :param activation: ``"sigmoid"`` for maps in ``[0, 1]``, ``"tanh"`` for maps in ``[-bound, bound]``.
    :param head_scale: Multiplier of the output convolution's initial weights. A small value keeps the initial
        output close to constant while every decoder parameter still receives gradient.
    """

    def __init__(
        self,
        latent_dim: int,
        out_channels: int,
        size: typing.Tuple[int, int],
        channels: typing.Sequence[int],
        *,
        rng: np.random.Generator,
        activation: typing.Literal["sigmoid", "tanh"] = "sigmoid",
        bound: float = 1.0,
        head_scale: float = 1.0,
        name: str = "decoder",
    ):
        super().__init__()
        n = len(channels)
        height, width = size
        base = (height >> n, width >> n)
        if base[0] < 1 or base[1] < 1 or (base[0] << n, base[1] << n) != (height, width):
            raise InvalidArgumentError(f"Output size {size} is not reachable with {n} upsampling stages")
        self.base = base
        self.name = name
        self.fc = Linear(latent_dim, channels[0] * base[0] * base[1], rng=rng)
        self.convs = []
        self.norms = []
        previous = channels[0]
        for c in channels:
            self.convs.append(Conv2d(previous, c, 3, rng=rng))
            self.norms.append(BatchNorm(c))
            previous = c
        self.head = Conv2d(previous, out_channels, 3, rng=rng, init_scale=head_scale)
        self.activation = activation
        self.bound = bound

    def forward(self, z: Tensor) -> Tensor:
        batch = z.shape[0]
        x = ops.relu(self.fc(z)).reshape(batch, -1, *self.base)
        for i, (conv, norm) in enumerate(zip(self.convs, self.norms)):
            x = ops.upsample_nearest(x, 2)
            x = check_finite(ops.relu(norm(conv(x))), f"{self.name}.{i}")
        x = self.head(x)
        if self.activation == "tanh":
            return ops.tanh(x) * self.bound
        return ops.sigmoid(x)


class ReconModel(Module):
    """Image encoder with deformation, texture and (optionally) camera heads.

    :param image_size: Input resolution; must be divisible by ``2 ** len(encoder_channels)``.
    :param displacement_resolution: Side of the square ``(3, Hd, Wd)`` displacement map.
    :param texture_resolution: ``(Ht, Wt)`` of the predicted texture.
    :param camera_head: Add a regressor predicting the camera, for the single-view setting.
    """

    def __init__(
        self,
        *,
        image_size: int = 64,
        latent_dim: int = 128,
        encoder_channels: typing.Sequence[int] = (16, 32, 64, 64),
        decoder_channels: typing.Sequence[int] = (64, 32, 16),
        displacement_resolution: int = 32,
        displacement_bound: float = 0.3,
        texture_resolution: typing.Tuple[int, int] = (64, 128),
        camera_head: bool = False,
        seed: int = 0,
    ):
        super().__init__()
        rng = np.random.default_rng(seed)
        reduction = 2 ** len(encoder_channels)
        if image_size % reduction:
            raise InvalidArgumentError(f"Image size {image_size} is not divisible by {reduction}")
        self.image_size = image_size
        self.texture_resolution = tuple(texture_resolution)
        self.displacement_resolution = displacement_resolution
        self.encoder = ConvEncoder(encoder_channels, rng=rng)
        feature = image_size // reduction
        self.to_latent = Linear(self.encoder.out_channels * feature * feature, latent_dim, rng=rng)
        self.deformation = ConvDecoder(
            latent_dim,
            3,
            (displacement_resolution, displacement_resolution),
            decoder_channels,
            rng=rng,
            activation="tanh",
            bound=displacement_bound,
            head_scale=DEFORMATION_HEAD_SCALE,
            name="deformation",
        )
        self.texture = ConvDecoder(latent_dim, 3, self.texture_resolution, decoder_channels, rng=rng, name="texture")
        self.camera = Linear(latent_dim, 7, rng=rng) if camera_head else None
        log.debug("ReconModel has %d parameters", self.num_parameters())

    @classmethod
    def from_config(cls, config: "ReconConfig", *, image_size: int, seed: int = 0) -> "ReconModel":
        return cls(
            image_size=image_size,
            latent_dim=config.latent_dim,
            encoder_channels=config.encoder_channels,
            decoder_channels=config.decoder_channels,
            displacement_resolution=config.displacement_resolution,
            displacement_bound=config.displacement_bound,
            texture_resolution=config.texture_resolution,
            camera_head=config.mode == "single_view",
            seed=seed,
        )

    def encode(self, image: Tensor) -> Tensor:
        x = self.encoder(image)
        x = x.reshape(x.shape[0], -1)
        return check_finite(ops.relu(self.to_latent(x)), "latent")

    def decode(self, z: Tensor) -> typing.Tuple[Tensor, Tensor]:
        return self.deformation(z), self.texture(z)

    def forward(self, image: Tensor) -> typing.Tuple[Tensor, Tensor]:
        return self.decode(self.encode(image))

    def predict_camera(
        self, image: Tensor, *, scale: float = 0.8, latent: typing.Optional[Tensor] = None
    ) -> WeakPerspectiveCamera:
        """Regresses a camera for a single image. ``scale`` is the scale predicted for a zero output.

        :param latent: A latent already computed by `encode` for this image; the image is not encoded again.
        """
        if self.camera is None:
            raise InvalidArgumentError("This model was built without a camera head")
        if latent is None:
            latent = self.encode(_as_batch(image))
        raw = self.camera(latent)[0]
        q = raw[0:4] + np.array([1.0, 0.0, 0.0, 0.0])
        q = q / ops.norm(q)
        s = ops.exp(raw[4]) * scale
        return WeakPerspectiveCamera(q, s, raw[5:7], validate=False)


def _as_batch(image) -> Tensor:
    image = as_tensor(image)
    if image.ndim == 3:
        image = image.reshape(1, *image.shape)
    if image.ndim != 4 or image.shape[1] != 3:
        raise ShapeMismatchError(f"Expected a (B, 3, H, W) image, got {image.shape}", shapes=(image.shape,))
    return image


def encode_image(model: ReconModel, image) -> Tensor:
    """Validates a ``(3, H, W)`` or ``(B, 3, H, W)`` image and encodes it to ``(B, latent_dim)``.

    :raises ShapeMismatchError: the image does not match the model's input size.
    """
    image = _as_batch(image)
    if image.shape[2:] != (model.image_size, model.image_size):
        raise ShapeMismatchError(
            f"Model expects {model.image_size}x{model.image_size} images, got {image.shape[2:]}",
            shapes=(image.shape,),
        )
    return model.encode(image)


def encode_decode(model: ReconModel, image) -> typing.Tuple[Tensor, Tensor]:
    """Runs the model on a ``(3, H, W)`` or ``(B, 3, H, W)`` image.

    :returns: ``(displacement_map, texture_map)`` of shapes ``(B, 3, Hd, Wd)`` and ``(B, 3, Ht, Wt)``.
    :raises ShapeMismatchError: the image does not match the model's input size.
    :raises DivergenceError: a layer produced non-finite activations; the layer is named.
    """
    return model.decode(encode_image(model, image))
