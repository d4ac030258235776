"""Reconstruction and adversarial losses."""

import dataclasses
import logging
import typing

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from .autodiff import ops
from .autodiff.nn import Module
from .autodiff.tensor import Tensor, as_tensor
from .exceptions import (
    MissingGroundTruthError,
    NegativeWeightError,
    ResolutionMismatchError,
    ShapeMismatchError,
    SilhouetteRangeError,
)
from .geometry.camera import WeakPerspectiveCamera

__all__ = (
    "FeatureExtractor",
    "LossComponents",
    "LossWeights",
    "camera_loss",
    "hinge_discriminator_loss",
    "hinge_generator_loss",
    "perceptual_loss",
    "silhouette_loss",
    "total_loss",
)

log = logging.getLogger(__name__)


class LossWeights(BaseModel):
    """Weights of the reconstruction loss terms."""

    model_config = ConfigDict(extra="forbid", validate_assignment=True)

    perceptual: float = 1.0
    silhouette: float = 1.0
    camera: float = 1.0
    smoothness: float = Field(0.00005)


@dataclasses.dataclass
class LossComponents:
    """The four reconstruction terms of one step. ``camera`` is None when no ground-truth camera is used."""

    perceptual: Tensor
    silhouette: Tensor
    smoothness: Tensor
    camera: typing.Optional[Tensor] = None

    def as_floats(self) -> typing.Dict[str, float]:
        return {
            "perceptual": self.perceptual.item(),
            "silhouette": self.silhouette.item(),
            "smoothness": self.smoothness.item(),
            "camera": self.camera.item() if self.camera is not None else 0.0,
        }


class FeatureExtractor(Module):
    """Frozen convolutional feature pyramid.

    Every stage is a stride-2 3x3 convolution followed by a ReLU; the output of every stage is tapped. Weights
    are drawn once from a seeded generator and never trained. Any module mapping ``(B, 3, H, W)`` to a list of
    feature maps can stand in for it.

    :param channels: Output channels of each stage.
    :param seed: Seed of the weight generator. Two extractors with the same seed are identical.
    """

    def __init__(self, channels: typing.Sequence[int] = (16, 32, 64), *, seed: int = 0):
        super().__init__()
        rng = np.random.default_rng(seed)
        self.channels = tuple(channels)
        self.weights: typing.List[Tensor] = []
        previous = 3
        for out in self.channels:
            w = rng.normal(0.0, np.sqrt(2.0 / (previous * 9)), (out, previous, 3, 3))
            self.weights.append(Tensor(w))
            previous = out

    def forward(self, image: Tensor) -> typing.List[Tensor]:
        x = as_tensor(image)
        if x.ndim == 3:
            x = x.reshape(1, *x.shape)
        features = []
        for w in self.weights:
            x = ops.relu(ops.conv2d(x, w, stride=2, padding=1))
            features.append(x)
        return features

    def pooled(self, images: np.ndarray, batch_size: int = 16) -> np.ndarray:
        """Spatially averaged features of every stage, concatenated. ``(N, sum(channels))``."""
        rows = []
        for start in range(0, len(images), batch_size):
            feats = self(Tensor(images[start : start + batch_size]))
            rows.append(np.concatenate([f.data.mean(axis=(2, 3)) for f in feats], axis=1))
        return np.concatenate(rows, axis=0).astype(np.float64)


def perceptual_loss(image: Tensor, rendered: Tensor, extractor: FeatureExtractor) -> Tensor:
    """``sum_j ||phi_j(image) - phi_j(rendered)||_2 / numel_j`` over the extractor's stages.

    :raises ResolutionMismatchError: the images differ in shape.
    """
    image, rendered = as_tensor(image), as_tensor(rendered)
    if image.shape != rendered.shape:
        raise ResolutionMismatchError(f"Cannot compare images of shape {image.shape} and {rendered.shape}")
    total = None
    for a, b in zip(extractor(image), extractor(rendered)):
        term = ops.norm(a - b) / a.size
        total = term if total is None else total + term
    return total


def silhouette_loss(observed: Tensor, rendered: Tensor) -> Tensor:
    """Negative soft IoU, ``1 - sum(S * S_r) / sum(S + S_r - S * S_r)``. Two empty silhouettes give 0.

    :raises ShapeMismatchError: the silhouettes differ in shape.
    :raises SilhouetteRangeError: a value lies outside ``[0, 1]``.
    """
    observed, rendered = as_tensor(observed), as_tensor(rendered)
    if observed.shape != rendered.shape:
        raise ShapeMismatchError(shapes=(observed.shape, rendered.shape))
    for s in (observed, rendered):
        if s.size and (s.data.min() < 0 or s.data.max() > 1):
            raise SilhouetteRangeError(f"Silhouette values must lie in [0, 1], got [{s.data.min()}, {s.data.max()}]")
    product = observed * rendered
    intersection = ops.sum(product)
    union = ops.sum(observed + rendered - product)
    if float(union.data) < ops.DIVISION_EPSILON:
        return union * 0.0
    return 1.0 - intersection / union


def camera_loss(predicted: WeakPerspectiveCamera, ground_truth: typing.Optional[WeakPerspectiveCamera]) -> Tensor:
    """Squared L2 distance over ``(q, s, t)``, with ``q`` sign-aligned to the ground truth first.

    :raises MissingGroundTruthError: ``ground_truth`` is None.
    """
    if ground_truth is None:
        raise MissingGroundTruthError("Camera loss needs a ground-truth camera")
    q = predicted.q
    if float(np.dot(q.data, ground_truth.q.data)) < 0:
        q = -q
    dq = q - ground_truth.q.data
    ds = predicted.s - ground_truth.s.data
    dt = predicted.t - ground_truth.t.data
    return ops.sum(dq * dq) + ops.sum(ds * ds) + ops.sum(dt * dt)


def total_loss(components: LossComponents, weights: LossWeights, *, include_camera: bool) -> Tensor:
    """Weighted sum of the reconstruction terms. The camera term is only included when asked for.

    :raises NegativeWeightError: any weight is negative.
    :raises MissingGroundTruthError: ``include_camera`` is set but there is no camera term.
    """
    for name, value in weights.model_dump().items():
        if value < 0:
            raise NegativeWeightError(f"Loss weight {name!r} must be non-negative, got {value}")
    total = (
        components.perceptual * weights.perceptual
        + components.silhouette * weights.silhouette
        + components.smoothness * weights.smoothness
    )
    if include_camera:
        if components.camera is None:
            raise MissingGroundTruthError("Camera term requested but not computed")
        total = total + components.camera * weights.camera
    return total


def hinge_discriminator_loss(real_logits: Tensor, fake_logits: Tensor) -> Tensor:
    """``mean(relu(1 - D(real))) + mean(relu(1 + D(fake)))``."""
    return ops.mean(ops.relu(1.0 - real_logits)) + ops.mean(ops.relu(1.0 + fake_logits))


def hinge_generator_loss(fake_logits: Tensor) -> Tensor:
    """``-mean(D(fake))``."""
    return -ops.mean(fake_logits)
