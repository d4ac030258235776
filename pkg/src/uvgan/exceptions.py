import typing

__all__ = (
    "ConfigError",
    "DatasetError",
    "DegenerateRenderError",
    "DegenerateStatisticsError",
    "DegenerateViewError",
    "DivergenceError",
    "EmptyTapeError",
    "GeometryError",
    "InvalidArgumentError",
    "InvalidCameraError",
    "InvalidSigmaError",
    "LossError",
    "ManifestError",
    "MissingArtifactError",
    "MissingGroundTruthError",
    "NegativeWeightError",
    "NonFiniteDeformationError",
    "NonFiniteLossError",
    "NonScalarLossError",
    "NumericalDomainError",
    "PrunedFrameError",
    "RenderError",
    "ResolutionMismatchError",
    "SequenceTooShortError",
    "ShapeMismatchError",
    "SilhouetteRangeError",
    "SubdivisionRangeError",
    "TensorError",
    "TopologyError",
    "TrainingError",
    "UvGanException",
)


class UvGanException(Exception):
    """Base exception for uv-gan.

    All other exceptions raised by this library will subclass this exception, so at least all the below are
    always available:

    :var message: A simple humanised explanation of the issue, if available.
    :var exception: The exception that was raised, if available.
    """

    message: typing.Optional[str]
    exception: typing.Optional[BaseException]

    def __init__(self, message: typing.Optional[str] = None, *, exception: typing.Optional[BaseException] = None):
        self.message = message
        self.exception = exception
        if self.exception is None and self.message is None:
            raise ValueError("If there is no error history, at least a human readable message should be provided.")
        super().__init__(message or repr(exception))

    def bottom_of_chain(self, other: typing.Optional[BaseException] = None) -> BaseException:
        """Recursively checks the `exception` attribute of the exception until it reaches the bottom of the chain.

        This function finds you the absolute first exception that was raised.

        :param other: The other exception to recurse down. If None, defaults to the exception this method is called on.
        :returns: The bottom of the chain exception.
        """
        other = other or self
        if getattr(other, "exception", None) is not None:
            try:
                return self.bottom_of_chain(other.exception)
            except RecursionError:
                return other
        return other

    def __str__(self) -> str:
        """Returns a human-readable version of the exception."""
        return self.message or repr(self.exception)

    def __repr__(self) -> str:
        """Returns a developer-readable version of the exception."""
        return f"<{self.__class__.__name__} message={self.message!r} exception={self.exception!r}>"


class InvalidArgumentError(UvGanException, ValueError):
    """A parameter was outside of its documented range (for example a non-positive stride)."""


class ConfigError(UvGanException):
    """The pipeline configuration could not be loaded or failed validation.

    :var errors: A list of ``(field, message)`` tuples, one per failing field.
    """

    def __init__(
        self,
        message: typing.Optional[str] = None,
        *,
        errors: typing.Optional[typing.Sequence[typing.Tuple[str, str]]] = None,
        exception: typing.Optional[BaseException] = None,
    ):
        self.errors = list(errors or [])
        if message is None and self.errors:
            message = "Invalid configuration: " + "; ".join(f"{field}: {msg}" for field, msg in self.errors)
        super().__init__(message, exception=exception)


class MissingArtifactError(UvGanException, FileNotFoundError):
    """A pipeline stage needed an artifact (checkpoint, manifest, atlas index) that has not been produced yet."""


# Tensor / autodiff
class TensorError(UvGanException):
    """Base exception for errors raised by the autodiff engine."""


class ShapeMismatchError(TensorError):
    """Two operands had incompatible shapes. Both shapes are included in the message."""

    def __init__(self, message: typing.Optional[str] = None, *, shapes: typing.Sequence[tuple] = ()):
        self.shapes = tuple(tuple(s) for s in shapes)
        if message is None:
            message = "Incompatible shapes: " + " vs ".join(str(s) for s in self.shapes)
        super().__init__(message)


class NumericalDomainError(TensorError):
    """An operation was evaluated outside of its numerical domain (for example division by ~0)."""


class DegenerateStatisticsError(TensorError):
    """Batch statistics were requested over fewer than two values."""


class NonScalarLossError(TensorError):
    """Backward was started from a tensor that has more than one element."""


class EmptyTapeError(TensorError):
    """Backward was started but no differentiable operation has been recorded."""


# Geometry
class GeometryError(UvGanException):
    """Base exception for mesh and camera errors."""


class SubdivisionRangeError(GeometryError, ValueError):
    """Icosphere subdivision level outside of the supported range."""


class NonFiniteDeformationError(GeometryError):
    """A deformation produced NaN or infinite vertex positions."""


class InvalidCameraError(GeometryError):
    """A camera had a non-unit rotation, non-positive scale, or could not be normalised."""


class TopologyError(GeometryError):
    """The mesh does not have the expected topology (for example an open edge on a closed mesh)."""


# Rendering
class RenderError(UvGanException):
    """Base exception for renderer errors."""


class InvalidSigmaError(RenderError, ValueError):
    """The soft silhouette sharpness must be strictly positive."""


class DegenerateViewError(RenderError):
    """A view does not see enough of the object to be useful."""


class DegenerateRenderError(RenderError):
    """A render produced (near) empty coverage, usually because the mesh left the view frustum."""


# Losses
class LossError(UvGanException):
    """Base exception for loss function errors."""


class ResolutionMismatchError(LossError):
    """Two images that must share a resolution do not."""


class SilhouetteRangeError(LossError):
    """Silhouette values must lie within [0, 1]."""


class MissingGroundTruthError(LossError):
    """A ground-truth camera was required but the frame does not carry one."""


class NegativeWeightError(LossError, ValueError):
    """Loss weights must be non-negative."""


# Training
class TrainingError(UvGanException):
    """Base exception for training loop errors."""


class DivergenceError(TrainingError):
    """A layer produced non-finite activations.

    :var layer: The name of the layer which first produced non-finite values.
    """

    def __init__(self, message: typing.Optional[str] = None, *, layer: typing.Optional[str] = None):
        self.layer = layer
        super().__init__(message or f"Non-finite activations produced by layer {layer!r}")


class PrunedFrameError(TrainingError):
    """A frame flagged as pruned was used for training."""


class NonFiniteLossError(TrainingError):
    """A training step produced a non-finite loss.

    :var checkpoint: Path prefix of the last good checkpoint, if one was written.
    """

    def __init__(self, message: typing.Optional[str] = None, *, checkpoint: typing.Optional[str] = None):
        self.checkpoint = checkpoint
        super().__init__(message or f"Non-finite loss; last good checkpoint: {checkpoint!r}")


# Data
class DatasetError(UvGanException):
    """Base exception for dataset errors."""


class SequenceTooShortError(DatasetError):
    """The sequence has too few frames for the requested operation."""


class ManifestError(DatasetError):
    """A manifest could not be parsed or references missing files."""
