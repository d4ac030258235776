"""Stage-one training: the encoder-decoder and the per-frame camera offsets, optimised jointly."""

import dataclasses
import logging
import os
import pathlib
import time
import typing

import numpy as np

from ..autodiff.checkpoint import load_checkpoint, save_checkpoint
from ..autodiff.optim import Adam
from ..autodiff.tensor import Tensor, backward, current_tape, no_grad
from ..exceptions import (
    DegenerateRenderError,
    MissingGroundTruthError,
    PrunedFrameError,
    SequenceTooShortError,
    UvGanException,
)
from ..geometry.camera import WeakPerspectiveCamera, quaternion_geodesic
from ..geometry.mesh import TriMesh, apply_deformation, icosphere, smoothness_loss
from ..losses import (
    FeatureExtractor,
    LossComponents,
    LossWeights,
    camera_loss,
    perceptual_loss,
    silhouette_loss,
    total_loss,
)
from ..render.shading import RenderOutput, render
from ..utils.csvlog import CsvLog
from ..utils.lib import timed
from .dataset import Frame, SequenceDataset
from .model import ReconModel, encode_decode, encode_image

if typing.TYPE_CHECKING:
    from ..config import OptimConfig, ReconConfig

__all__ = ("LossRecord", "MIN_TRAINING_FRAMES", "ReconTrainer", "load_model", "reconstruct", "refine_camera")

log = logging.getLogger(__name__)

MIN_TRAINING_FRAMES = 8
MIN_ALPHA = 0.01
LOG_FIELDS = (
    "step",
    "frame_in",
    "frame_target",
    "perceptual",
    "silhouette",
    "smoothness",
    "camera",
    "total",
    "iou",
    "camera_error_deg",
)


@dataclasses.dataclass
class LossRecord:
    """Outcome of one training step. ``camera_error_deg`` is NaN when the target has no ground-truth camera."""

    step: int
    frame_in: int
    frame_target: int
    perceptual: float
    silhouette: float
    smoothness: float
    camera: float
    total: float
    iou: float
    camera_error_deg: float = float("nan")

    def as_row(self) -> typing.Dict[str, typing.Any]:
        return dataclasses.asdict(self)


def reconstruct(model: ReconModel, template: TriMesh, image: np.ndarray) -> typing.Tuple[TriMesh, Tensor]:
    """Predicts the deformed template and its texture from one masked image."""
    displacement, texture = encode_decode(model, image)
    return apply_deformation(template, displacement[0]), texture[0]


def _hard_iou(fragments_coverage: np.ndarray, mask: np.ndarray) -> float:
    observed = mask > 0.5
    union = np.logical_or(fragments_coverage, observed).sum()
    if not union:
        return 1.0
    return float(np.logical_and(fragments_coverage, observed).sum() / union)


def _camera_error(camera: WeakPerspectiveCamera, ground_truth: typing.Optional[WeakPerspectiveCamera]) -> float:
    if ground_truth is None:
        return float("nan")
    q = camera.q.data.astype(np.float64)
    return quaternion_geodesic(q / np.linalg.norm(q), ground_truth.q.data)


class ReconTrainer:
    """Runs two-view (or single-view) reconstruction training on one sequence.

    Every frame owns a `CameraOffset` with its own Adam optimiser. A two-view step encodes one frame, renders the
    prediction through the other frame's camera and updates the model and *only* that target frame's offset.

    :param model: The model to train.
    :param sequence: Training sequence. Pruned frames are never drawn.
    :param config: Reconstruction settings (mode, sigma, camera learning rate, logging cadence).
    :param optim: Model optimiser settings.
    :param weights: Loss weights.
    :param extractor: Feature extractor for the perceptual loss. A default `FeatureExtractor` is built if omitted.
    :param seed: Seed of the pair sampler.
    :raises SequenceTooShortError: two-view training with fewer than 8 training frames.
    """

    def __init__(
        self,
        model: ReconModel,
        sequence: SequenceDataset,
        *,
        config: "ReconConfig",
        optim: "OptimConfig",
        weights: typing.Optional[LossWeights] = None,
        extractor: typing.Optional[FeatureExtractor] = None,
        template: typing.Optional[TriMesh] = None,
        seed: int = 0,
    ):
        if config.mode == "two_view" and len(sequence.training_frames()) < MIN_TRAINING_FRAMES:
            raise SequenceTooShortError(
                f"Two-view training needs at least {MIN_TRAINING_FRAMES} unpruned training frames, "
                f"got {len(sequence.training_frames())}"
            )
        self.model = model
        self.sequence = sequence
        self.config = config
        self.optim = optim
        self.weights = weights or LossWeights()
        self.extractor = extractor or FeatureExtractor()
        self.template = template or icosphere(config.subdivisions)
        self.rng = np.random.default_rng(seed)
        self.step = 0
        self.optimiser = self._model_optimiser()
        self._camera_optimisers: typing.Dict[int, Adam] = {}

    def _model_optimiser(self) -> Adam:
        return Adam(
            self.model.parameters(),
            lr=self.optim.lr,
            betas=(self.optim.beta1, self.optim.beta2),
            eps=self.optim.eps,
        )

    def camera_optimiser(self, frame: Frame) -> Adam:
        optimiser = self._camera_optimisers.get(frame.index)
        if optimiser is None:
            optimiser = Adam(frame.camera_offset.parameters(), lr=self.config.camera_lr)
            self._camera_optimisers[frame.index] = optimiser
        return optimiser

    def reinitialize(self, seed: int) -> None:
        """Replaces the model with a freshly initialised one of the same architecture. Camera offsets are kept."""
        self.model = ReconModel.from_config(self.config, image_size=self.model.image_size, seed=seed)
        self.optimiser = self._model_optimiser()
        log.info("Re-initialised reconstruction weights (seed %d)", seed)

    def _losses(
        self, mesh: TriMesh, texture: Tensor, camera: WeakPerspectiveCamera, target: Frame
    ) -> typing.Tuple[LossComponents, RenderOutput]:
        output = render(mesh, camera, texture, target.resolution, sigma=self.config.sigma)
        peak = float(output.alpha.data.max()) if output.alpha.size else 0.0
        if peak < MIN_ALPHA:
            raise DegenerateRenderError(
                f"Render for frame {target.index} is empty (max alpha {peak:.4f}); the camera misses the mesh"
            )
        components = LossComponents(
            perceptual=perceptual_loss(target.masked_image(), output.rgb, self.extractor),
            silhouette=silhouette_loss(target.mask, output.alpha),
            smoothness=smoothness_loss(mesh),
        )
        return components, output

    def _finish(
        self,
        components: LossComponents,
        loss: Tensor,
        output: RenderOutput,
        frame_in: Frame,
        target: Frame,
        camera: WeakPerspectiveCamera,
    ) -> LossRecord:
        values = components.as_floats()
        record = LossRecord(
            step=self.step,
            frame_in=frame_in.index,
            frame_target=target.index,
            total=loss.item(),
            iou=_hard_iou(output.fragments.coverage, target.mask),
            camera_error_deg=_camera_error(camera, target.camera_gt),
            **values,
        )
        self.step += 1
        return record

    def train_step_two_view(self, frame_in: Frame, frame_target: Frame) -> LossRecord:
        """Encodes ``frame_in``, renders through ``frame_target``'s camera and takes one joint optimiser step.

        The model parameters and ``frame_target.camera_offset`` are updated; no other frame's offset changes.
        Passing the same frame twice reduces to single-view reconstruction without the camera term.

        :raises PrunedFrameError: either frame is pruned.
        :raises DegenerateRenderError: the rendered silhouette is empty everywhere.
        """
        for frame in (frame_in, frame_target):
            if frame.pruned:
                raise PrunedFrameError(f"Frame {frame.index} is pruned and cannot be trained on")
        self.model.train()
        self.optimiser.zero_grad()
        camera_optimiser = self.camera_optimiser(frame_target)
        camera_optimiser.zero_grad()
        try:
            mesh, texture = reconstruct(self.model, self.template, frame_in.masked_image())
            camera = frame_target.camera
            components, output = self._losses(mesh, texture, camera, frame_target)
            loss = total_loss(components, self.weights, include_camera=False)
            backward(loss)
        except UvGanException:
            current_tape().clear()
            raise
        self.optimiser.step()
        camera_optimiser.step()
        return self._finish(components, loss, output, frame_in, frame_target, camera)

    def train_step_single_view(self, frame: Frame) -> LossRecord:
        """Reconstructs ``frame`` through the model's predicted camera, including the camera regression term.

        :raises MissingGroundTruthError: the frame has no ground-truth camera.
        :raises PrunedFrameError: the frame is pruned.
        """
        if frame.pruned:
            raise PrunedFrameError(f"Frame {frame.index} is pruned and cannot be trained on")
        if frame.camera_gt is None:
            raise MissingGroundTruthError(f"Frame {frame.index} has no ground-truth camera for single-view training")
        self.model.train()
        self.optimiser.zero_grad()
        try:
            image = frame.masked_image()
            latent = encode_image(self.model, image)
            displacement, texture = self.model.decode(latent)
            mesh, texture = apply_deformation(self.template, displacement[0]), texture[0]
            camera = self.model.predict_camera(image, scale=frame.camera_init.numpy()[1], latent=latent)
            components, output = self._losses(mesh, texture, camera, frame)
            components.camera = camera_loss(camera, frame.camera_gt)
            loss = total_loss(components, self.weights, include_camera=True)
            backward(loss)
        except UvGanException:
            current_tape().clear()
            raise
        self.optimiser.step()
        return self._finish(components, loss, output, frame, frame, camera)

    def train_step(self) -> LossRecord:
        """Draws frames for the configured mode and runs one step."""
        if self.config.mode == "two_view":
            frame_in, frame_target = self.sequence.sample_pair(self.rng)
            return self.train_step_two_view(frame_in, frame_target)
        pool = self.sequence.training_frames()
        if not pool:
            raise SequenceTooShortError("No training frames left")
        return self.train_step_single_view(pool[int(self.rng.integers(len(pool)))])

    def fit(
        self,
        steps: int,
        *,
        log_path: typing.Union[str, os.PathLike, None] = None,
        checkpoint_prefix: typing.Union[str, os.PathLike, None] = None,
    ) -> typing.List[LossRecord]:
        """Runs ``steps`` training steps, logging every step to CSV and checkpointing periodically.

        Steps whose render comes out empty are skipped with a warning.
        """
        records: typing.List[LossRecord] = []
        csv = CsvLog(log_path, LOG_FIELDS) if log_path is not None else None
        start = time.perf_counter()
        try:
            for _ in range(steps):
                try:
                    with timed(log, f"Reconstruction step {self.step}"):
                        record = self.train_step()
                except DegenerateRenderError as e:
                    log.warning("Skipping step %d: %s", self.step, e)
                    self.step += 1
                    continue
                records.append(record)
                if csv is not None:
                    csv.write(record.as_row())
                if record.step % self.config.log_every == 0:
                    log.info(
                        "recon step %d: total=%.5f silhouette=%.4f perceptual=%.5f iou=%.3f",
                        record.step,
                        record.total,
                        record.silhouette,
                        record.perceptual,
                        record.iou,
                    )
                if checkpoint_prefix is not None and self.step % self.config.checkpoint_every == 0:
                    self.save(checkpoint_prefix)
        finally:
            if csv is not None:
                csv.close()
        if checkpoint_prefix is not None:
            self.save(checkpoint_prefix)
        log.info("Trained %d reconstruction steps in %.1fs", len(records), time.perf_counter() - start)
        return records

    def state_arrays(self) -> typing.Dict[str, np.ndarray]:
        arrays = {f"model.{name}": value for name, value in self.model.state_dict().items()}
        for frame in self.sequence:
            for name, value in frame.camera_offset.state_dict().items():
                arrays[f"offset.{frame.index}.{name}"] = value
        return arrays

    def save(self, prefix: typing.Union[str, os.PathLike]) -> pathlib.Path:
        metadata = {"step": self.step, "image_size": self.model.image_size, "mode": self.config.mode}
        return save_checkpoint(prefix, self.state_arrays(), metadata=metadata)

    def load(self, prefix: typing.Union[str, os.PathLike], *, offsets: bool = True) -> dict:
        """Restores model weights (and, optionally, camera offsets) from a checkpoint written by `save`."""
        arrays, metadata = load_checkpoint(prefix)
        self.model.load_state_dict({k[len("model.") :]: v for k, v in arrays.items() if k.startswith("model.")})
        if offsets:
            for frame in self.sequence:
                keys = {name: f"offset.{frame.index}.{name}" for name in ("dq", "ds", "dt")}
                if all(k in arrays for k in keys.values()):
                    frame.camera_offset.load_state_dict({name: arrays[k] for name, k in keys.items()})
        self.step = int(metadata.get("step", 0))
        log.info("Restored reconstruction state from %s (step %d)", prefix, self.step)
        return metadata


def load_model(
    prefix: typing.Union[str, os.PathLike], config: "ReconConfig", *, image_size: typing.Optional[int] = None
) -> ReconModel:
    """Builds a model for ``config`` and loads the weights saved by `ReconTrainer.save`, in eval mode."""
    arrays, metadata = load_checkpoint(prefix)
    size = image_size or int(metadata.get("image_size", 64))
    config = config.model_copy(update={"mode": metadata.get("mode", config.mode)})
    model = ReconModel.from_config(config, image_size=size)
    model.load_state_dict({k[len("model.") :]: v for k, v in arrays.items() if k.startswith("model.")})
    return model.eval()


def refine_camera(
    frame: Frame,
    mesh: TriMesh,
    texture,
    *,
    steps: int = 500,
    lr: float = 1e-3,
    sigma: float = 0.02,
    weights: typing.Optional[LossWeights] = None,
    extractor: typing.Optional[FeatureExtractor] = None,
) -> typing.List[float]:
    """Optimises only ``frame.camera_offset`` against a fixed textured mesh.

    :returns: Geodesic error to the ground-truth camera after every step (NaN without ground truth).
    """
    weights = weights or LossWeights()
    extractor = extractor or FeatureExtractor()
    mesh = mesh.detach()
    texture = Tensor(np.asarray(getattr(texture, "data", texture)))
    optimiser = Adam(frame.camera_offset.parameters(), lr=lr)
    errors = []
    for _ in range(steps):
        optimiser.zero_grad()
        camera = frame.camera
        output = render(mesh, camera, texture, frame.resolution, sigma=sigma)
        components = LossComponents(
            perceptual=perceptual_loss(frame.masked_image(), output.rgb, extractor),
            silhouette=silhouette_loss(frame.mask, output.alpha),
            smoothness=Tensor(0.0),
        )
        loss = total_loss(components, weights, include_camera=False)
        backward(loss)
        optimiser.step()
        with no_grad():
            errors.append(_camera_error(frame.camera, frame.camera_gt))
    return errors
