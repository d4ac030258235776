"""Stage-two training: the texture GAN on baked pseudo ground-truth atlases."""

import dataclasses
import logging
import math
import os
import pathlib
import time
import typing

import numpy as np

from ..autodiff.checkpoint import checkpoint_exists, load_checkpoint, save_checkpoint
from ..autodiff.optim import Adam
from ..autodiff.tensor import Tensor, backward, current_tape, no_grad
from ..evaluation import feature_distance
from ..exceptions import InvalidArgumentError, NonFiniteLossError, ShapeMismatchError
from ..losses import FeatureExtractor, hinge_discriminator_loss, hinge_generator_loss
from ..render.baking import TextureAtlas
from ..utils.csvlog import CsvLog
from ..utils.jsonio import write_json_atomic
from ..utils.lib import timed
from .discriminator import Discriminator
from .generator import Generator, sample_textures

if typing.TYPE_CHECKING:
    from ..config import GanConfig

__all__ = (
    "GanBatch",
    "GanRecord",
    "GanTrainer",
    "gan_train_step",
    "load_generator",
    "make_gan_batch",
    "stack_atlases",
)

log = logging.getLogger(__name__)

LOG_FIELDS = ("step", "d_loss", "g_loss", "real_score", "fake_score")
EVAL_FIELDS = ("step", "feature_distance")
SUMMARY = "summary.json"


@dataclasses.dataclass(eq=False)
class GanBatch:
    """A batch of real atlases in the generator's value range.

    :var real: ``(B, 3, H, W)`` textures in ``[-1, 1]``, zero where unobserved.
    :var visibility: ``(B, 1, H, W)`` visibility masks as 0/1 floats.
    """

    real: np.ndarray
    visibility: np.ndarray

    def __post_init__(self):
        if self.real.ndim != 4 or self.visibility.shape != (self.real.shape[0], 1, *self.real.shape[2:]):
            raise ShapeMismatchError(
                "Real textures and visibility masks do not line up", shapes=(self.real.shape, self.visibility.shape)
            )

    def __len__(self) -> int:
        return self.real.shape[0]


def stack_atlases(atlases: typing.Sequence[TextureAtlas]) -> typing.Tuple[np.ndarray, np.ndarray]:
    """Stacks atlases into ``(N, 3, H, W)`` textures in ``[0, 1]`` and ``(N, 1, H, W)`` visibilities."""
    if not atlases:
        raise InvalidArgumentError("No atlases to train on")
    resolutions = {a.resolution for a in atlases}
    if len(resolutions) != 1:
        raise ShapeMismatchError("Atlases have differing resolutions", shapes=tuple(resolutions))
    visibility = np.stack([a.visibility for a in atlases]).astype(np.float32)[:, None]
    textures = np.stack([a.texture for a in atlases]).astype(np.float32) * visibility
    return textures, visibility


def make_gan_batch(textures: np.ndarray, visibility: np.ndarray, indices: typing.Sequence[int]) -> GanBatch:
    """Selects ``indices`` from stacked atlases and maps colours to ``[-1, 1]`` inside the visible texels."""
    indices = np.asarray(indices)
    vis = visibility[indices]
    return GanBatch(((2 * textures[indices] - 1) * vis).astype(np.float32), vis.astype(np.float32))


@dataclasses.dataclass
class GanRecord:
    step: int
    d_loss: float
    g_loss: float
    real_score: float
    fake_score: float

    def as_row(self) -> typing.Dict[str, typing.Any]:
        return dataclasses.asdict(self)


def _scale_mean(losses: typing.Sequence[Tensor]) -> Tensor:
    total = losses[0]
    for loss in losses[1:]:
        total = total + loss
    return total / len(losses)


def gan_train_step(
    generator: Generator,
    discriminator: Discriminator,
    batch: GanBatch,
    opt_g: Adam,
    opt_d: Adam,
    *,
    rng: np.random.Generator,
    masking: bool = True,
    step: int = 0,
    checkpoint: typing.Optional[str] = None,
) -> GanRecord:
    """One discriminator step followed by one generator step.

    Fakes are multiplied by visibility masks drawn from the real batch (a permutation of it), and the discriminator
    sees that same mask as its visibility channel. With ``masking`` off the fakes reach the discriminator unmasked.
    The hinge loss is averaged over all patches of both scales.

    :param checkpoint: Last good checkpoint prefix, reported if this step diverges.
    :raises NonFiniteLossError: either loss is not finite. The tape is cleared first.
    """
    size = len(batch)
    fake_visibility = batch.visibility[rng.permutation(size)]

    def fakes(z: np.ndarray) -> Tensor:
        out = generator(z)
        return out * fake_visibility if masking else out

    # discriminator
    z = rng.standard_normal((size, generator.latent_dim))
    with no_grad():
        fake = Tensor(fakes(z).data)
    real_logits = discriminator(batch.real, batch.visibility)
    fake_logits = discriminator(fake, fake_visibility)
    d_loss = _scale_mean([hinge_discriminator_loss(r, f) for r, f in zip(real_logits, fake_logits)])
    _check_finite(d_loss, "discriminator", step, checkpoint)
    opt_d.zero_grad()
    backward(d_loss)
    opt_d.step()

    # generator
    z = rng.standard_normal((size, generator.latent_dim))
    gen_logits = discriminator(fakes(z), fake_visibility)
    g_loss = _scale_mean([hinge_generator_loss(f) for f in gen_logits])
    _check_finite(g_loss, "generator", step, checkpoint)
    opt_g.zero_grad()
    backward(g_loss)
    opt_g.step()
    return GanRecord(
        step=step,
        d_loss=float(d_loss.data),
        g_loss=float(g_loss.data),
        real_score=float(np.mean([r.data.mean() for r in real_logits])),
        fake_score=float(np.mean([f.data.mean() for f in fake_logits])),
    )


def _check_finite(loss: Tensor, which: str, step: int, checkpoint: typing.Optional[str]) -> None:
    if not math.isfinite(float(loss.data)):
        current_tape().clear()
        raise NonFiniteLossError(
            f"Non-finite {which} loss at step {step}; last good checkpoint: {checkpoint!r}", checkpoint=checkpoint
        )


class GanTrainer:
    """Owns the generator, the discriminator and their optimisers.

    ??? example
        ```py
        trainer = GanTrainer(config.gan, load_atlases(config.paths.bake), seed=config.seed)
        trainer.fit(config.gan.steps, log_path="gan/log.csv", checkpoint_prefix="gan/last")
        textures = sample_textures(trainer.generator, 9, seed=0)
        ```

    :param config: GAN section of the pipeline config.
    :param atlases: Baked atlases; their resolution must equal ``config.resolution``.
    :param seed: Seeds the networks, batch sampling and latents.
    :param extractor: Feature network for the periodic feature distance.
    :raises ShapeMismatchError: the atlases' resolution differs from the configured one.
    """

    def __init__(
        self,
        config: "GanConfig",
        atlases: typing.Sequence[TextureAtlas],
        *,
        seed: int = 0,
        extractor: typing.Optional[FeatureExtractor] = None,
    ):
        self.config = config
        self.textures, self.visibility = stack_atlases(atlases)
        if self.textures.shape[2:] != tuple(config.resolution):
            raise ShapeMismatchError(
                f"Atlases are {self.textures.shape[2:]} but the GAN is configured for {tuple(config.resolution)}",
                shapes=(self.textures.shape, tuple(config.resolution)),
            )
        self.seed = seed
        self.rng = np.random.default_rng(seed)
        self.generator = Generator.from_config(config, seed=seed)
        self.discriminator = Discriminator.from_config(config, seed=seed + 1)
        betas = (config.beta1, config.beta2)
        self.opt_g = Adam(self.generator.parameters(), lr=config.lr_g, betas=betas)
        self.opt_d = Adam(self.discriminator.parameters(), lr=config.lr_d, betas=betas)
        self.extractor = extractor or FeatureExtractor(seed=seed)
        self.step = 0
        self.last_checkpoint: typing.Optional[str] = None
        self.best: typing.Optional[typing.Tuple[float, int]] = None
        self.history: typing.List[typing.Tuple[int, float]] = []
        log.info(
            "GAN trainer on %d atlases at %s: G has %d parameters, D has %d",
            len(self.textures),
            tuple(config.resolution),
            self.generator.num_parameters(),
            self.discriminator.num_parameters(),
        )

    def sample_batch(self) -> GanBatch:
        size = min(self.config.batch_size, len(self.textures))
        return make_gan_batch(self.textures, self.visibility, self.rng.choice(len(self.textures), size, replace=False))

    def train_step(self) -> GanRecord:
        record = gan_train_step(
            self.generator,
            self.discriminator,
            self.sample_batch(),
            self.opt_g,
            self.opt_d,
            rng=self.rng,
            masking=self.config.masking,
            step=self.step,
            checkpoint=self.last_checkpoint,
        )
        self.step += 1
        return record

    def evaluate(self) -> float:
        """Feature distance between generated and real textures.

        Samples are drawn with a fixed seed and masked by a fixed draw of real visibilities, so values are
        comparable across steps.
        """
        n = min(self.config.eval_samples, len(self.textures))
        rng = np.random.default_rng(self.seed)
        indices = rng.choice(len(self.textures), n, replace=False)
        fake = sample_textures(self.generator, n, seed=self.seed) * self.visibility[indices]
        distance = feature_distance(self.textures[indices], fake, self.extractor)
        self.history.append((self.step, distance))
        if self.best is None or distance < self.best[0]:
            self.best = (distance, self.step)
        log.info("GAN step %d: feature distance %.4f (best %.4f at %d)", self.step, distance, *self.best)
        return distance

    def fit(
        self,
        steps: int,
        *,
        log_path: typing.Union[str, os.PathLike, None] = None,
        eval_log_path: typing.Union[str, os.PathLike, None] = None,
        checkpoint_prefix: typing.Union[str, os.PathLike, None] = None,
    ) -> typing.List[GanRecord]:
        """Trains for ``steps`` steps.

        The feature distance is measured before the first step, every ``eval_every`` steps and after the last.
        With a checkpoint prefix, ``<prefix>`` always holds the latest state and ``<prefix>_best`` the state with
        the lowest feature distance so far.
        """
        records: typing.List[GanRecord] = []
        csv = CsvLog(log_path, LOG_FIELDS) if log_path is not None else None
        eval_csv = CsvLog(eval_log_path, EVAL_FIELDS) if eval_log_path is not None else None
        start = time.perf_counter()

        def evaluate():
            best = self.best
            with timed(log, f"Feature distance at step {self.step}"):
                distance = self.evaluate()
            if eval_csv is not None:
                eval_csv.write({"step": self.step, "feature_distance": distance})
            if checkpoint_prefix is not None and self.best != best:
                self.save(f"{checkpoint_prefix}_best")

        try:
            if not self.history or self.history[-1][0] != self.step:
                evaluate()
            for _ in range(steps):
                with timed(log, f"GAN step {self.step}"):
                    record = self.train_step()
                records.append(record)
                if csv is not None:
                    csv.write(record.as_row())
                if record.step % self.config.log_every == 0:
                    log.info(
                        "GAN step %d: d=%.4f g=%.4f real=%.3f fake=%.3f",
                        record.step,
                        record.d_loss,
                        record.g_loss,
                        record.real_score,
                        record.fake_score,
                    )
                if self.step % self.config.eval_every == 0:
                    evaluate()
                if checkpoint_prefix is not None and self.step % self.config.checkpoint_every == 0:
                    self.save(checkpoint_prefix)
            if self.history[-1][0] != self.step:
                evaluate()
        finally:
            for c in (csv, eval_csv):
                if c is not None:
                    c.close()
        if checkpoint_prefix is not None:
            self.save(checkpoint_prefix)
            self.write_summary(pathlib.Path(checkpoint_prefix).parent / SUMMARY)
        log.info("Trained %d GAN steps in %.1fs", len(records), time.perf_counter() - start)
        return records

    def state_arrays(self) -> typing.Dict[str, np.ndarray]:
        arrays = {f"generator.{k}": v for k, v in self.generator.state_dict().items()}
        arrays.update({f"discriminator.{k}": v for k, v in self.discriminator.state_dict().items()})
        return arrays

    def save(self, prefix: typing.Union[str, os.PathLike]) -> pathlib.Path:
        metadata = {"step": self.step, "resolution": list(self.config.resolution)}
        path = save_checkpoint(prefix, self.state_arrays(), metadata=metadata)
        self.last_checkpoint = str(prefix)
        return path

    def load(self, prefix: typing.Union[str, os.PathLike]) -> dict:
        arrays, metadata = load_checkpoint(prefix)
        for name, module in (("generator", self.generator), ("discriminator", self.discriminator)):
            module.load_state_dict({k[len(name) + 1 :]: v for k, v in arrays.items() if k.startswith(name + ".")})
        self.step = int(metadata.get("step", 0))
        self.last_checkpoint = str(prefix)
        log.info("Restored GAN state from %s (step %d)", prefix, self.step)
        return metadata

    def write_summary(self, path: typing.Union[str, os.PathLike]) -> pathlib.Path:
        """Writes the feature-distance history and the best value with its step."""
        best_distance, best_step = self.best if self.best else (None, None)
        return write_json_atomic(
            path,
            {
                "best_feature_distance": best_distance,
                "best_step": best_step,
                "history": [{"step": s, "feature_distance": d} for s, d in self.history],
                "steps": self.step,
            },
        )


def load_generator(
    prefix: typing.Union[str, os.PathLike], config: "GanConfig", *, prefer_best: bool = False
) -> Generator:
    """Builds a generator for ``config`` and loads weights saved by `GanTrainer.save`, in eval mode.

    :param prefer_best: Load ``<prefix>_best`` when it exists.
    """
    if prefer_best and checkpoint_exists(f"{prefix}_best"):
        prefix = f"{prefix}_best"
    arrays, _ = load_checkpoint(prefix)
    generator = Generator.from_config(config)
    generator.load_state_dict(
        {k[len("generator.") :]: v for k, v in arrays.items() if k.startswith("generator.")}
    )
    return generator.eval()
