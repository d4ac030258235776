"""Pipeline configuration.

Configuration is resolved in three layers, each overriding the last:

1. a TOML file (``--config``),
2. environment variables named ``UVGAN_<SECTION>__<FIELD>`` (for example ``UVGAN_RECON__STEPS=50``),
3. explicit overrides (the CLI's ``--seed``, ``--out``, ``--views`` and ``--resolution`` flags).
"""

import logging
import os
import pathlib
import typing

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from .exceptions import ConfigError
from .losses import LossWeights
from .utils.jsonio import loads

try:
    import tomllib
except ImportError:  # Python 3.10
    import tomli as tomllib

__all__ = (
    "BakeConfig",
    "EvalConfig",
    "GanConfig",
    "OptimConfig",
    "PathsConfig",
    "PipelineConfig",
    "PruneConfig",
    "ReconConfig",
    "RenderConfig",
    "SynthConfig",
    "load_config",
)

log = logging.getLogger(__name__)

ENV_PREFIX = "UVGAN_"


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class SynthConfig(_Section):
    """Synthetic turntable scene."""

    frames: int = Field(24, ge=3)
    step_deg: typing.Optional[float] = Field(None, gt=0, description="Degrees between frames; default 360/frames")
    resolution: int = Field(64, ge=8)
    subdivisions: int = Field(3, ge=0, le=6)
    displacement_amplitude: float = Field(0.15, ge=0)
    displacement_resolution: int = Field(32, ge=4)
    texture_resolution: typing.Tuple[int, int] = (64, 128)
    scale: float = Field(0.8, gt=0)
    elevation_deg: float = 10.0
    camera_noise_deg: float = Field(0.0, ge=0)
    flip_frames: typing.List[int] = Field(default_factory=list)
    mask_radius: int = Field(0, description="Positive dilates the masks, negative erodes them")
    held_every: int = Field(4, ge=0, description="Every n-th frame is held out for evaluation; 0 disables")


class RenderConfig(_Section):
    resolution: int = Field(64, ge=8)
    sigma: typing.Optional[float] = Field(None, gt=0, description="Soft silhouette sharpness; default 1e-4 * width")
    views: int = Field(8, ge=1)
    elevation_deg: float = 10.0
    scale: float = Field(0.8, gt=0)
    fid_export: bool = False
    texture_source: typing.Literal["gan", "recon"] = "gan"


class OptimConfig(_Section):
    lr: float = Field(1e-4, gt=0)
    beta1: float = Field(0.9, ge=0, lt=1)
    beta2: float = Field(0.999, ge=0, lt=1)
    eps: float = Field(1e-8, gt=0)
    dtype: typing.Literal["float32", "float64"] = "float32"


class ReconConfig(_Section):
    mode: typing.Literal["two_view", "single_view"] = "two_view"
    steps: int = Field(2000, ge=0)
    latent_dim: int = Field(128, ge=1)
    encoder_channels: typing.Tuple[int, ...] = (16, 32, 64, 64)
    decoder_channels: typing.Tuple[int, ...] = (64, 32, 16)
    displacement_resolution: int = Field(32, ge=4)
    displacement_bound: float = Field(0.3, gt=0)
    texture_resolution: typing.Tuple[int, int] = (64, 128)
    subdivisions: int = Field(3, ge=0, le=6)
    sigma: float = Field(0.02, gt=0, description="Soft silhouette sharpness used while training, in NDC units")
    camera_lr: float = Field(1e-3, gt=0)
    log_every: int = Field(50, ge=1)
    checkpoint_every: int = Field(500, ge=1)


class PruneConfig(_Section):
    threshold_deg: typing.Optional[float] = Field(None, gt=0, description="Fixed threshold; adaptive when unset")
    adaptive_factor: float = Field(4.0, gt=0)
    apply: bool = True
    reinit_weights: bool = False


class BakeConfig(_Section):
    texture_resolution: typing.Tuple[int, int] = (128, 128)
    image_mask: typing.Literal["projected", "external"] = "projected"
    min_visible: float = Field(0.01, ge=0, le=1)


class GanConfig(_Section):
    latent_dim: int = Field(64, ge=1)
    resolution: typing.Tuple[int, int] = (128, 128)
    base_channels: int = Field(64, ge=4)
    min_channels: int = Field(16, ge=4)
    symmetry: typing.Literal["height", "width", "none"] = "height"
    attention: typing.Literal["position", "self", "none"] = "position"
    heads: int = Field(4, ge=1)
    key_dim: int = Field(32, ge=1)
    embedding_channels: int = Field(8, ge=0)
    disc_channels: int = Field(32, ge=4)
    lr_g: float = Field(2e-4, gt=0)
    lr_d: float = Field(2e-4, gt=0)
    beta1: float = Field(0.0, ge=0, lt=1)
    beta2: float = Field(0.9, ge=0, lt=1)
    batch_size: int = Field(8, ge=2)
    steps: int = Field(2000, ge=0)
    masking: bool = True
    eval_every: int = Field(250, ge=1)
    eval_samples: int = Field(16, ge=2)
    checkpoint_every: int = Field(250, ge=1)
    log_every: int = Field(50, ge=1)


class EvalConfig(_Section):
    views: int = Field(8, ge=1)
    seeds: int = Field(1, ge=1)
    artifacts: typing.Literal["trained", "ground_truth"] = "trained"


class PathsConfig(_Section):
    out: pathlib.Path = pathlib.Path("runs/default")
    manifest: typing.Optional[pathlib.Path] = None

    @property
    def data(self) -> pathlib.Path:
        return self.out / "data"

    @property
    def recon(self) -> pathlib.Path:
        return self.out / "recon"

    @property
    def prune(self) -> pathlib.Path:
        return self.out / "prune"

    @property
    def bake(self) -> pathlib.Path:
        return self.out / "bake"

    @property
    def gan(self) -> pathlib.Path:
        return self.out / "gan"

    @property
    def render(self) -> pathlib.Path:
        return self.out / "render"

    @property
    def eval(self) -> pathlib.Path:
        return self.out / "eval"

    @property
    def fid(self) -> pathlib.Path:
        return self.out / "fid"


class PipelineConfig(_Section):
    """Every knob of the pipeline. A run is reproducible from a dumped config plus its seed."""

    seed: int = 0
    synth: SynthConfig = Field(default_factory=SynthConfig)
    render: RenderConfig = Field(default_factory=RenderConfig)
    losses: LossWeights = Field(default_factory=LossWeights)
    optim: OptimConfig = Field(default_factory=OptimConfig)
    recon: ReconConfig = Field(default_factory=ReconConfig)
    prune: PruneConfig = Field(default_factory=PruneConfig)
    bake: BakeConfig = Field(default_factory=BakeConfig)
    gan: GanConfig = Field(default_factory=GanConfig)
    eval: EvalConfig = Field(default_factory=EvalConfig)
    paths: PathsConfig = Field(default_factory=PathsConfig)

    @field_validator("seed")
    @classmethod
    def _non_negative_seed(cls, value: int) -> int:
        if value < 0:
            raise ValueError("seed must be non-negative")
        return value

    def dump_toml(self) -> str:
        """Serialises the complete configuration as TOML. Unset optional values are omitted."""
        data = self.model_dump(mode="json")
        lines = [f"seed = {_toml_value(data.pop('seed'))}"]
        for section, values in data.items():
            lines.append("")
            lines.append(f"[{section}]")
            for key, value in values.items():
                if value is None:
                    continue
                lines.append(f"{key} = {_toml_value(value)}")
        return "\n".join(lines) + "\n"


def _toml_value(value: typing.Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, float)):
        return repr(value)
    if isinstance(value, str):
        return '"' + value.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(_toml_value(v) for v in value) + "]"
    raise TypeError(f"Cannot represent {type(value).__name__} in TOML")


def _merge(base: dict, extra: typing.Mapping) -> dict:
    for key, value in extra.items():
        if isinstance(value, typing.Mapping) and isinstance(base.get(key), dict):
            _merge(base[key], value)
        else:
            base[key] = value
    return base


def _env_overrides(env: typing.Mapping[str, str]) -> dict:
    result: dict = {}
    for name, raw in env.items():
        if not name.startswith(ENV_PREFIX):
            continue
        path = [part.lower() for part in name[len(ENV_PREFIX) :].split("__")]
        if path[0] not in PipelineConfig.model_fields:
            continue
        value: typing.Any = raw
        if raw.startswith("["):
            try:
                value = loads(raw)
            except ValueError:
                pass
        node = result
        for part in path[:-1]:
            node = node.setdefault(part, {})
        node[path[-1]] = value
        log.debug("Config override from environment: %s", name)
    return result


def load_config(
    path: typing.Union[str, os.PathLike, None] = None,
    *,
    env: typing.Optional[typing.Mapping[str, str]] = None,
    overrides: typing.Optional[typing.Mapping[str, typing.Any]] = None,
) -> PipelineConfig:
    """Loads and validates the configuration.

    :param path: Optional TOML file.
    :param env: Environment to read ``UVGAN_*`` overrides from. Defaults to `os.environ`.
    :param overrides: Nested mapping applied last, e.g. ``{"render": {"views": 12}}``.
    :raises ConfigError: the file could not be parsed, or any field failed validation. Every failing field is
        listed as ``section.field: message``.
    """
    data: dict = {}
    if path is not None:
        try:
            with open(path, "rb") as fd:
                data = tomllib.load(fd)
        except FileNotFoundError as e:
            raise ConfigError(f"Config file not found: {path}", exception=e) from e
        except tomllib.TOMLDecodeError as e:
            raise ConfigError(f"Malformed config file {path}: {e}", exception=e) from e
    _merge(data, _env_overrides(os.environ if env is None else env))
    if overrides:
        _merge(data, overrides)
    try:
        return PipelineConfig.model_validate(data)
    except ValidationError as e:
        errors = [(".".join(str(p) for p in err["loc"]), err["msg"]) for err in e.errors()]
        raise ConfigError(errors=errors, exception=e) from e
