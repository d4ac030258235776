import logging
import pathlib
import sys
import typing

import numpy as np

import uvgan
from uvgan.autodiff.checkpoint import checkpoint_exists
from uvgan.autodiff.tensor import no_grad, precision
from uvgan.config import PipelineConfig, load_config
from uvgan.exceptions import MissingArtifactError, UvGanException
from uvgan.utils.jsonio import read_json

try:
    import click
except ImportError:
    print("Missing CLI dependencies. Did you install CLI extras?", file=sys.stderr)
    sys.exit(1)

logger = logging.getLogger("uvgan.cli")

MODEL_PREFIX = "model"
GAN_PREFIX = "last"


class PipelineGroup(click.Group):
    """Reports pipeline errors as a single red line and exit code 1, instead of a traceback."""

    def invoke(self, ctx: click.Context):
        try:
            return super().invoke(ctx)
        except UvGanException as e:
            logger.debug("Command failed", exc_info=e)
            click.secho(f"Error: {e}", fg="red", err=True)
            raise click.exceptions.Exit(1) from e


def _manifest(config: PipelineConfig, given: typing.Optional[pathlib.Path], *candidates: pathlib.Path) -> pathlib.Path:
    """The first manifest that exists among ``given``, ``paths.manifest`` and the candidate stage directories."""
    options = [p for p in (given, config.paths.manifest) if p is not None]
    options += [c / "manifest.json" for c in candidates]
    for option in options:
        if option.exists():
            return option
    raise MissingArtifactError(f"No manifest found (looked for {', '.join(map(str, options))})")


def _template(config: PipelineConfig):
    return uvgan.icosphere(config.recon.subdivisions)


def _recon_model(config: PipelineConfig):
    prefix = config.paths.recon / MODEL_PREFIX
    return uvgan.load_model(prefix, config.recon)


def _turntable_mesh(config: PipelineConfig, model, sequence):
    frame = (sequence.training_frames() or list(sequence))[0]
    with no_grad():
        mesh, texture = uvgan.reconstruct(model, _template(config), frame.masked_image())
    return mesh.detach(), texture.data


@click.group(cls=PipelineGroup)
@click.option(
    "--log-level",
    "-L",
    type=click.Choice(["DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"], case_sensitive=False),
    default="WARNING",
)
@click.option("--config", "config_path", type=click.Path(path_type=pathlib.Path), default=None)
@click.option("--seed", type=int, default=None, help="Overrides the configured seed")
@click.option("--out", type=click.Path(path_type=pathlib.Path), default=None, help="Output root of every stage")
@click.pass_context
def cli_root(ctx, log_level: str, config_path: typing.Optional[pathlib.Path], seed, out):
    """Textured mesh reconstruction and texture GAN pipeline."""
    logging.basicConfig(
        level=getattr(logging, log_level.upper()),
    )
    uvgan.silence_noisy_loggers()
    overrides: dict = {}
    if seed is not None:
        overrides["seed"] = seed
    if out is not None:
        overrides["paths"] = {"out": str(out)}
    ctx.obj = load_config(config_path, overrides=overrides)
    logger.debug("Effective configuration:\n%s", ctx.obj.dump_toml())


@cli_root.command(name="synth-data")
@click.option("--frames", type=int, default=None, help="Number of frames to render")
@click.pass_obj
def synth_data(config: PipelineConfig, frames: typing.Optional[int]):
    """Renders a synthetic turntable sequence with known ground truth."""
    synth = config.synth if frames is None else config.synth.model_copy(update={"frames": frames})
    sequence = uvgan.synth_data(synth, config.paths.data, seed=config.seed)
    (config.paths.out / "config.toml").write_text(config.dump_toml())
    click.secho(f"Wrote {len(sequence)} frames to {config.paths.data}", fg="green")


@cli_root.command(name="train-recon")
@click.option("--manifest", type=click.Path(path_type=pathlib.Path), default=None)
@click.option("--steps", type=int, default=None)
@click.pass_obj
def train_recon(config: PipelineConfig, manifest: typing.Optional[pathlib.Path], steps: typing.Optional[int]):
    """Trains the reconstruction network and the per-frame camera offsets.

    On a pruned manifest training continues from the saved weights, unless prune.reinit_weights is set.
    """
    manifest = _manifest(config, manifest, config.paths.prune, config.paths.data)
    sequence = uvgan.SequenceDataset.load(manifest)
    prefix = config.paths.recon / MODEL_PREFIX
    with precision(config.optim.dtype):
        model = uvgan.ReconModel.from_config(config.recon, image_size=sequence.resolution[0], seed=config.seed)
        trainer = uvgan.ReconTrainer(
            model,
            sequence,
            config=config.recon,
            optim=config.optim,
            weights=config.losses,
            template=_template(config),
            seed=config.seed,
        )
        if any(f.pruned for f in sequence) and checkpoint_exists(prefix) and not config.prune.reinit_weights:
            trainer.load(prefix, offsets=False)
        trainer.fit(
            config.recon.steps if steps is None else steps,
            log_path=config.paths.recon / "log.csv",
            checkpoint_prefix=prefix,
        )
    sequence.save(config.paths.recon / "manifest.json")
    click.secho(f"Saved reconstruction to {config.paths.recon}", fg="green")


@cli_root.command()
@click.option("--manifest", type=click.Path(path_type=pathlib.Path), default=None)
@click.option("--threshold", type=float, default=None, help="Fixed threshold in degrees (adaptive when omitted)")
@click.pass_obj
def prune(config: PipelineConfig, manifest: typing.Optional[pathlib.Path], threshold: typing.Optional[float]):
    """Flags frames whose optimised camera jumps away from both neighbours."""
    manifest = _manifest(config, manifest, config.paths.recon, config.paths.data)
    sequence = uvgan.SequenceDataset.load(manifest)
    pruned = uvgan.prune_sequence(
        sequence,
        threshold if threshold is not None else config.prune.threshold_deg,
        factor=config.prune.adaptive_factor,
    )
    flagged = [f.index for f in pruned if f.pruned]
    if not config.prune.apply:
        logger.info("Pruning disabled; frames %s would have been pruned", flagged)
        pruned = sequence
    pruned.save(config.paths.prune / "manifest.json")
    click.secho(f"Pruned frames: {flagged or 'none'}", fg="green")


@cli_root.command()
@click.option("--manifest", type=click.Path(path_type=pathlib.Path), default=None)
@click.pass_obj
def bake(config: PipelineConfig, manifest: typing.Optional[pathlib.Path]):
    """Bakes every unpruned frame into a pseudo ground-truth texture atlas."""
    manifest = _manifest(config, manifest, config.paths.prune, config.paths.recon, config.paths.data)
    sequence = uvgan.SequenceDataset.load(manifest)
    atlases = uvgan.bake_pseudo_textures(
        _recon_model(config),
        sequence,
        texture_resolution=tuple(config.bake.texture_resolution),
        template=_template(config),
        image_mask=config.bake.image_mask,
        min_visible=config.bake.min_visible,
        include_pruned=not config.prune.apply,
    )
    if not atlases:
        raise MissingArtifactError("No frame produced a usable atlas")
    uvgan.save_atlases(atlases, config.paths.bake)
    click.secho(f"Baked {len(atlases)} atlases to {config.paths.bake}", fg="green")


@cli_root.command(name="train-gan")
@click.option("--steps", type=int, default=None)
@click.pass_obj
def train_gan(config: PipelineConfig, steps: typing.Optional[int]):
    """Trains the texture GAN on the baked atlases."""
    atlases = uvgan.load_atlases(config.paths.bake)
    directory = config.paths.gan
    with precision(config.optim.dtype):
        trainer = uvgan.GanTrainer(config.gan, atlases, seed=config.seed)
        trainer.fit(
            config.gan.steps if steps is None else steps,
            log_path=directory / "log.csv",
            eval_log_path=directory / "eval.csv",
            checkpoint_prefix=directory / GAN_PREFIX,
        )
        samples = uvgan.sample_textures(trainer.generator, 9, seed=config.seed)
    uvgan.save_png(uvgan.contact_sheet(list(samples), columns=3), directory / "samples.png")
    click.secho(f"Saved GAN to {directory} (best feature distance {trainer.best[0]:.4f})", fg="green")


def _textures(config: PipelineConfig, source: str, recon_texture: np.ndarray, n: int, seed: int) -> np.ndarray:
    if source == "recon":
        return recon_texture[None]
    generator = uvgan.load_generator(config.paths.gan / GAN_PREFIX, config.gan, prefer_best=True)
    return uvgan.sample_textures(generator, n, seed=seed)


@cli_root.command()
@click.option("--views", type=int, default=None)
@click.option("--resolution", type=int, default=None)
@click.option("--fid-export/--no-fid-export", default=None, help="Also write 299x299 copies for external FID tools")
@click.option("--texture-source", type=click.Choice(["gan", "recon"]), default=None)
@click.option("--obj", "export_obj", is_flag=True, help="Also export the reconstructed mesh as OBJ")
@click.pass_obj
def render(config: PipelineConfig, views, resolution, fid_export, texture_source, export_obj):
    """Renders turntable views of the reconstructed mesh with a generated (or reconstructed) texture."""
    settings = config.render.model_copy(
        update={
            k: v
            for k, v in {
                "views": views,
                "resolution": resolution,
                "fid_export": fid_export,
                "texture_source": texture_source,
            }.items()
            if v is not None
        }
    )
    sequence = uvgan.SequenceDataset.load(_manifest(config, None, config.paths.prune, config.paths.recon))
    mesh, recon_texture = _turntable_mesh(config, _recon_model(config), sequence)
    texture = _textures(config, settings.texture_source, recon_texture, 1, config.seed)[0]
    views_out = uvgan.render_turntable(
        mesh, texture, settings.views, settings.resolution, elevation_deg=settings.elevation_deg, scale=settings.scale
    )
    directory = config.paths.render
    images = [v.rgb for v in views_out]
    for view in views_out:
        uvgan.save_png(view.rgb, directory / f"view_{view.index:03d}.png")
    uvgan.save_png(uvgan.contact_sheet(images), directory / "turntable.png")
    if settings.fid_export:
        uvgan.export_fid(images, config.paths.fid / "fake")
    if export_obj:
        uvgan.save_obj(mesh, directory / "mesh.obj")
        uvgan.save_png(texture, directory / "texture.png")
    click.secho(f"Rendered {len(images)} views to {directory}", fg="green")


@cli_root.command(name="eval")
@click.option("--views", type=int, default=None)
@click.option("--seeds", type=int, default=None)
@click.option("--artifacts", type=click.Choice(["trained", "ground_truth"]), default=None)
@click.option("--texture-source", type=click.Choice(["gan", "recon"]), default=None)
@click.pass_obj
def evaluate(config: PipelineConfig, views, seeds, artifacts, texture_source):
    """Scores the trained (or ground-truth) artifacts and writes report.json plus CSV breakdowns."""
    views = views or config.eval.views
    seeds = seeds or config.eval.seeds
    artifacts = artifacts or config.eval.artifacts
    texture_source = texture_source or config.render.texture_source
    if artifacts == "ground_truth":
        sequence = uvgan.SequenceDataset.load(_manifest(config, None, config.paths.data))
        gt = config.paths.data / "gt"
        try:
            mesh = uvgan.load_obj(gt / "mesh.obj")
            texture = uvgan.load_png(gt / "texture.png")
        except FileNotFoundError as e:
            raise MissingArtifactError(f"Ground truth not found: {e.filename}", exception=e) from e
        report = uvgan.eval_report(
            sequence,
            mesh,
            [texture[None]],
            views=views,
            frame_texture=texture,
            artifacts="ground_truth",
            texture_source="ground_truth",
            elevation_deg=config.render.elevation_deg,
            scale=config.render.scale,
        )
    else:
        sequence = uvgan.SequenceDataset.load(_manifest(config, None, config.paths.prune, config.paths.recon))
        model = _recon_model(config)
        _, recon_texture = _turntable_mesh(config, model, sequence)
        textures = [
            _textures(config, texture_source, recon_texture, config.gan.eval_samples, config.seed + s)
            for s in range(seeds)
        ]
        best = None
        summary = config.paths.gan / "summary.json"
        if texture_source == "gan" and summary.exists():
            data = read_json(summary)
            best = (data["best_feature_distance"], data["best_step"])
        report = uvgan.eval_report(
            sequence,
            model,
            textures,
            views=views,
            template=_template(config),
            texture_source=texture_source,
            elevation_deg=config.render.elevation_deg,
            scale=config.render.scale,
            best=best,
        )
    path = uvgan.write_report(report, config.paths.eval)
    click.secho(
        f"IoU {report.iou:.4f}, masked L1 {report.masked_l1:.4f}, feature distance {report.feature_distance:.4f}",
        fg="green",
    )
    click.echo(str(path))


@cli_root.command(name="export-fid")
@click.option("--manifest", type=click.Path(path_type=pathlib.Path), default=None)
@click.pass_obj
def export_fid(config: PipelineConfig, manifest: typing.Optional[pathlib.Path]):
    """Writes 299x299 copies of the training images and of the rendered views for external FID tools."""
    sequence = uvgan.SequenceDataset.load(_manifest(config, manifest, config.paths.prune, config.paths.data))
    rendered = sorted(config.paths.render.glob("view_*.png"))
    if not rendered:
        raise MissingArtifactError(f"No rendered views in {config.paths.render}; run render first")
    real = uvgan.export_fid([f.masked_image() for f in sequence.unpruned()], config.paths.fid / "real")
    fake = uvgan.export_fid([uvgan.load_png(p) for p in rendered], config.paths.fid / "fake")
    click.secho(f"Exported {len(real)} real and {len(fake)} rendered images to {config.paths.fid}", fg="green")


if __name__ == "__main__":
    cli_root()
