import os

import numpy as np
import pytest

from uvgan.autodiff.tensor import no_grad
from uvgan.config import GanConfig, OptimConfig, ReconConfig, SynthConfig
from uvgan.evaluation import masked_l1
from uvgan.gan.trainer import GanTrainer
from uvgan.geometry.camera import quaternion_geodesic
from uvgan.recon.model import ReconModel
from uvgan.recon.trainer import ReconTrainer, reconstruct, refine_camera
from uvgan.render.baking import TextureAtlas
from uvgan.render.shading import render
from uvgan.synth import procedural_texture, synth_data, synth_scene

pytestmark = [
    pytest.mark.slow,
    pytest.mark.skipif(os.getenv("UVGAN_RUN_SLOW") != "1", reason="set UVGAN_RUN_SLOW=1 to run acceptance runs"),
]

SYNTH = SynthConfig(frames=24, resolution=64, subdivisions=3)


def test_perturbed_cameras_recover(tmp_path):
    sequence = synth_data(SYNTH.model_copy(update={"camera_noise_deg": 10.0}), tmp_path, seed=0)
    scene = synth_scene(SYNTH, seed=0)
    for frame in sequence.training_frames()[:3]:
        errors = refine_camera(frame, scene.mesh, scene.texture, steps=500)
        assert errors[-1] < 2.0


def test_two_view_training_fits_the_silhouettes(tmp_path):
    sequence = synth_data(SYNTH, tmp_path, seed=0)
    config = ReconConfig(subdivisions=3, log_every=100)
    trainer = ReconTrainer(ReconModel.from_config(config, image_size=64), sequence, config=config, optim=OptimConfig())
    records = trainer.fit(2000)
    assert np.mean([r.iou for r in records[-50:]]) > 0.9
    for frame in sequence.training_frames():
        assert quaternion_geodesic(frame.optimized_camera().q.data, frame.camera_gt.q.data) < 5.0
    trainer.model.eval()
    errors = []
    with no_grad():
        for frame in sequence.training_frames():
            mesh, texture = reconstruct(trainer.model, trainer.template, frame.masked_image())
            rgb = render(mesh, frame.optimized_camera(), texture, 64).rgb.data
            errors.append(masked_l1(frame.masked_image(), rgb, frame.mask))
    assert np.mean(errors) < 0.05


GAN = GanConfig(
    latent_dim=32,
    resolution=(32, 32),
    base_channels=32,
    min_channels=8,
    heads=2,
    key_dim=8,
    embedding_channels=4,
    disc_channels=16,
    batch_size=8,
    eval_every=50,
    eval_samples=16,
    log_every=50,
)


def _aligned_atlases(count=32, resolution=(32, 32)):
    rng = np.random.default_rng(0)
    atlases = []
    for i in range(count):
        visibility = np.zeros(resolution, dtype=bool)
        start = rng.integers(0, resolution[1] // 2)
        visibility[:, start : start + resolution[1] // 2] = True
        atlases.append(TextureAtlas(procedural_texture(resolution, rng) * visibility, visibility, frame=i))
    return atlases


def test_gan_feature_distance_halves():
    trainer = GanTrainer(GAN, _aligned_atlases(), seed=0)
    trainer.fit(600)
    first = trainer.history[0][1]
    assert trainer.best[0] <= 0.5 * first


@pytest.mark.parametrize("update", [{"masking": False}, {"embedding_channels": 0}], ids=["unmasked", "no_embedding"])
def test_gan_variants_train(update):
    trainer = GanTrainer(GAN.model_copy(update=update), _aligned_atlases(), seed=1)
    records = trainer.fit(100)
    assert len(records) == 100
    assert all(np.isfinite([r.d_loss, r.g_loss]).all() for r in records)
    assert all(np.isfinite(distance) for _, distance in trainer.history)
