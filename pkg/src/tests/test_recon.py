import importlib.resources
import json
import logging

import numpy as np
import pytest

from uvgan.autodiff.checkpoint import checkpoint_exists
from uvgan.config import OptimConfig, ReconConfig, SynthConfig
from uvgan.exceptions import (
    InvalidArgumentError,
    MissingArtifactError,
    PrunedFrameError,
    SequenceTooShortError,
    ShapeMismatchError,
)
from uvgan.geometry.camera import WeakPerspectiveCamera, quat_from_axis_angle, quat_multiply, quaternion_geodesic
from uvgan.geometry.mesh import icosphere, load_obj
from uvgan.recon.bake import bake_pseudo_textures, load_atlases, save_atlases
from uvgan.recon.dataset import CameraRecord, Frame, ManifestEntry, SequenceDataset
from uvgan.recon.model import ReconModel, encode_decode
from uvgan.recon.pruning import adaptive_threshold, consecutive_geodesics, prune_sequence
from uvgan.recon.trainer import ReconTrainer, load_model, reconstruct, refine_camera
from uvgan.synth import synth_data, synth_scene

TINY_MODEL = dict(
    image_size=32,
    latent_dim=8,
    encoder_channels=(8, 8),
    decoder_channels=(8, 8),
    displacement_resolution=8,
    texture_resolution=(16, 32),
)
TINY_RECON = ReconConfig(
    latent_dim=8,
    encoder_channels=(8, 8),
    decoder_channels=(8, 8),
    displacement_resolution=8,
    texture_resolution=(16, 32),
    subdivisions=2,
    log_every=1,
    checkpoint_every=1,
)
SYNTH = SynthConfig(frames=12, resolution=32, subdivisions=2, texture_resolution=(16, 32), displacement_resolution=8)


@pytest.fixture(scope="module")
def sequence_dir(tmp_path_factory):
    directory = tmp_path_factory.mktemp("sequence")
    synth_data(SYNTH, directory, seed=3)
    return directory


@pytest.fixture()
def sequence(sequence_dir):
    return SequenceDataset.load(sequence_dir / "manifest.json")


def _turntable(step_deg, count, flipped=()):
    flip = quat_from_axis_angle((0, 1, 0), 180)
    frames = []
    for i in range(count):
        q = quat_from_axis_angle((0, 1, 0), i * step_deg)
        if i in flipped:
            q = quat_multiply(q, flip)
        frames.append(Frame(i, np.zeros((3, 8, 8)), np.zeros((8, 8)), WeakPerspectiveCamera(q, 0.8)))
    return SequenceDataset(frames)


def test_model_output_shapes():
    model = ReconModel(**TINY_MODEL)
    displacement, texture = encode_decode(model, np.random.default_rng(0).uniform(size=(3, 32, 32)))
    assert displacement.shape == (1, 3, 8, 8)
    assert texture.shape == (1, 3, 16, 32)
    assert np.abs(displacement.data).max() < 1e-2
    assert texture.data.min() >= 0 and texture.data.max() <= 1


def test_model_starts_from_the_template():
    model = ReconModel(**TINY_MODEL)
    template = icosphere(2)
    mesh, texture = reconstruct(model, template, np.random.default_rng(1).uniform(size=(3, 32, 32)))
    assert np.abs(mesh.vertices.data - template.vertices.data).max() < 1e-2
    assert texture.shape == (3, 16, 32)


def test_model_input_validation():
    model = ReconModel(**TINY_MODEL)
    with pytest.raises(ShapeMismatchError):
        encode_decode(model, np.zeros((3, 16, 16)))
    with pytest.raises(ShapeMismatchError):
        encode_decode(model, np.zeros((1, 32, 32)))
    with pytest.raises(InvalidArgumentError):
        ReconModel(**{**TINY_MODEL, "image_size": 30})
    with pytest.raises(InvalidArgumentError):
        model.predict_camera(np.zeros((3, 32, 32)))


def test_camera_head_predicts_a_unit_quaternion():
    model = ReconModel(**TINY_MODEL, camera_head=True)
    camera = model.predict_camera(np.random.default_rng(2).uniform(size=(3, 32, 32)), scale=0.8)
    assert np.linalg.norm(camera.q.data) == pytest.approx(1.0, abs=1e-5)
    assert float(camera.s.data) > 0


def test_manifest_round_trip(sequence, tmp_path):
    assert len(sequence) == 12
    assert [f.index for f in sequence.held_frames()] == [3, 7, 11]
    frame = sequence[4]
    frame.camera_offset.dt.data[...] = [0.05, 0.0]
    copy = sequence.with_pruned([i == 2 for i in range(12)])
    path = copy.save(tmp_path / "elsewhere" / "manifest.json")
    loaded = SequenceDataset.load(path)
    assert [f.pruned for f in loaded] == [i == 2 for i in range(12)]
    assert np.allclose(loaded[4].camera_opt.t.data, [0.05, 0.0])
    assert loaded[5].camera_opt is None
    assert np.allclose(loaded[0].image, sequence[0].image)
    assert quaternion_geodesic(loaded[0].camera_gt.q.data, sequence[0].camera_gt.q.data) < 1e-3


def test_missing_manifest(tmp_path):
    with pytest.raises(MissingArtifactError):
        SequenceDataset.load(tmp_path / "manifest.json")


def test_sample_pair_draws_distinct_training_frames(sequence):
    rng = np.random.default_rng(0)
    for _ in range(20):
        a, b = sequence.sample_pair(rng)
        assert a.index != b.index
        assert a.split == b.split == "train"
    with pytest.raises(InvalidArgumentError):
        sequence.with_pruned([False])


def test_pruning_flags_a_flipped_frame():
    sequence = _turntable(15.0, 10, flipped={5})
    steps = consecutive_geodesics(sequence)
    assert len(steps) == 9
    assert adaptive_threshold(steps) == pytest.approx(60.0, abs=1e-4)
    pruned = prune_sequence(sequence)
    assert [f.pruned for f in pruned] == [i == 5 for i in range(10)]
    again = prune_sequence(pruned)
    assert [f.pruned for f in again] == [f.pruned for f in pruned]


def test_pruning_endpoints_and_floor():
    pruned = prune_sequence(_turntable(15.0, 6, flipped={0}))
    assert [f.pruned for f in pruned] == [True] + [False] * 5
    still = prune_sequence(_turntable(0.0, 5))
    assert not any(f.pruned for f in still)
    assert adaptive_threshold(np.zeros(4)) == 1.0


def test_pruning_validation():
    with pytest.raises(SequenceTooShortError):
        prune_sequence(_turntable(15.0, 2))
    with pytest.raises(InvalidArgumentError):
        prune_sequence(_turntable(15.0, 5), threshold_deg=0)


def test_two_view_needs_eight_frames(sequence):
    short = sequence.with_pruned([i < 5 for i in range(12)])
    with pytest.raises(SequenceTooShortError):
        ReconTrainer(ReconModel(**TINY_MODEL), short, config=TINY_RECON, optim=OptimConfig())


def test_two_view_step_updates_only_the_target_offset(sequence):
    trainer = ReconTrainer(ReconModel(**TINY_MODEL), sequence, config=TINY_RECON, optim=OptimConfig(), seed=1)
    before = {name: p.data.copy() for name, p in trainer.model.named_parameters()}
    record = trainer.train_step_two_view(sequence[0], sequence[1])
    assert np.isfinite(record.total)
    assert 0 <= record.iou <= 1
    assert record.camera_error_deg == pytest.approx(0.0, abs=1.0)
    assert not sequence[1].camera_offset.is_zero()
    assert all(frame.camera_offset.is_zero() for frame in sequence if frame.index != 1)
    changed = [name for name, p in trainer.model.named_parameters() if not np.array_equal(before[name], p.data)]
    assert changed


def test_pruned_frames_are_never_trained(sequence):
    pruned = sequence.with_pruned([i == 0 for i in range(12)])
    trainer = ReconTrainer(ReconModel(**TINY_MODEL), pruned, config=TINY_RECON, optim=OptimConfig())
    with pytest.raises(PrunedFrameError):
        trainer.train_step_two_view(pruned[0], pruned[1])
    with pytest.raises(PrunedFrameError):
        trainer.train_step_two_view(pruned[1], pruned[0])


def test_single_view_step_uses_the_camera_term(sequence):
    config = TINY_RECON.model_copy(update={"mode": "single_view"})
    model = ReconModel.from_config(config, image_size=32)
    trainer = ReconTrainer(model, sequence, config=config, optim=OptimConfig())
    record = trainer.train_step_single_view(sequence[0])
    assert record.camera > 0
    assert record.total == pytest.approx(
        record.perceptual + record.silhouette + 0.00005 * record.smoothness + record.camera, rel=1e-4
    )


@pytest.mark.parametrize("mode", ["two_view", "single_view"])
def test_every_decoder_parameter_gets_gradient(sequence, monkeypatch, mode):
    config = TINY_RECON.model_copy(update={"mode": mode})
    trainer = ReconTrainer(ReconModel.from_config(config, image_size=32), sequence, config=config, optim=OptimConfig())
    # keep the gradients of the first step around
    monkeypatch.setattr(trainer.optimiser, "step", lambda: None)
    if mode == "two_view":
        trainer.train_step_two_view(sequence[0], sequence[1])
    else:
        trainer.train_step_single_view(sequence[0])
    decoders = [
        (f"{prefix}.{name}", p)
        for prefix, decoder in (("deformation", trainer.model.deformation), ("texture", trainer.model.texture))
        for name, p in decoder.named_parameters()
    ]
    silent = [name for name, p in decoders if p.grad is None or not np.any(p.grad)]
    assert not silent


def test_single_view_step_encodes_once(sequence, monkeypatch):
    config = TINY_RECON.model_copy(update={"mode": "single_view"})
    model = ReconModel.from_config(config, image_size=32)
    trainer = ReconTrainer(model, sequence, config=config, optim=OptimConfig())
    calls = []
    forward = model.encoder.forward

    def counting(x):
        calls.append(x.shape)
        return forward(x)

    monkeypatch.setattr(model.encoder, "forward", counting)
    trainer.train_step_single_view(sequence[0])
    assert calls == [(1, 3, 32, 32)]


def test_fit_logs_and_checkpoints(sequence, tmp_path, caplog):
    trainer = ReconTrainer(ReconModel(**TINY_MODEL), sequence, config=TINY_RECON, optim=OptimConfig())
    with caplog.at_level(logging.DEBUG, logger="uvgan.recon.trainer"):
        records = trainer.fit(3, log_path=tmp_path / "log.csv", checkpoint_prefix=tmp_path / "model")
    assert "Reconstruction step 0 took" in caplog.text
    assert 0 < len(records) <= 3
    assert len((tmp_path / "log.csv").read_text().splitlines()) == len(records) + 1
    assert checkpoint_exists(tmp_path / "model")
    model = load_model(tmp_path / "model", TINY_RECON)
    state = trainer.model.state_dict()
    for name, value in model.state_dict().items():
        assert np.allclose(value, state[name])


def test_bake_with_the_true_mesh(sequence_dir, sequence, tmp_path):
    mesh = load_obj(sequence_dir / "gt" / "mesh.obj")
    atlases = bake_pseudo_textures(mesh, sequence, texture_resolution=(16, 32))
    assert [a.frame for a in atlases] == [f.index for f in sequence.unpruned()]
    for atlas in atlases:
        assert atlas.visibility.dtype == bool
        assert atlas.texture.shape == (3, 16, 32)
        assert np.all(atlas.texture[:, ~atlas.visibility] == 0)
    save_atlases(atlases, tmp_path)
    loaded = load_atlases(tmp_path)
    assert [a.frame for a in loaded] == [a.frame for a in atlases]
    with pytest.raises(MissingArtifactError):
        load_atlases(tmp_path / "nothing")


def test_bake_skips_pruned_frames(sequence):
    pruned = sequence.with_pruned([i % 2 == 0 for i in range(12)])
    atlases = bake_pseudo_textures(
        ReconModel(**TINY_MODEL), pruned, texture_resolution=(16, 32), template=icosphere(2)
    )
    assert all(a.frame % 2 == 1 for a in atlases)
    everything = bake_pseudo_textures(
        ReconModel(**TINY_MODEL), pruned, texture_resolution=(16, 32), template=icosphere(2), include_pruned=True
    )
    assert len(everything) > len(atlases)


def _dark_visible_texels(atlases):
    return sum(int(np.all(a.texture[:, a.visibility] < 1 / 255, axis=0).sum()) for a in atlases)


def test_external_masks_leak_black_texels(sequence_dir, tmp_path):
    # eroded masks black out the object's rim, which the projected silhouette still samples
    eroded = synth_data(SYNTH.model_copy(update={"mask_radius": -2}), tmp_path, seed=3)
    mesh = load_obj(sequence_dir / "gt" / "mesh.obj")
    projected = bake_pseudo_textures(mesh, eroded, texture_resolution=(16, 32))
    external = bake_pseudo_textures(mesh, eroded, texture_resolution=(16, 32), image_mask="external")
    assert [a.frame for a in external] == [a.frame for a in projected]
    assert _dark_visible_texels(external) > _dark_visible_texels(projected)


def test_baking_twice_gives_the_same_atlases(sequence):
    model = ReconModel(**TINY_MODEL)
    first = bake_pseudo_textures(model, sequence, texture_resolution=(16, 32), template=icosphere(2))
    second = bake_pseudo_textures(model, sequence, texture_resolution=(16, 32), template=icosphere(2))
    assert len(first) == len(second) > 0
    for a, b in zip(first, second):
        assert a.frame == b.frame
        assert np.array_equal(a.texture, b.texture)
        assert np.array_equal(a.visibility, b.visibility)


def test_refine_camera_moves_only_the_offset(sequence):
    scene = synth_scene(SYNTH, seed=3)
    frame = sequence[2]
    frame.camera_offset.dq.data[...] = [0.0, 0.0, 0.05, 0.0]
    start = frame.optimized_camera()
    errors = refine_camera(frame, scene.mesh, scene.texture, steps=5, sigma=0.05)
    assert len(errors) == 5
    assert all(np.isfinite(errors))
    assert np.array_equal(frame.camera_init.q.data, sequence[2].camera_gt.q.data)
    assert not np.allclose(frame.optimized_camera().q.data, start.q.data)


def test_shipped_manifest_schema_matches_the_models(sequence_dir):
    schema = json.loads((importlib.resources.files("uvgan") / "schemas" / "manifest.schema.json").read_text())
    entry = schema["$defs"]["ManifestEntry"]
    assert set(entry["properties"]) == set(ManifestEntry.model_fields)
    assert set(schema["$defs"]["CameraRecord"]["properties"]) == set(CameraRecord.model_fields)
    for frame in json.loads((sequence_dir / "manifest.json").read_text()):
        assert set(entry["required"]) <= set(frame) <= set(entry["properties"])
