import json
import logging

import numpy as np
import pytest

from uvgan.autodiff import ops
from uvgan.autodiff.checkpoint import checkpoint_exists
from uvgan.autodiff.gradcheck import gradcheck
from uvgan.autodiff.optim import Adam
from uvgan.autodiff.tensor import Tensor, current_tape, no_grad, precision
from uvgan.config import GanConfig
from uvgan.exceptions import InvalidArgumentError, NonFiniteLossError, ShapeMismatchError
from uvgan.gan.attention import PositionAttention, SelfAttention
from uvgan.gan.discriminator import Discriminator
from uvgan.gan.generator import Generator, sample_textures
from uvgan.gan.trainer import GanBatch, GanTrainer, gan_train_step, load_generator, make_gan_batch, stack_atlases
from uvgan.render.baking import TextureAtlas

TINY_GAN = GanConfig(
    latent_dim=16,
    resolution=(32, 32),
    base_channels=16,
    min_channels=8,
    heads=2,
    key_dim=8,
    embedding_channels=4,
    disc_channels=8,
    batch_size=4,
    eval_every=2,
    eval_samples=4,
    checkpoint_every=2,
    log_every=1,
)


def _atlases(count=6, resolution=(32, 32), seed=0):
    rng = np.random.default_rng(seed)
    atlases = []
    for i in range(count):
        visibility = np.zeros(resolution, dtype=bool)
        visibility[:, i : i + resolution[1] // 2] = True
        texture = rng.uniform(size=(3, *resolution)).astype(np.float32) * visibility
        atlases.append(TextureAtlas(texture, visibility, frame=i))
    return atlases


def test_position_attention_rows_sum_to_one():
    attention = PositionAttention(8, (4, 4), rng=np.random.default_rng(0), heads=2, key_dim=4)
    weights = attention.attention_map().data
    assert weights.shape == (2, 16, 16)
    assert np.all(weights >= 0)
    assert np.allclose(weights.sum(axis=-1), 1.0, atol=1e-5)


def test_position_attention_map_ignores_the_input():
    attention = PositionAttention(8, (4, 4), rng=np.random.default_rng(1), heads=2, key_dim=4)
    before = attention.attention_map().data.copy()
    rng = np.random.default_rng(2)
    attention(Tensor(rng.normal(size=(2, 8, 4, 4))))
    attention(Tensor(rng.normal(size=(2, 8, 4, 4)) * 10))
    assert np.array_equal(attention.attention_map().data, before)


def test_zero_value_projection_is_an_identity():
    features = Tensor(np.random.default_rng(3).normal(size=(2, 8, 4, 4)))
    for block in (
        PositionAttention(8, (4, 4), rng=np.random.default_rng(4), heads=2, key_dim=4, zero_value=True),
        SelfAttention(8, rng=np.random.default_rng(4), heads=2, key_dim=4, zero_value=True),
    ):
        assert np.array_equal(block(features).data, features.data)


def test_attention_validation():
    with pytest.raises(InvalidArgumentError):
        PositionAttention(6, (4, 4), rng=np.random.default_rng(0), heads=4)
    attention = PositionAttention(8, (4, 4), rng=np.random.default_rng(0), heads=2, key_dim=4)
    with pytest.raises(ShapeMismatchError):
        attention(Tensor(np.zeros((1, 8, 8, 8))))


def test_self_attention_map_depends_on_the_input():
    attention = SelfAttention(8, rng=np.random.default_rng(5), heads=2, key_dim=4)
    rng = np.random.default_rng(6)
    a = attention.attention_map(Tensor(rng.normal(size=(1, 8, 4, 4)))).data
    b = attention.attention_map(Tensor(rng.normal(size=(1, 8, 4, 4)))).data
    assert a.shape == (1, 2, 16, 16)
    assert not np.allclose(a, b)


@pytest.mark.parametrize("symmetry", ["height", "width", "none"])
@pytest.mark.parametrize("attention", ["position", "self", "none"])
def test_generator_shapes_and_symmetry(symmetry, attention):
    generator = Generator.from_config(TINY_GAN.model_copy(update={"symmetry": symmetry, "attention": attention}))
    out = generator(np.random.default_rng(0).standard_normal((2, 16))).data
    assert out.shape == (2, 3, 32, 32)
    assert out.min() >= -1 and out.max() <= 1
    if symmetry == "height":
        assert np.array_equal(out, out[:, :, ::-1])
    elif symmetry == "width":
        assert np.array_equal(out, out[:, :, :, ::-1])


def test_generator_validation():
    generator = Generator.from_config(TINY_GAN)
    with pytest.raises(ShapeMismatchError):
        generator(np.zeros((2, 15)))
    with pytest.raises(InvalidArgumentError):
        Generator(resolution=(6, 6))
    with pytest.raises(InvalidArgumentError):
        Generator(resolution=(33, 32))


def test_sampling_is_deterministic_in_eval_mode():
    generator = Generator.from_config(TINY_GAN)
    a = sample_textures(generator, 9, seed=11)
    b = sample_textures(generator, 9, seed=11)
    assert a.shape == (9, 3, 32, 32)
    assert a.min() >= 0 and a.max() <= 1
    assert np.array_equal(a, b)
    assert generator.training
    assert not np.array_equal(a, sample_textures(generator, 9, seed=12))
    with pytest.raises(InvalidArgumentError):
        sample_textures(generator, 0, seed=0)


def test_discriminator_output_shapes():
    discriminator = Discriminator.from_config(TINY_GAN)
    textures = np.random.default_rng(0).uniform(-1, 1, (3, 3, 32, 32))
    large, small = discriminator(textures, np.ones((3, 1, 32, 32)))
    assert large.shape == (3, 1, 2, 2)
    assert small.shape == (3, 1, 4, 4)
    assert discriminator.large.receptive_field == 31
    assert discriminator.small.receptive_field == 15


def test_discriminator_treats_batch_items_independently():
    discriminator = Discriminator.from_config(TINY_GAN)
    rng = np.random.default_rng(1)
    textures = rng.uniform(-1, 1, (4, 3, 32, 32))
    visibility = (rng.uniform(size=(4, 1, 32, 32)) > 0.5).astype(np.float32)
    order = np.array([2, 0, 3, 1])
    with no_grad():
        large, small = discriminator(textures, visibility)
        large_p, small_p = discriminator(textures[order], visibility[order])
    assert np.allclose(large_p.data, large.data[order], atol=1e-5)
    assert np.allclose(small_p.data, small.data[order], atol=1e-5)


def test_discriminator_edge_cases():
    discriminator = Discriminator.from_config(TINY_GAN)
    with no_grad():
        large, small = discriminator(np.zeros((2, 3, 32, 32)), np.zeros((2, 1, 32, 32)))
    assert np.all(np.isfinite(large.data)) and np.all(np.isfinite(small.data))
    bare = Discriminator(resolution=(32, 32), embedding_channels=0, channels=8)
    assert bare.embedding is None
    assert all(name != "embedding" for name, _ in bare.named_parameters())
    with no_grad():
        assert bare(np.zeros((1, 3, 32, 32)), np.ones((1, 32, 32)))[0].shape == (1, 1, 2, 2)
    with pytest.raises(ShapeMismatchError):
        discriminator(np.zeros((1, 3, 16, 16)), np.zeros((1, 1, 16, 16)))
    with pytest.raises(InvalidArgumentError):
        Discriminator(resolution=(40, 40))


def _patch_at(column, resolution=(64, 96), seed=7):
    texture = np.zeros((1, 3, *resolution))
    texture[:, :, 24:40, column : column + 16] = np.random.default_rng(seed).uniform(-1, 1, (1, 3, 16, 16))
    return texture


@pytest.mark.parametrize("embedding_channels", [0, 4])
def test_discriminator_position_sensitivity(embedding_channels):
    discriminator = Discriminator(resolution=(64, 96), embedding_channels=embedding_channels, channels=8, seed=3)
    visibility = np.ones((1, 1, 64, 96))
    with no_grad():
        # a 16 pixel shift moves the coarse logit map by one cell
        left, _ = discriminator(_patch_at(24), visibility)
        right, _ = discriminator(_patch_at(40), visibility)
    # cells whose receptive field stays inside the image
    shifted = np.allclose(left.data[..., 1:3, 1:5], right.data[..., 1:3, 2:6], atol=1e-5)
    assert shifted == (embedding_channels == 0)


def test_position_attention_gradient_wrt_the_embedding():
    rng = np.random.default_rng(9)
    with precision(np.float64):
        attention = PositionAttention(4, (3, 3), rng=np.random.default_rng(10), heads=2, key_dim=2)
        features = Tensor(rng.normal(size=(2, 4, 3, 3)))
        weights = Tensor(rng.normal(size=(2, 4, 3, 3)))
        error = gradcheck(lambda: ops.sum(attention(features) * weights), [attention.embedding])
    assert error < 1e-4


def test_stacking_atlases():
    textures, visibility = stack_atlases(_atlases(3))
    assert textures.shape == (3, 3, 32, 32)
    assert visibility.shape == (3, 1, 32, 32)
    batch = make_gan_batch(textures, visibility, [2, 0])
    assert len(batch) == 2
    assert np.all(batch.real[batch.visibility.repeat(3, axis=1) == 0] == 0)
    assert batch.real.min() >= -1 and batch.real.max() <= 1
    with pytest.raises(ShapeMismatchError):
        stack_atlases(_atlases(1) + _atlases(1, resolution=(16, 16)))
    with pytest.raises(ShapeMismatchError):
        GanBatch(np.zeros((2, 3, 8, 8)), np.zeros((2, 1, 4, 4)))


def test_train_step_updates_both_networks():
    generator = Generator.from_config(TINY_GAN)
    discriminator = Discriminator.from_config(TINY_GAN, seed=1)
    opt_g = Adam(generator.parameters(), lr=2e-4, betas=(0.0, 0.9))
    opt_d = Adam(discriminator.parameters(), lr=2e-4, betas=(0.0, 0.9))
    textures, visibility = stack_atlases(_atlases(4))
    batch = make_gan_batch(textures, visibility, [0, 1, 2, 3])
    d_embedding = discriminator.embedding.data.copy()
    g_embedding = generator.attention.embedding.data.copy()
    record = gan_train_step(generator, discriminator, batch, opt_g, opt_d, rng=np.random.default_rng(0), step=3)
    assert record.step == 3
    assert np.isfinite(record.d_loss) and np.isfinite(record.g_loss)
    assert not np.array_equal(discriminator.embedding.data, d_embedding)
    assert not np.array_equal(generator.attention.embedding.data, g_embedding)
    assert len(current_tape()) == 0


def test_non_finite_loss_names_the_checkpoint():
    generator = Generator.from_config(TINY_GAN)
    discriminator = Discriminator.from_config(TINY_GAN, seed=1)
    textures, visibility = stack_atlases(_atlases(2))
    batch = make_gan_batch(textures, visibility, [0, 1])
    batch.real[0, 0, 0, 0] = np.nan
    with pytest.raises(NonFiniteLossError) as info:
        gan_train_step(
            generator,
            discriminator,
            batch,
            Adam(generator.parameters()),
            Adam(discriminator.parameters()),
            rng=np.random.default_rng(0),
            checkpoint="gan/last",
        )
    assert info.value.checkpoint == "gan/last"
    assert len(current_tape()) == 0


def test_trainer_rejects_mismatched_atlases():
    with pytest.raises(ShapeMismatchError):
        GanTrainer(TINY_GAN, _atlases(4, resolution=(16, 16)))


def test_trainer_fit(tmp_path, caplog):
    trainer = GanTrainer(TINY_GAN, _atlases(6), seed=2)
    with caplog.at_level(logging.DEBUG, logger="uvgan.gan.trainer"):
        records = trainer.fit(
            3,
            log_path=tmp_path / "log.csv",
            eval_log_path=tmp_path / "eval.csv",
            checkpoint_prefix=tmp_path / "last",
        )
    assert "GAN step 2 took" in caplog.text
    assert "Feature distance at step 3 took" in caplog.text
    assert [r.step for r in records] == [0, 1, 2]
    # before the first step, after step 2 and after the last one
    assert [step for step, _ in trainer.history] == [0, 2, 3]
    assert checkpoint_exists(tmp_path / "last")
    assert checkpoint_exists(tmp_path / "last_best")
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["steps"] == 3
    assert summary["best_feature_distance"] == pytest.approx(min(d for _, d in trainer.history))
    assert summary["best_step"] == trainer.best[1]

    generator = load_generator(tmp_path / "last", TINY_GAN)
    assert not generator.training
    trainer.generator.eval()
    assert np.allclose(sample_textures(generator, 2, seed=0), sample_textures(trainer.generator, 2, seed=0))
