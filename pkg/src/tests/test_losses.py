import numpy as np
import pytest

from uvgan.autodiff.gradcheck import gradcheck
from uvgan.autodiff.tensor import Tensor, backward, precision
from uvgan.exceptions import (
    MissingGroundTruthError,
    NegativeWeightError,
    ResolutionMismatchError,
    ShapeMismatchError,
    SilhouetteRangeError,
)
from uvgan.geometry.camera import WeakPerspectiveCamera, quat_from_axis_angle
from uvgan.losses import (
    FeatureExtractor,
    LossComponents,
    LossWeights,
    camera_loss,
    hinge_discriminator_loss,
    hinge_generator_loss,
    perceptual_loss,
    silhouette_loss,
    total_loss,
)


@pytest.mark.parametrize(
    "observed, rendered, expected",
    [
        ([1.0, 1.0, 0.0, 0.0], [1.0, 1.0, 0.0, 0.0], 0.0),
        ([1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0], 1.0),
        ([1.0, 1.0, 0.0, 0.0], [1.0, 0.0, 0.0, 0.0], 0.5),
        ([0.0, 0.0, 0.0, 0.0], [0.0, 0.0, 0.0, 0.0], 0.0),
        ([0.5, 0.5, 0.0, 0.0], [1.0, 0.0, 0.0, 0.0], 1 - 0.5 / 1.5),
    ],
)
def test_silhouette_loss_values(observed, rendered, expected):
    loss = silhouette_loss(Tensor(observed).reshape(2, 2), Tensor(rendered).reshape(2, 2))
    assert loss.item() == pytest.approx(expected, abs=1e-6)


def test_silhouette_loss_validation():
    with pytest.raises(SilhouetteRangeError):
        silhouette_loss(Tensor([1.5, 0.0]), Tensor([1.0, 0.0]))
    with pytest.raises(SilhouetteRangeError):
        silhouette_loss(Tensor([1.0, 0.0]), Tensor([-0.1, 0.0]))
    with pytest.raises(ShapeMismatchError):
        silhouette_loss(Tensor(np.zeros((4, 4))), Tensor(np.zeros((4, 5))))


def test_silhouette_loss_gradient():
    rng = np.random.default_rng(0)
    observed = (rng.uniform(size=(6, 6)) > 0.5).astype(np.float64)
    with precision(np.float64):
        rendered = Tensor(rng.uniform(0.1, 0.9, (6, 6)), requires_grad=True)
        error = gradcheck(lambda: silhouette_loss(observed, rendered), [rendered])
    assert error < 1e-6


def _components(camera=None):
    return LossComponents(
        perceptual=Tensor(1.0), silhouette=Tensor(1.0), smoothness=Tensor(1.0), camera=camera
    )


def test_total_loss_with_default_weights():
    weights = LossWeights()
    assert total_loss(_components(Tensor(1.0)), weights, include_camera=True).item() == pytest.approx(3.00005)
    assert total_loss(_components(Tensor(1.0)), weights, include_camera=False).item() == pytest.approx(2.00005)
    with pytest.raises(MissingGroundTruthError):
        total_loss(_components(), weights, include_camera=True)


def test_total_loss_gradient_is_the_weight():
    weights = LossWeights(perceptual=0.7, silhouette=2.5, camera=0.3, smoothness=0.00005)
    components = LossComponents(
        perceptual=Tensor(0.4, requires_grad=True),
        silhouette=Tensor(1.3, requires_grad=True),
        smoothness=Tensor(8.0, requires_grad=True),
        camera=Tensor(0.2, requires_grad=True),
    )
    backward(total_loss(components, weights, include_camera=True))
    for name in ("perceptual", "silhouette", "smoothness", "camera"):
        assert float(getattr(components, name).grad) == pytest.approx(getattr(weights, name), rel=1e-6)


def test_negative_weights_are_rejected():
    with pytest.raises(NegativeWeightError):
        total_loss(_components(), LossWeights(silhouette=-1.0), include_camera=False)


def test_perceptual_loss_of_identical_images_is_zero():
    rng = np.random.default_rng(1)
    image = Tensor(rng.uniform(size=(3, 32, 32)))
    extractor = FeatureExtractor(seed=0)
    assert perceptual_loss(image, image, extractor).item() == 0.0


def test_perceptual_loss_grows_with_the_perturbation():
    rng = np.random.default_rng(2)
    image = rng.uniform(size=(3, 32, 32))
    noise = rng.normal(size=image.shape)
    extractor = FeatureExtractor(seed=0)
    small = perceptual_loss(Tensor(image), Tensor(image + 0.01 * noise), extractor).item()
    large = perceptual_loss(Tensor(image), Tensor(image + 0.1 * noise), extractor).item()
    assert 0 < small < large


def test_perceptual_loss_gradient():
    rng = np.random.default_rng(5)
    image = rng.uniform(size=(3, 8, 8))
    with precision(np.float64):
        extractor = FeatureExtractor((4, 6), seed=1)
        rendered = Tensor(image + rng.normal(0.0, 0.2, image.shape), requires_grad=True)
        error = gradcheck(lambda: perceptual_loss(image, rendered, extractor), [rendered])
    assert error < 1e-4


def test_perceptual_loss_needs_equal_shapes():
    with pytest.raises(ResolutionMismatchError):
        perceptual_loss(Tensor(np.zeros((3, 32, 32))), Tensor(np.zeros((3, 16, 16))), FeatureExtractor())


def test_feature_extractor_is_seeded():
    images = np.random.default_rng(3).uniform(size=(2, 3, 16, 16))
    a = FeatureExtractor(seed=4).pooled(images)
    b = FeatureExtractor(seed=4).pooled(images)
    assert a.shape == (2, 16 + 32 + 64)
    assert np.array_equal(a, b)
    assert FeatureExtractor(seed=4).parameters() == []


def test_camera_loss_ignores_quaternion_sign():
    q = quat_from_axis_angle((0, 1, 0), 40)
    truth = WeakPerspectiveCamera(q, 0.8, (0.1, 0.0))
    flipped = WeakPerspectiveCamera(-q, 0.8, (0.1, 0.0))
    assert camera_loss(flipped, truth).item() == pytest.approx(0.0, abs=1e-12)
    shifted = WeakPerspectiveCamera(q, 1.0, (0.1, 0.3))
    assert camera_loss(shifted, truth).item() == pytest.approx(0.2**2 + 0.3**2)
    with pytest.raises(MissingGroundTruthError):
        camera_loss(truth, None)


def test_hinge_losses():
    real = Tensor([2.0, 0.5, -1.0])
    fake = Tensor([-2.0, 0.0, 1.0])
    # relu(1 - real) = [0, 0.5, 2], relu(1 + fake) = [0, 1, 2]
    assert hinge_discriminator_loss(real, fake).item() == pytest.approx(2.5 / 3 + 3.0 / 3)
    assert hinge_generator_loss(fake).item() == pytest.approx(1.0 / 3)
