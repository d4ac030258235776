import threading

import numpy as np
import pytest

from uvgan.autodiff import ops
from uvgan.autodiff.gradcheck import gradcheck
from uvgan.autodiff.nn import BatchNorm, Conv2d, Linear, Module, Parameter
from uvgan.autodiff.tensor import Tensor, backward, current_tape, default_dtype, grad_enabled, no_grad, precision
from uvgan.exceptions import EmptyTapeError, NonScalarLossError, ShapeMismatchError


def _away_from_zero(rng, shape):
    return rng.uniform(0.2, 1.0, shape) * rng.choice([-1.0, 1.0], shape)


def _positive(rng, shape):
    return rng.uniform(0.5, 2.0, shape)


ELEMENTWISE = [
    ("add", lambda a, b: ops.sum(a + b), _away_from_zero, _away_from_zero),
    ("sub", lambda a, b: ops.sum((a - b) * (a - b)), _away_from_zero, _away_from_zero),
    ("mul", lambda a, b: ops.sum(a * b * a), _away_from_zero, _away_from_zero),
    ("div", lambda a, b: ops.sum(a / b), _away_from_zero, _positive),
    ("pow", lambda a, b: ops.sum(ops.power(a, b)), _positive, _away_from_zero),
]

UNARY = [
    ("relu", lambda x: ops.sum(ops.relu(x) * x), _away_from_zero),
    ("leaky_relu", lambda x: ops.sum(ops.leaky_relu(x, 0.2) * x), _away_from_zero),
    ("tanh", lambda x: ops.sum(ops.tanh(x)), _away_from_zero),
    ("sigmoid", lambda x: ops.sum(ops.sigmoid(x) * x), _away_from_zero),
    ("softplus", lambda x: ops.sum(ops.softplus(x)), _away_from_zero),
    ("exp", lambda x: ops.sum(ops.exp(x)), _away_from_zero),
    ("log", lambda x: ops.sum(ops.log(x)), _positive),
    ("sqrt", lambda x: ops.sum(ops.sqrt(x)), _positive),
    ("norm", lambda x: ops.norm(x), _away_from_zero),
    ("softmax", lambda x: ops.sum(ops.softmax(x, axis=-1) * ops.softmax(x, axis=-1)), _away_from_zero),
    ("mean", lambda x: ops.mean(x * x, axis=0), None),
    ("transpose", lambda x: ops.sum(ops.transpose(x) * ops.transpose(x)), _away_from_zero),
    ("flip", lambda x: ops.sum(ops.flip(x, axis=1) * x), _away_from_zero),
    ("getitem", lambda x: ops.sum(x[np.array([0, 0, 2])] * 2.0), _away_from_zero),
]


@pytest.mark.parametrize("name, fn, make_a, make_b", ELEMENTWISE)
def test_elementwise_gradients(name, fn, make_a, make_b):
    rng = np.random.default_rng(0)
    with precision(np.float64):
        a = Tensor(make_a(rng, (3, 4)), requires_grad=True)
        b = Tensor(make_b(rng, (3, 4)), requires_grad=True)
        error = gradcheck(lambda: fn(a, b), [a, b])
    assert error < 1e-6, "%s gradient is off by %.3g" % (name, error)


@pytest.mark.parametrize("name, fn, make", UNARY)
def test_unary_gradients(name, fn, make):
    rng = np.random.default_rng(1)
    with precision(np.float64):
        x = Tensor((make or _away_from_zero)(rng, (3, 4)), requires_grad=True)
        if name == "mean":
            error = gradcheck(lambda: ops.sum(fn(x)), [x])
        else:
            error = gradcheck(lambda: fn(x), [x])
    assert error < 1e-6, "%s gradient is off by %.3g" % (name, error)


def test_broadcast_gradient_is_reduced():
    rng = np.random.default_rng(2)
    with precision(np.float64):
        a = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
        b = Tensor(rng.normal(size=(3,)), requires_grad=True)
        error = gradcheck(lambda: ops.sum((a * b + b) ** 2), [a, b])
        assert b.grad.shape == (3,)
    assert error < 1e-6


def _source_index(index, shape):
    # trailing alignment, size-1 axes repeat
    return tuple(0 if size == 1 else i for i, size in zip(index[len(index) - len(shape) :], shape))


@pytest.mark.parametrize(
    "shape_a, shape_b",
    [((2, 3, 4), (3, 1)), ((4, 1), (1, 5)), ((1, 3, 1), (2, 1, 4)), ((5,), (2, 1, 5)), ((3, 2), ())],
)
def test_broadcasting_matches_a_scalar_loop(shape_a, shape_b):
    rng = np.random.default_rng(sum(shape_a) + 7 * sum(shape_b))
    with precision(np.float64):
        a = Tensor(rng.normal(size=shape_a), requires_grad=True)
        b = Tensor(rng.normal(size=shape_b), requires_grad=True)
        out = a * b
        backward(ops.sum(out))
    expected = np.zeros(np.broadcast_shapes(shape_a, shape_b))
    grad_a = np.zeros(shape_a)
    grad_b = np.zeros(shape_b)
    for index in np.ndindex(*expected.shape):
        ia, ib = _source_index(index, shape_a), _source_index(index, shape_b)
        expected[index] = a.data[ia] * b.data[ib]
        grad_a[ia] += b.data[ib]
        grad_b[ib] += a.data[ia]
    assert out.shape == expected.shape
    assert np.allclose(out.data, expected, rtol=0, atol=1e-12)
    assert np.allclose(a.grad, grad_a, rtol=0, atol=1e-12)
    assert np.allclose(b.grad, grad_b, rtol=0, atol=1e-12)


def test_replayed_backward_is_bit_identical():
    rng = np.random.default_rng(9)
    x = rng.normal(size=(4, 6))
    first = Linear(6, 5, rng=np.random.default_rng(10))
    second = Linear(6, 5, rng=np.random.default_rng(10))
    kernel = rng.normal(size=(1, 1, 3, 3))
    for layer in (first, second):
        hidden = ops.tanh(layer(Tensor(x)))
        image = ops.conv2d(hidden.reshape(1, 1, 4, 5), Tensor(kernel), padding=1)
        backward(ops.sum(ops.softmax(image.reshape(1, -1), axis=-1) * ops.sum(hidden)))
    assert np.array_equal(first.weight.grad, second.weight.grad)
    assert np.array_equal(first.bias.grad, second.bias.grad)


def test_incompatible_broadcast_names_both_shapes():
    with pytest.raises(ShapeMismatchError) as info:
        Tensor(np.ones((2, 3))) + Tensor(np.ones((4,)))
    assert info.value.shapes == ((2, 3), (4,))


@pytest.mark.parametrize("stride, padding", [(1, 0), (1, 1), (2, 1)])
def test_conv2d_gradient(stride, padding):
    rng = np.random.default_rng(3)
    with precision(np.float64):
        x = Tensor(rng.normal(size=(2, 2, 5, 5)), requires_grad=True)
        w = Tensor(rng.normal(size=(3, 2, 3, 3)), requires_grad=True)
        b = Tensor(rng.normal(size=(3,)), requires_grad=True)

        def fn():
            y = ops.conv2d(x, w, b, stride=stride, padding=padding)
            return ops.sum(y * y)

        error = gradcheck(fn, [x, w, b])
    assert error < 1e-4


def test_conv2d_output_shape():
    y = ops.conv2d(np.zeros((1, 3, 9, 7)), np.zeros((4, 3, 3, 3)), stride=2, padding=1)
    assert y.shape == (1, 4, 5, 4)


def test_matmul_and_cross_gradients():
    rng = np.random.default_rng(4)
    with precision(np.float64):
        a = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
        b = Tensor(rng.normal(size=(3, 2)), requires_grad=True)
        c = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
        error = gradcheck(lambda: ops.sum(ops.matmul(ops.cross(a, c), b) ** 2), [a, b, c])
    assert error < 1e-4


def test_concat_stack_reshape_gradients():
    rng = np.random.default_rng(5)
    with precision(np.float64):
        a = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
        b = Tensor(rng.normal(size=(2, 3)), requires_grad=True)

        def fn():
            joined = ops.concat([a, b * 2.0], axis=1).reshape(3, 4)
            stacked = ops.stack([a, b], axis=0)
            return ops.sum(joined * joined) + ops.sum(stacked[1] * a)

        error = gradcheck(fn, [a, b])
    assert error < 1e-4


def test_bilinear_sample_gradient():
    rng = np.random.default_rng(6)
    with precision(np.float64):
        texture = Tensor(rng.uniform(size=(3, 6, 8)), requires_grad=True)
        # keep the coordinates off texel centres so the finite differences stay on one bilinear patch
        uv = Tensor(np.array([[0.21, 0.37], [0.63, 0.52], [0.97, 0.71]]), requires_grad=True)
        error = gradcheck(lambda: ops.sum(ops.bilinear_sample(texture, uv) ** 2), [texture, uv])
    assert error < 1e-4


def test_bilinear_sample_hits_texel_centres():
    texture = np.arange(12, dtype=np.float64).reshape(1, 3, 4)
    uv = np.array([[(1 + 0.5) / 4, (2 + 0.5) / 3]])
    assert ops.bilinear_sample(texture, uv).data[0, 0] == pytest.approx(texture[0, 2, 1])


def test_upsample_and_batch_norm_gradients():
    rng = np.random.default_rng(7)
    with precision(np.float64):
        x = Tensor(rng.normal(size=(2, 3, 2, 2)), requires_grad=True)
        norm = BatchNorm(3)
        weights = Tensor(rng.normal(size=(2, 3, 4, 4)))

        def fn():
            return ops.sum(ops.upsample_nearest(norm(x), 2) * weights)

        error = gradcheck(fn, [x, norm.gamma, norm.beta])
    assert error < 1e-4


def test_modules_find_their_parameters():
    class Net(Module):
        def __init__(self):
            super().__init__()
            rng = np.random.default_rng(0)
            self.layers = [Linear(4, 3, rng=rng), Linear(3, 2, rng=rng, bias=False)]
            self.conv = Conv2d(1, 1, 3, rng=rng)
            self.scale = Parameter(np.ones(1))
            self.skipped = None

    names = [name for name, _ in Net().named_parameters()]
    assert names == ["layers.0.weight", "layers.0.bias", "layers.1.weight", "conv.weight", "conv.bias", "scale"]


def test_state_dict_round_trip():
    rng = np.random.default_rng(0)
    a, b = Linear(4, 3, rng=rng), Linear(4, 3, rng=rng)
    assert not np.array_equal(a.weight.data, b.weight.data)
    b.load_state_dict(a.state_dict())
    assert np.array_equal(a.weight.data, b.weight.data)


def test_backward_sets_grad_and_clears_tape():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    loss = ops.sum(x * x)
    assert len(current_tape()) > 0
    backward(loss)
    assert np.allclose(x.grad, [2.0, 4.0, 6.0])
    assert len(current_tape()) == 0


def test_non_scalar_loss():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(NonScalarLossError):
        backward(x * 2.0)
    current_tape().clear()


def test_empty_tape():
    current_tape().clear()
    with pytest.raises(EmptyTapeError):
        backward(Tensor(1.0))


def test_no_grad_records_nothing():
    current_tape().clear()
    x = Tensor([1.0, 2.0], requires_grad=True)
    with no_grad():
        assert not grad_enabled()
        y = ops.sum(x * x)
    assert grad_enabled()
    assert not y.requires_grad
    assert len(current_tape()) == 0


def test_tapes_are_per_thread():
    current_tape().clear()
    x = Tensor([1.0], requires_grad=True)
    _ = x * 2.0
    seen = []

    def worker():
        seen.append(len(current_tape()))

    thread = threading.Thread(target=worker)
    thread.start()
    thread.join()
    assert seen == [0]
    assert len(current_tape()) == 1
    current_tape().clear()


def test_precision_switches_default_dtype():
    assert default_dtype() == np.float32
    with precision(np.float64):
        assert Tensor([1.0]).dtype == np.float64
    assert Tensor([1.0]).dtype == np.float32
