import numpy as np
import pytest

from uvgan.autodiff import ops
from uvgan.autodiff.gradcheck import gradcheck
from uvgan.autodiff.tensor import Tensor, precision
from uvgan.exceptions import InvalidCameraError, NonFiniteDeformationError, SubdivisionRangeError, TopologyError
from uvgan.geometry.camera import (
    CameraOffset,
    WeakPerspectiveCamera,
    compose_camera,
    project,
    quat_from_axis_angle,
    quat_multiply,
    quaternion_geodesic,
    rotation_matrix,
)
from uvgan.geometry.mesh import TriMesh, apply_deformation, icosphere, load_obj, save_obj, smoothness_loss


@pytest.mark.parametrize("k", [0, 1, 2, 3])
def test_icosphere_counts(k):
    mesh = icosphere(k)
    assert mesh.num_vertices == 10 * 4**k + 2
    assert mesh.num_faces == 20 * 4**k
    assert np.allclose(np.linalg.norm(mesh.vertices.data, axis=1), 1.0)
    assert mesh.uv.min() >= 0 and mesh.uv.max() <= 1


@pytest.mark.parametrize("k", [-1, 7])
def test_icosphere_range(k):
    with pytest.raises(SubdivisionRangeError):
        icosphere(k)


def test_icosphere_faces_point_outwards():
    mesh = icosphere(2)
    v = mesh.vertices.data[mesh.faces]
    volume = np.einsum("ij,ij->i", v[:, 0], np.cross(v[:, 1], v[:, 2])).sum() / 6
    assert volume > 0
    pairs, boundary = mesh.edge_faces
    assert boundary == 0
    assert len(pairs) == mesh.num_faces * 3 // 2


@pytest.mark.parametrize(
    "q, s",
    [
        ([1.0, 0.0, 0.0, 0.1], 1.0),
        ([1.0, 0.0, 0.0, 0.0], 0.0),
        ([1.0, 0.0, 0.0, 0.0], -1.0),
        ([np.nan, 0.0, 0.0, 0.0], 1.0),
    ],
)
def test_camera_validation(q, s):
    with pytest.raises(InvalidCameraError):
        WeakPerspectiveCamera(q, s)


def test_camera_dict_round_trip():
    camera = WeakPerspectiveCamera(quat_from_axis_angle((0, 1, 0), 30), 0.8, (0.1, -0.2))
    again = WeakPerspectiveCamera.from_dict(camera.to_dict())
    assert np.allclose(again.q.data, camera.q.data)
    assert float(again.s.data) == pytest.approx(0.8)
    assert np.allclose(again.t.data, [0.1, -0.2])
    with pytest.raises(InvalidCameraError):
        WeakPerspectiveCamera.from_dict({"s": 1.0})


def test_zero_offset_is_bit_exact():
    init = WeakPerspectiveCamera(quat_from_axis_angle((1, 2, 3), 47), 0.7, (0.05, 0.1))
    camera = compose_camera(init, CameraOffset.zeros())
    assert np.array_equal(camera.q.data, init.q.data)
    assert np.array_equal(camera.s.data, init.s.data)
    assert np.array_equal(camera.t.data, init.t.data)


def test_offset_composition():
    init = WeakPerspectiveCamera.identity(0.5)
    offset = CameraOffset(dq=np.array([0.0, 0.0, 1.0, 0.0]), ds=np.array(np.log(2.0)), dt=np.array([0.1, 0.2]))
    camera = compose_camera(init, offset)
    assert np.allclose(camera.q.data, np.array([1.0, 0.0, 1.0, 0.0]) / np.sqrt(2), atol=1e-6)
    assert float(camera.s.data) == pytest.approx(1.0, rel=1e-5)
    assert np.allclose(camera.t.data, [0.1, 0.2])
    with pytest.raises(InvalidCameraError):
        compose_camera(init, CameraOffset(dq=np.array([-1.0, 0.0, 0.0, 0.0])))


@pytest.mark.parametrize(
    "q1, q2, expected",
    [
        (quat_from_axis_angle((0, 1, 0), 0), quat_from_axis_angle((0, 1, 0), 90), 90.0),
        (quat_from_axis_angle((0, 1, 0), 10), quat_from_axis_angle((0, 1, 0), 190), 180.0),
        (quat_from_axis_angle((1, 0, 0), 30), -quat_from_axis_angle((1, 0, 0), 30), 0.0),
        (quat_from_axis_angle((0, 0, 1), 350), quat_from_axis_angle((0, 0, 1), 10), 20.0),
    ],
)
def test_quaternion_geodesic(q1, q2, expected):
    assert quaternion_geodesic(q1, q2) == pytest.approx(expected, abs=1e-4)
    assert quaternion_geodesic(q2, q1) == pytest.approx(expected, abs=1e-4)


def test_geodesic_rejects_non_unit():
    with pytest.raises(InvalidCameraError):
        quaternion_geodesic([2.0, 0.0, 0.0, 0.0], [1.0, 0.0, 0.0, 0.0])


def test_quat_multiply_applies_right_first():
    a = quat_from_axis_angle((0, 1, 0), 90)
    b = quat_from_axis_angle((1, 0, 0), 90)
    combined = rotation_matrix(quat_multiply(a, b))
    assert np.allclose(combined, rotation_matrix(a) @ rotation_matrix(b))
    assert np.allclose(rotation_matrix(a) @ [0, 0, 1], [1, 0, 0], atol=1e-12)


def test_project_is_orthographic_with_scale():
    camera = WeakPerspectiveCamera.identity(0.5)
    camera.t.data[...] = [0.1, 0.0]
    screen, depth = project(camera, Tensor(np.array([[1.0, 2.0, 3.0]])))
    assert np.allclose(screen.data, [[0.6, 1.0]])
    assert np.allclose(depth.data, [3.0])


@pytest.mark.parametrize("alpha", [0.5, 1.7, 3.0])
def test_project_scales_about_the_translation(alpha):
    rng = np.random.default_rng(4)
    vertices = rng.normal(size=(20, 3))
    q = quat_from_axis_angle((0.3, 1, -0.2), 65)
    t = np.array([0.2, -0.35])
    with precision(np.float64):
        screen, depth = project(WeakPerspectiveCamera(q, 0.6, t), Tensor(vertices))
        scaled, scaled_depth = project(WeakPerspectiveCamera(q, 0.6 * alpha, t), Tensor(vertices))
    assert np.allclose(scaled.data - t, alpha * (screen.data - t), rtol=0, atol=1e-12)
    assert np.allclose(scaled_depth.data, depth.data)


def test_project_gradient():
    rng = np.random.default_rng(0)
    with precision(np.float64):
        vertices = Tensor(rng.normal(size=(5, 3)), requires_grad=True)
        q = Tensor(quat_from_axis_angle((1, 1, 0), 40), requires_grad=True)
        s = Tensor(0.8, requires_grad=True)
        t = Tensor([0.1, -0.1], requires_grad=True)
        camera = WeakPerspectiveCamera(q, s, t)

        def fn():
            screen, depth = project(camera, vertices)
            return ops.sum(screen * screen) + ops.sum(depth * screen[:, 0])

        error = gradcheck(fn, [vertices, q, s, t])
    assert error < 1e-4


def test_zero_deformation_keeps_template():
    template = icosphere(1)
    mesh = apply_deformation(template, Tensor(np.zeros((3, 8, 16))))
    assert np.allclose(mesh.vertices.data, template.vertices.data)
    assert mesh.faces is template.faces


def test_deformation_is_differentiable():
    rng = np.random.default_rng(1)
    template = icosphere(1)
    with precision(np.float64):
        displacement = Tensor(rng.normal(0, 0.05, (3, 4, 8)), requires_grad=True)
        error = gradcheck(lambda: smoothness_loss(apply_deformation(template, displacement)), [displacement])
    assert error < 1e-4


def test_non_finite_deformation():
    field = np.zeros((3, 4, 8))
    field[0] = np.inf
    with pytest.raises(NonFiniteDeformationError):
        apply_deformation(icosphere(0), Tensor(field))


def _two_faces(third):
    vertices = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], third])
    faces = np.array([[0, 1, 2], [0, 2, 3]])
    return TriMesh(Tensor(vertices), faces, np.zeros((4, 2)), np.zeros((2, 3, 2)))


@pytest.mark.parametrize("third, expected", [([-1.0, 0.0, 0.0], 0.0), ([0.0, 0.0, 1.0], 1.0)])
def test_smoothness_values(third, expected):
    mesh = _two_faces(third)
    assert smoothness_loss(mesh, closed=False).item() == pytest.approx(expected, abs=1e-6)
    with pytest.raises(TopologyError):
        smoothness_loss(mesh)


def test_sphere_is_smoother_when_finer():
    coarse = smoothness_loss(icosphere(1)).item()
    fine = smoothness_loss(icosphere(3)).item()
    assert 0 < fine < coarse


def test_obj_round_trip(tmp_path):
    mesh = icosphere(2)
    path = save_obj(mesh, tmp_path / "mesh.obj")
    loaded = load_obj(path)
    assert np.allclose(loaded.vertices.data, mesh.vertices.data, atol=1e-6)
    assert np.array_equal(loaded.faces, mesh.faces)
    assert np.allclose(loaded.face_uv, mesh.face_uv, atol=1e-6)
