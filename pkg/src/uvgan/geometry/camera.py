"""Weak-perspective cameras.

A camera rotates points by a unit quaternion ``q = (w, x, y, z)``, drops depth orthographically, then scales
by ``s`` and translates by ``t`` in normalised device coordinates. Depth is the rotated z coordinate, and
larger depth is nearer the viewer.
"""

import logging
import typing

import numpy as np

from ..autodiff import ops
from ..autodiff.nn import Parameter
from ..autodiff.tensor import Tensor, as_tensor
from ..exceptions import InvalidCameraError

__all__ = (
    "CameraOffset",
    "WeakPerspectiveCamera",
    "compose_camera",
    "project",
    "quat_from_axis_angle",
    "quat_multiply",
    "quaternion_geodesic",
    "rotation_matrix",
)

log = logging.getLogger(__name__)

UNIT_TOLERANCE = 1e-6


class WeakPerspectiveCamera:
    """A camera pose. All three fields are tensors so that gradients can flow into them.

    :param q: Unit quaternion ``(w, x, y, z)``.
    :param s: Positive scale.
    :param t: Screen-space translation ``(tx, ty)``.
    :param validate: Check ``|q| = 1`` (within 1e-6), ``s > 0`` and finiteness.
    :raises InvalidCameraError: validation failed.
    """

    __slots__ = ("q", "s", "t")

    def __init__(self, q, s, t=(0.0, 0.0), *, validate: bool = True):
        self.q = as_tensor(q if isinstance(q, Tensor) else np.asarray(q, dtype=np.float64))
        self.s = as_tensor(s if isinstance(s, Tensor) else np.asarray(s, dtype=np.float64))
        self.t = as_tensor(t if isinstance(t, Tensor) else np.asarray(t, dtype=np.float64))
        if self.q.shape != (4,) or self.s.size != 1 or self.t.shape != (2,):
            raise InvalidCameraError(f"Bad camera shapes q={self.q.shape} s={self.s.shape} t={self.t.shape}")
        if validate:
            self.validate()

    def validate(self) -> None:
        values = np.concatenate([self.q.data.ravel(), self.s.data.ravel(), self.t.data.ravel()])
        if not np.all(np.isfinite(values)):
            raise InvalidCameraError("Camera has non-finite parameters")
        norm = float(np.linalg.norm(self.q.data))
        if abs(norm - 1) > UNIT_TOLERANCE:
            raise InvalidCameraError(f"Camera quaternion must have unit norm, got {norm:.9f}")
        if float(self.s.data) <= 0:
            raise InvalidCameraError(f"Camera scale must be positive, got {float(self.s.data)}")

    @classmethod
    def identity(cls, s: float = 1.0) -> "WeakPerspectiveCamera":
        return cls([1.0, 0.0, 0.0, 0.0], s, [0.0, 0.0])

    @classmethod
    def from_dict(cls, data: typing.Mapping[str, typing.Any]) -> "WeakPerspectiveCamera":
        try:
            return cls(data["q"], data["s"], data.get("t", (0.0, 0.0)))
        except KeyError as e:
            raise InvalidCameraError(f"Camera record is missing {e.args[0]!r}") from e

    def to_dict(self) -> dict:
        return {
            "q": [float(x) for x in self.q.data],
            "s": float(self.s.data),
            "t": [float(x) for x in self.t.data],
        }

    def detach(self) -> "WeakPerspectiveCamera":
        return WeakPerspectiveCamera(self.q.detach(), self.s.detach(), self.t.detach(), validate=False)

    def numpy(self) -> typing.Tuple[np.ndarray, float, np.ndarray]:
        return self.q.data.astype(np.float64), float(self.s.data), self.t.data.astype(np.float64)

    def __repr__(self) -> str:
        q, s, t = self.numpy()
        return f"WeakPerspectiveCamera(q={np.round(q, 6).tolist()}, s={s:.6g}, t={np.round(t, 6).tolist()})"


class CameraOffset:
    """Per-frame learnable correction applied on top of an initial camera (see `compose_camera`)."""

    __slots__ = ("dq", "ds", "dt")

    def __init__(self, dq=None, ds=None, dt=None):
        self.dq = Parameter(np.zeros(4) if dq is None else dq, name="dq")
        self.ds = Parameter(np.zeros(()) if ds is None else ds, name="ds")
        self.dt = Parameter(np.zeros(2) if dt is None else dt, name="dt")

    @classmethod
    def zeros(cls) -> "CameraOffset":
        return cls()

    def parameters(self) -> typing.List[Parameter]:
        return [self.dq, self.ds, self.dt]

    def is_zero(self) -> bool:
        return not any(np.any(p.data) for p in self.parameters())

    def state_dict(self) -> typing.Dict[str, np.ndarray]:
        return {"dq": self.dq.data.copy(), "ds": self.ds.data.copy(), "dt": self.dt.data.copy()}

    def load_state_dict(self, state: typing.Mapping[str, np.ndarray]) -> None:
        self.dq.data[...] = state["dq"]
        self.ds.data[...] = state["ds"]
        self.dt.data[...] = state["dt"]

    def __repr__(self) -> str:
        return f"CameraOffset(dq={self.dq.data.tolist()}, ds={float(self.ds.data)}, dt={self.dt.data.tolist()})"


def compose_camera(init: WeakPerspectiveCamera, offset: CameraOffset) -> WeakPerspectiveCamera:
    """Applies a learnable offset to an initial camera.

    ``q' = normalise(q + dq)``, ``s' = s * exp(ds)``, ``t' = t + dt``. A zero offset returns the initial
    values unchanged. The result is differentiable with respect to the offset.

    :raises InvalidCameraError: ``q + dq`` cannot be normalised.
    """
    q_sum = init.q + offset.dq
    norm = ops.norm(q_sum)
    n = float(norm.data)
    if not np.isfinite(n) or n < 1e-12:
        raise InvalidCameraError(f"Cannot normalise camera quaternion (norm {n})")
    # project() renormalises, so skipping a division by (almost) exactly one keeps zero offsets bit-exact
    q = q_sum if abs(n - 1.0) <= 4 * np.finfo(np.float64).eps else q_sum / norm
    s = init.s * ops.exp(offset.ds)
    t = init.t + offset.dt
    return WeakPerspectiveCamera(q, s, t, validate=False)


def rotation_matrix(q: typing.Union[Tensor, np.ndarray]) -> typing.Union[Tensor, np.ndarray]:
    """Rotation matrix of a unit quaternion. Returns a tensor for tensor input, otherwise an array."""
    if isinstance(q, Tensor):
        w, x, y, z = (q[i] for i in range(4))
        stack = ops.stack
    else:
        w, x, y, z = np.asarray(q, dtype=np.float64)
        stack = np.stack
    entries = [
        1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
    ]  # fmt: skip
    return stack(entries).reshape(3, 3)


def project(camera: WeakPerspectiveCamera, vertices: Tensor) -> typing.Tuple[Tensor, Tensor]:
    """Projects ``(N, 3)`` vertices to screen space.

    The quaternion is normalised internally, so gradients with respect to it stay tangent to the unit sphere.

    :returns: ``(screen, depth)`` with shapes ``(N, 2)`` and ``(N,)``.
    """
    q = camera.q / ops.norm(camera.q)
    rotated = ops.matmul(vertices, ops.transpose(rotation_matrix(q)))
    screen = rotated[:, :2] * camera.s + camera.t
    return screen, rotated[:, 2]


def quat_from_axis_angle(axis: typing.Sequence[float], degrees: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    half = np.radians(degrees) / 2
    return np.concatenate([[np.cos(half)], np.sin(half) * axis])


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product ``a * b`` (apply ``b`` first, then ``a``)."""
    w1, x1, y1, z1 = a
    w2, x2, y2, z2 = b
    return np.array(
        [
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        ]
    )


def quaternion_geodesic(q1: typing.Sequence[float], q2: typing.Sequence[float]) -> float:
    """Smallest rotation angle, in degrees, taking one orientation to the other. ``q`` and ``-q`` are equal.

    :raises InvalidCameraError: either quaternion is not unit length (within 1e-6).
    """
    q1 = np.asarray(q1, dtype=np.float64)
    q2 = np.asarray(q2, dtype=np.float64)
    for q in (q1, q2):
        if abs(np.linalg.norm(q) - 1) > UNIT_TOLERANCE:
            raise InvalidCameraError(f"Geodesic distance needs unit quaternions, got norm {np.linalg.norm(q):.9f}")
    dot = min(abs(float(np.dot(q1, q2))), 1.0)
    return float(np.degrees(2 * np.arccos(dot)))
