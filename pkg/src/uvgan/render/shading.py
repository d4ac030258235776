"""Differentiable texture shading and soft silhouettes."""

import dataclasses
import logging
import typing

import numpy as np
from scipy import special

from ..autodiff import ops
from ..autodiff.tensor import Function, Tensor, as_tensor
from ..exceptions import InvalidSigmaError
from ..geometry.camera import WeakPerspectiveCamera, project
from ..geometry.mesh import TriMesh
from .rasterizer import (
    AREA_EPSILON,
    FragmentBuffer,
    Resolution,
    _window_pairs,
    ndc_to_pixel,
    rasterize,
    resolve_resolution,
    signed_areas,
)

__all__ = ("RenderOutput", "SOFT_CUTOFF", "default_sigma", "render", "shade", "soft_silhouette")

log = logging.getLogger(__name__)

SOFT_CUTOFF = 12.0
UV_TOLERANCE = 1e-6


def default_sigma(width: int) -> float:
    """Default soft silhouette sharpness, in NDC units: ``1e-4 * width``."""
    return 1e-4 * width


def _cross2(u: Tensor, v: Tensor) -> Tensor:
    return u[:, 0] * v[:, 1] - u[:, 1] * v[:, 0]


def shade(fragments: FragmentBuffer, mesh: TriMesh, camera: WeakPerspectiveCamera, texture: Tensor) -> Tensor:
    """Colours every covered pixel by sampling ``texture`` at the interpolated UV.

    Barycentric coordinates are recomputed from the projected vertices, so the image is differentiable with
    respect to the texture, the vertices and the camera. Uncovered pixels are 0.

    :param texture: ``(3, Ht, Wt)`` texture map.
    :returns: ``(3, H, W)`` image.
    """
    height, width = fragments.resolution
    texture = as_tensor(texture)
    channels = texture.shape[0]
    face_id = fragments.face_id.reshape(-1)
    covered = np.nonzero(face_id >= 0)[0]
    if not len(covered):
        return Tensor(np.zeros((channels, height, width)))
    faces = mesh.faces[face_id[covered]]
    corner_uv = mesh.face_uv[face_id[covered]]
    rows, cols = np.divmod(covered, width)
    p = np.stack([(2 * cols + 1) / width - 1, 1 - (2 * rows + 1) / height], axis=-1)

    screen, _ = project(camera, mesh.vertices)
    a, b, c = screen[faces[:, 0]], screen[faces[:, 1]], screen[faces[:, 2]]
    area = _cross2(b - a, c - a)
    w0 = (_cross2(b - p, c - p) / area).reshape(-1, 1)
    w1 = (_cross2(c - p, a - p) / area).reshape(-1, 1)
    w2 = 1.0 - w0 - w1
    uv = w0 * corner_uv[:, 0] + w1 * corner_uv[:, 1] + w2 * corner_uv[:, 2]

    raw = uv.data
    outside = (raw[:, 0] < -UV_TOLERANCE) | (raw[:, 0] >= 2)
    outside |= (raw[:, 1] < -UV_TOLERANCE) | (raw[:, 1] > 1 + UV_TOLERANCE)
    if np.any(outside):
        log.warning("%d pixels interpolated UVs outside the atlas; sampling clamps them", int(outside.sum()))

    colours = ops.bilinear_sample(texture, uv)
    image = ops.scatter_rows(colours, covered, height * width)
    return ops.transpose(image.reshape(height, width, channels), (2, 0, 1))


class SoftSilhouette(Function):
    def forward(self, screen, *, faces: np.ndarray, height: int, width: int, sigma: float):
        front = np.nonzero(signed_areas(screen, faces) > AREA_EPSILON)[0]
        self.faces = faces[front]
        self.screen = screen
        self.n_vertices = screen.shape[0]
        self.sigma = sigma
        self.dtype = screen.dtype
        triangles = screen[self.faces]
        margin = SOFT_CUTOFF * sigma
        px = ndc_to_pixel(triangles, height, width)
        margin_px = np.array([margin * width / 2, margin * height / 2])
        lo = np.ceil(px.min(axis=1) - margin_px).astype(np.int64)
        hi = np.floor(px.max(axis=1) + margin_px).astype(np.int64)
        lo = np.maximum(lo, 0)
        hi = np.minimum(hi, [width - 1, height - 1])
        keep = np.nonzero(np.all(hi >= lo, axis=1))[0]
        owner, rows, cols = _window_pairs(lo[keep], hi[keep])
        owner = keep[owner]
        p = np.stack([(2 * cols + 1) / width - 1, 1 - (2 * rows + 1) / height], axis=-1)

        distances = np.empty((len(owner), 3))
        for e in range(3):
            a = triangles[owner, e]
            edge = triangles[owner, (e + 1) % 3] - a
            r = p - a
            distances[:, e] = (edge[:, 0] * r[:, 1] - edge[:, 1] * r[:, 0]) / np.linalg.norm(edge, axis=1)
        nearest = np.argmin(distances, axis=1)
        d = distances[np.arange(len(owner)), nearest]
        z = d / sigma

        self.owner, self.nearest, self.p = owner, nearest, p
        self.pixel = rows * width + cols
        self.prob = special.expit(z)
        total = np.bincount(self.pixel, weights=np.logaddexp(0, z), minlength=height * width)
        # alpha = 1 - prod(1 - p_f), with log(1 - p_f) = -softplus(z_f)
        self.alpha = -np.expm1(-total)
        self.shape = (height, width)
        return self.alpha.reshape(height, width).astype(self.dtype)

    def backward(self, grad):
        g_pixel = grad.reshape(-1) * (1 - self.alpha)
        g_d = g_pixel[self.pixel] * self.prob / self.sigma
        a_ids = self.faces[self.owner, self.nearest]
        b_ids = self.faces[self.owner, (self.nearest + 1) % 3]
        screen = self.screen
        a = screen[a_ids]
        edge = screen[b_ids] - a
        r = self.p - a
        length = np.linalg.norm(edge, axis=1)
        cross = edge[:, 0] * r[:, 1] - edge[:, 1] * r[:, 0]
        d_edge = (np.stack([r[:, 1], -r[:, 0]], axis=1) - (cross / length**2)[:, None] * edge) / length[:, None]
        d_r = np.stack([-edge[:, 1], edge[:, 0]], axis=1) / length[:, None]
        grad_screen = np.zeros((self.n_vertices, 2))
        np.add.at(grad_screen, b_ids, g_d[:, None] * d_edge)
        np.add.at(grad_screen, a_ids, g_d[:, None] * (-d_edge - d_r))
        return (grad_screen.astype(self.dtype),)


def soft_silhouette(
    mesh: TriMesh, camera: WeakPerspectiveCamera, resolution: Resolution, sigma: typing.Optional[float] = None
) -> Tensor:
    """Smooth coverage of the mesh, differentiable with respect to vertices and camera.

    Each front face contributes ``p = sigmoid(d / sigma)`` at a pixel, where ``d`` is the signed NDC distance
    from the pixel centre to the face's nearest edge line (positive inside). Contributions combine as
    ``alpha = 1 - prod(1 - p)``. Pixels further than ``12 * sigma`` outside a face get nothing from it.

    :param sigma: Sharpness in NDC units. Defaults to `default_sigma` of the image width.
    :raises InvalidSigmaError: ``sigma`` is not strictly positive.
    :returns: ``(H, W)`` alpha in ``[0, 1]``.
    """
    height, width = resolve_resolution(resolution)
    if sigma is None:
        sigma = default_sigma(width)
    if not sigma > 0:
        raise InvalidSigmaError(f"sigma must be positive, got {sigma}")
    screen, _ = project(camera, mesh.vertices)
    return SoftSilhouette.apply(screen, faces=mesh.faces, height=height, width=width, sigma=float(sigma))


@dataclasses.dataclass(eq=False)
class RenderOutput:
    """Everything produced by one `render` call."""

    rgb: Tensor
    alpha: Tensor
    fragments: FragmentBuffer


def render(
    mesh: TriMesh,
    camera: WeakPerspectiveCamera,
    texture: Tensor,
    resolution: Resolution,
    *,
    sigma: typing.Optional[float] = None,
) -> RenderOutput:
    """Rasterises, shades and computes the soft silhouette in one go."""
    fragments = rasterize(mesh, camera, resolution)
    rgb = shade(fragments, mesh, camera, texture)
    alpha = soft_silhouette(mesh, camera, resolution, sigma)
    return RenderOutput(rgb, alpha, fragments)
