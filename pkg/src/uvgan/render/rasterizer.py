"""Hard rasterisation of triangle meshes.

Screen space is normalised device coordinates, ``x`` right and ``y`` up in ``[-1, 1]``. Pixel ``(r, c)`` of an
``H x W`` image has its centre at ``x = (2c + 1) / W - 1``, ``y = 1 - (2r + 1) / H``. Triangles are tested
against pixel centres; edges are inclusive, the nearest fragment (largest depth) wins, and equal depths go to
the lowest face index.
"""

import dataclasses
import logging
import time
import typing

import numpy as np

from ..autodiff.tensor import no_grad
from ..exceptions import InvalidArgumentError
from ..geometry.camera import WeakPerspectiveCamera, project
from ..geometry.mesh import TriMesh

__all__ = (
    "AREA_EPSILON",
    "FragmentBuffer",
    "Resolution",
    "cover_triangles",
    "ndc_to_pixel",
    "pixel_centers",
    "projected_silhouette",
    "rasterize",
    "rasterize_screen",
    "resolve_resolution",
    "signed_areas",
)

log = logging.getLogger(__name__)

Resolution = typing.Union[int, typing.Tuple[int, int]]
AREA_EPSILON = 1e-12
EDGE_EPSILON = 1e-9
MIN_RESOLUTION = 8


def resolve_resolution(resolution: Resolution) -> typing.Tuple[int, int]:
    """Returns ``(H, W)`` for an int (square) or pair resolution.

    :raises InvalidArgumentError: either side is below 8 pixels.
    """
    if isinstance(resolution, (int, np.integer)):
        height = width = int(resolution)
    else:
        height, width = (int(x) for x in resolution)
    if height < MIN_RESOLUTION or width < MIN_RESOLUTION:
        raise InvalidArgumentError(f"Resolution must be at least {MIN_RESOLUTION}, got {(height, width)}")
    return height, width


def pixel_centers(height: int, width: int) -> np.ndarray:
    """``(H, W, 2)`` array of pixel centre coordinates in NDC."""
    x = (2 * np.arange(width) + 1) / width - 1
    y = 1 - (2 * np.arange(height) + 1) / height
    return np.stack(np.meshgrid(x, y), axis=-1)


def ndc_to_pixel(points: np.ndarray, height: int, width: int) -> np.ndarray:
    """Converts ``(..., 2)`` NDC points to continuous ``(col, row)`` pixel coordinates (centres are integers)."""
    col = (points[..., 0] + 1) * width / 2 - 0.5
    row = (1 - points[..., 1]) * height / 2 - 0.5
    return np.stack([col, row], axis=-1)


def signed_areas(screen: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """Twice the signed NDC area of every face. Positive for counter-clockwise (front-facing) faces."""
    a, b, c = screen[faces[:, 0]], screen[faces[:, 1]], screen[faces[:, 2]]
    return (b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0])


def _window_pairs(lo: np.ndarray, hi: np.ndarray) -> typing.Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Enumerates every integer (row, col) in each ``[lo, hi]`` box. Returns owner, row and col arrays."""
    n_rows = hi[:, 1] - lo[:, 1] + 1
    n_cols = hi[:, 0] - lo[:, 0] + 1
    counts = n_rows * n_cols
    owner = np.repeat(np.arange(len(counts)), counts)
    local = np.arange(int(counts.sum())) - np.repeat(np.cumsum(counts) - counts, counts)
    width = n_cols[owner]
    return owner, lo[owner, 1] + local // width, lo[owner, 0] + local % width


def cover_triangles(
    triangles: np.ndarray, height: int, width: int, *, wrap: bool = False
) -> typing.Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Finds every (triangle, pixel) pair whose pixel centre lies inside the triangle.

    :param triangles: ``(F, 3, 2)`` corners in ``(col, row)`` pixel coordinates.
    :param wrap: Let columns run past the right border and wrap them around (for periodic UV space).
    :returns: ``(owner, rows, cols, barycentrics)`` with one entry per covered pair.
    """
    max_col = 2 * width - 1 if wrap else width - 1
    lo = np.ceil(triangles.min(axis=1) - EDGE_EPSILON).astype(np.int64)
    hi = np.floor(triangles.max(axis=1) + EDGE_EPSILON).astype(np.int64)
    lo[:, 0] = np.clip(lo[:, 0], 0, max_col)
    hi[:, 0] = np.clip(hi[:, 0], -1, max_col)
    lo[:, 1] = np.clip(lo[:, 1], 0, height - 1)
    hi[:, 1] = np.clip(hi[:, 1], -1, height - 1)
    keep = np.nonzero(np.all(hi >= lo, axis=1))[0]
    owner, rows, cols = _window_pairs(lo[keep], hi[keep])
    owner = keep[owner]
    a, b, c = triangles[owner, 0], triangles[owner, 1], triangles[owner, 2]
    p = np.stack([cols, rows], axis=-1).astype(np.float64)

    def cross(u, v):
        return u[:, 0] * v[:, 1] - u[:, 1] * v[:, 0]

    area = cross(b - a, c - a)
    ok = np.abs(area) > 0
    area = np.where(ok, area, 1.0)
    w0 = cross(b - p, c - p) / area
    w1 = cross(c - p, a - p) / area
    w2 = 1.0 - w0 - w1
    inside = ok & (w0 >= -EDGE_EPSILON) & (w1 >= -EDGE_EPSILON) & (w2 >= -EDGE_EPSILON)
    bary = np.stack([w0, w1, w2], axis=-1)[inside]
    cols = cols[inside] % width if wrap else cols[inside]
    return owner[inside], rows[inside], cols, bary


@dataclasses.dataclass(eq=False)
class FragmentBuffer:
    """Per-pixel result of rasterisation.

    :var face_id: ``(H, W)`` index of the visible face, -1 where nothing is covered.
    :var bary: ``(H, W, 3)`` barycentric coordinates of the pixel centre in that face.
    :var uv: ``(H, W, 2)`` interpolated per-corner UVs.
    :var depth: ``(H, W)`` interpolated depth, -inf where nothing is covered.
    """

    face_id: np.ndarray
    bary: np.ndarray
    uv: np.ndarray
    depth: np.ndarray

    @property
    def resolution(self) -> typing.Tuple[int, int]:
        return self.face_id.shape

    @property
    def coverage(self) -> np.ndarray:
        """Boolean ``(H, W)`` foreground mask."""
        return self.face_id >= 0


def rasterize_screen(
    screen: np.ndarray, depth: np.ndarray, faces: np.ndarray, face_uv: np.ndarray, resolution: Resolution
) -> FragmentBuffer:
    """Rasterises already projected vertices. See `rasterize`."""
    height, width = resolve_resolution(resolution)
    start = time.perf_counter()
    screen = np.asarray(screen, dtype=np.float64)
    depth = np.asarray(depth, dtype=np.float64)
    front = np.nonzero(signed_areas(screen, faces) > AREA_EPSILON)[0]
    triangles = ndc_to_pixel(screen[faces[front]], height, width)
    owner, rows, cols, bary = cover_triangles(triangles, height, width)
    face = front[owner]
    z = np.einsum("ij,ij->i", bary, depth[faces[face]])
    pixel = rows * width + cols

    order = np.lexsort((face, -z, pixel))
    _, first = np.unique(pixel[order], return_index=True)
    winner = order[first]

    face_id = np.full(height * width, -1, dtype=np.int64)
    bary_map = np.zeros((height * width, 3))
    uv_map = np.zeros((height * width, 2))
    depth_map = np.full(height * width, -np.inf)
    hit = pixel[winner]
    face_id[hit] = face[winner]
    bary_map[hit] = bary[winner]
    uv_map[hit] = np.einsum("ij,ijk->ik", bary[winner], face_uv[face[winner]])
    depth_map[hit] = z[winner]
    log.debug(
        "Rasterised %d front faces into %dx%d (%d fragments) in %.2fms",
        len(front),
        height,
        width,
        len(owner),
        (time.perf_counter() - start) * 1000,
    )
    return FragmentBuffer(
        face_id.reshape(height, width),
        bary_map.reshape(height, width, 3),
        uv_map.reshape(height, width, 2),
        depth_map.reshape(height, width),
    )


def rasterize(mesh: TriMesh, camera: WeakPerspectiveCamera, resolution: Resolution) -> FragmentBuffer:
    """Finds the visible face, barycentrics, UV and depth at every pixel centre.

    Back faces (clockwise, or with near-zero projected area) are culled. The result carries no gradient.

    :param resolution: ``H`` for a square image or ``(H, W)``; both at least 8.
    """
    with no_grad():
        screen, depth = project(camera, mesh.vertices)
    return rasterize_screen(screen.data, depth.data, mesh.faces, mesh.face_uv, resolution)


def projected_silhouette(mesh: TriMesh, camera: WeakPerspectiveCamera, resolution: Resolution) -> np.ndarray:
    """Binary ``(H, W)`` coverage of the mesh, as float 0/1."""
    return rasterize(mesh, camera, resolution).coverage.astype(np.float64)
