"""Projecting images back into UV space."""

import dataclasses
import logging
import os
import pathlib
import typing

import numpy as np
from scipy import ndimage

from ..autodiff.tensor import no_grad
from ..exceptions import DegenerateViewError
from ..geometry.camera import WeakPerspectiveCamera, project
from ..geometry.mesh import TriMesh
from ..utils.images import load_mask, load_png, save_mask, save_png
from .rasterizer import AREA_EPSILON, cover_triangles, ndc_to_pixel, rasterize_screen, signed_areas

__all__ = ("MIN_VIEW_COVERAGE", "TexelMap", "TextureAtlas", "inverse_render", "texel_map")

log = logging.getLogger(__name__)

MIN_VIEW_COVERAGE = 0.01
DEPTH_EPSILON = 1e-3


@dataclasses.dataclass(eq=False)
class TextureAtlas:
    """A texture in UV space, plus which texels were actually observed.

    :var texture: ``(3, Ht, Wt)`` colours in ``[0, 1]``; zero wherever `visibility` is false.
    :var visibility: ``(Ht, Wt)`` boolean mask of observed texels.
    :var frame: Index of the frame this atlas was baked from, if any.
    """

    texture: np.ndarray
    visibility: np.ndarray
    frame: typing.Optional[int] = None

    @property
    def resolution(self) -> typing.Tuple[int, int]:
        return self.visibility.shape

    @property
    def visible_fraction(self) -> float:
        return float(self.visibility.mean())

    def save(self, directory: typing.Union[str, os.PathLike], stem: str) -> typing.Tuple[pathlib.Path, pathlib.Path]:
        directory = pathlib.Path(directory)
        return (
            save_png(self.texture, directory / f"{stem}_texture.png"),
            save_mask(self.visibility, directory / f"{stem}_visibility.png"),
        )

    @classmethod
    def load(
        cls, directory: typing.Union[str, os.PathLike], stem: str, frame: typing.Optional[int] = None
    ) -> "TextureAtlas":
        directory = pathlib.Path(directory)
        visibility = load_mask(directory / f"{stem}_visibility.png") > 0.5
        texture = load_png(directory / f"{stem}_texture.png") * visibility
        return cls(texture, visibility, frame)


@dataclasses.dataclass(frozen=True, eq=False)
class TexelMap:
    """Which face owns each texel centre, and where inside that face it sits.

    :var face: ``(Ht, Wt)`` owning face, -1 for texels outside the UV chart.
    :var bary: ``(Ht, Wt, 3)`` barycentric coordinates within the owning face.
    """

    face: np.ndarray
    bary: np.ndarray

    @property
    def chart(self) -> np.ndarray:
        """Texels that belong to some face."""
        return self.face >= 0


_TEXEL_MAPS: typing.Dict[tuple, TexelMap] = {}


def texel_map(mesh: TriMesh, resolution: typing.Tuple[int, int]) -> TexelMap:
    """Rasterises the mesh's per-corner UVs into a texel to face lookup. Results are cached per atlas layout.

    The ``u`` axis wraps, so faces straddling the seam cover texels on both borders. Texels on shared edges go to
    the lowest face index.
    """
    height, width = resolution
    key = (hash(mesh.face_uv.tobytes()), hash(mesh.faces.tobytes()), height, width)
    cached = _TEXEL_MAPS.get(key)
    if cached is not None:
        return cached
    corners = np.stack(
        [mesh.face_uv[..., 0] * width - 0.5, mesh.face_uv[..., 1] * height - 0.5], axis=-1
    )
    owner, rows, cols, bary = cover_triangles(corners, height, width, wrap=True)
    texel = rows * width + cols
    order = np.lexsort((owner, texel))
    _, first = np.unique(texel[order], return_index=True)
    winner = order[first]
    face = np.full(height * width, -1, dtype=np.int64)
    bary_map = np.zeros((height * width, 3))
    face[texel[winner]] = owner[winner]
    bary_map[texel[winner]] = bary[winner]
    result = TexelMap(face.reshape(height, width), bary_map.reshape(height, width, 3))
    log.debug("UV chart covers %.1f%% of a %dx%d atlas", 100 * result.chart.mean(), height, width)
    if len(_TEXEL_MAPS) > 16:
        _TEXEL_MAPS.clear()
    _TEXEL_MAPS[key] = result
    return result


def _erode_visibility(visibility: np.ndarray, chart: np.ndarray) -> np.ndarray:
    # drop visible texels that touch an unobserved texel of the chart; u wraps, v does not
    unseen = (chart & ~visibility).astype(np.uint8)
    touching = ndimage.maximum_filter(unseen, size=3, mode=("nearest", "wrap")) > 0
    return visibility & ~touching


def inverse_render(
    image: np.ndarray,
    mask: np.ndarray,
    mesh: TriMesh,
    camera: WeakPerspectiveCamera,
    texture_resolution: typing.Tuple[int, int],
    *,
    depth_epsilon: typing.Optional[float] = None,
) -> TextureAtlas:
    """Bakes an observed image into the mesh's UV atlas.

    Every texel of the UV chart is mapped to its surface point, projected through ``camera``, and coloured by
    bilinearly sampling ``image`` using only pixels inside ``mask`` (the weights are renormalised). A texel is
    visible when its face is front-facing, it is not hidden behind another face at its nearest pixel, and at
    least one of its sampling pixels lies inside the mask. The visible region is then eroded by one texel
    against unobserved texels of the chart.

    :param image: ``(3, H, W)`` image in ``[0, 1]``.
    :param mask: ``(H, W)`` foreground mask; pixels above 0.5 count as inside.
    :param texture_resolution: ``(Ht, Wt)`` of the atlas.
    :param depth_epsilon: Occlusion tolerance; defaults to 1e-3 of the mesh bounding-box diagonal.
    :raises DegenerateViewError: the mask covers less than 1% of the image, or barely overlaps the mesh.
    """
    image = np.asarray(image, dtype=np.float64)
    inside = np.asarray(mask) > 0.5
    height, width = inside.shape
    if inside.mean() < MIN_VIEW_COVERAGE:
        raise DegenerateViewError(f"Mask covers only {100 * inside.mean():.2f}% of the image")
    with no_grad():
        screen, depth = project(camera, mesh.vertices)
    screen, depth = screen.data.astype(np.float64), depth.data.astype(np.float64)
    fragments = rasterize_screen(screen, depth, mesh.faces, mesh.face_uv, (height, width))
    overlap = (inside & fragments.coverage).mean()
    if overlap < MIN_VIEW_COVERAGE:
        raise DegenerateViewError(f"Mesh and mask overlap on only {100 * overlap:.2f}% of the image")
    epsilon = DEPTH_EPSILON * mesh.bbox_diagonal() if depth_epsilon is None else depth_epsilon

    texels = texel_map(mesh, texture_resolution)
    chart_idx = np.nonzero(texels.chart.reshape(-1))[0]
    face = texels.face.reshape(-1)[chart_idx]
    bary = texels.bary.reshape(-1, 3)[chart_idx]
    corners = mesh.faces[face]
    front = (signed_areas(screen, mesh.faces) > AREA_EPSILON)[face]
    position = np.einsum("ij,ijk->ik", bary, screen[corners])
    col, row = ndc_to_pixel(position, height, width).T

    # occlusion at the nearest pixel, against this texel's own face plane
    near_c = np.floor(col + 0.5).astype(np.int64)
    near_r = np.floor(row + 0.5).astype(np.int64)
    in_frame = (near_c >= 0) & (near_c < width) & (near_r >= 0) & (near_r < height)
    nc, nr = np.clip(near_c, 0, width - 1), np.clip(near_r, 0, height - 1)
    centre = np.stack([(2 * nc + 1) / width - 1, 1 - (2 * nr + 1) / height], axis=-1)
    tri = screen[corners]
    a, b, c = tri[:, 0], tri[:, 1], tri[:, 2]
    area = (b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0])
    area = np.where(np.abs(area) > AREA_EPSILON, area, 1.0)

    def edge(u, v):
        return ((u - centre)[:, 0] * (v - centre)[:, 1] - (u - centre)[:, 1] * (v - centre)[:, 0]) / area

    w0, w1 = edge(b, c), edge(c, a)
    plane_depth = np.einsum("ij,ij->i", np.stack([w0, w1, 1 - w0 - w1], axis=1), depth[corners])
    other_face = fragments.face_id[nr, nc]
    occluded = in_frame & (other_face >= 0) & (other_face != face) & (fragments.depth[nr, nc] > plane_depth + epsilon)

    # bilinear sampling restricted to in-mask pixels
    c0, r0 = np.floor(col).astype(np.int64), np.floor(row).astype(np.int64)
    fx, fy = col - c0, row - r0
    colour = np.zeros((len(chart_idx), image.shape[0]))
    weight = np.zeros(len(chart_idx))
    for dr, dc, w in ((0, 0, (1 - fx) * (1 - fy)), (0, 1, fx * (1 - fy)), (1, 0, (1 - fx) * fy), (1, 1, fx * fy)):
        rr, cc = r0 + dr, c0 + dc
        valid = (rr >= 0) & (rr < height) & (cc >= 0) & (cc < width)
        rr, cc = np.clip(rr, 0, height - 1), np.clip(cc, 0, width - 1)
        w = np.where(valid & inside[rr, cc], w, 0.0)
        colour += w[:, None] * image[:, rr, cc].T
        weight += w
    sampled = weight > 1e-6
    colour[sampled] /= weight[sampled, None]

    visible_flat = front & ~occluded & sampled
    visibility = np.zeros(texture_resolution[0] * texture_resolution[1], dtype=bool)
    visibility[chart_idx] = visible_flat
    visibility = _erode_visibility(visibility.reshape(texture_resolution), texels.chart)

    texture = np.zeros((image.shape[0], texture_resolution[0] * texture_resolution[1]))
    texture[:, chart_idx] = colour.T
    texture = texture.reshape(image.shape[0], *texture_resolution) * visibility
    log.debug("Baked view: %.1f%% of texels visible", 100 * visibility.mean())
    return TextureAtlas(np.clip(texture, 0, 1).astype(np.float32), visibility)
