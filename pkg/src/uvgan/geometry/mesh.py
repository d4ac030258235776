import dataclasses
import functools
import logging
import os
import pathlib
import typing

import numpy as np

from ..autodiff import ops
from ..autodiff.tensor import Tensor, as_tensor
from ..exceptions import GeometryError, NonFiniteDeformationError, SubdivisionRangeError, TopologyError

__all__ = (
    "MAX_SUBDIVISIONS",
    "TriMesh",
    "apply_deformation",
    "face_normals",
    "icosphere",
    "load_obj",
    "save_obj",
    "smoothness_loss",
    "spherical_uv",
)

log = logging.getLogger(__name__)

MAX_SUBDIVISIONS = 6
POLE_EPSILON = 1e-9


@dataclasses.dataclass(frozen=True, eq=False)
class TriMesh:
    """A triangle mesh with a UV atlas.

    Meshes are treated as immutable values: deforming one produces a new mesh (see `with_vertices`).

    :var vertices: ``(N, 3)`` positions. May require a gradient.
    :var faces: ``(M, 3)`` vertex indices, counter-clockwise seen from outside.
    :var uv: ``(N, 2)`` per-vertex texture coordinates in ``[0, 1]^2``.
    :var face_uv: ``(M, 3, 2)`` per-corner texture coordinates. Faces that cross the ``u`` seam carry corners
        with ``u >= 1``; sampling wraps ``u`` around.
    """

    vertices: Tensor
    faces: np.ndarray
    uv: np.ndarray
    face_uv: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "vertices", as_tensor(self.vertices))
        faces = np.asarray(self.faces, dtype=np.int64)
        object.__setattr__(self, "faces", faces)
        n = self.vertices.shape[0]
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 3:
            raise GeometryError(f"Vertices must have shape (N, 3), got {self.vertices.shape}")
        if faces.ndim != 2 or faces.shape[1] != 3:
            raise GeometryError(f"Faces must have shape (M, 3), got {faces.shape}")
        if faces.size and (faces.min() < 0 or faces.max() >= n):
            raise GeometryError(f"Face indices must lie in [0, {n})")
        if np.any((faces[:, 0] == faces[:, 1]) | (faces[:, 1] == faces[:, 2]) | (faces[:, 0] == faces[:, 2])):
            raise GeometryError("Every face must reference three distinct vertices")
        if np.shape(self.uv) != (n, 2) or np.shape(self.face_uv) != (len(faces), 3, 2):
            raise GeometryError("UV arrays do not match the vertex and face counts")

    @property
    def num_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def num_faces(self) -> int:
        return self.faces.shape[0]

    def with_vertices(self, vertices: Tensor) -> "TriMesh":
        """Returns a mesh sharing this mesh's connectivity and UVs, with new positions."""
        mesh = TriMesh(vertices, self.faces, self.uv, self.face_uv)
        if "edge_faces" in self.__dict__:
            mesh.__dict__["edge_faces"] = self.__dict__["edge_faces"]
        return mesh

    def detach(self) -> "TriMesh":
        return self.with_vertices(self.vertices.detach())

    def bbox_diagonal(self) -> float:
        v = self.vertices.data
        return float(np.linalg.norm(v.max(axis=0) - v.min(axis=0)))

    @functools.cached_property
    def edge_faces(self) -> typing.Tuple[np.ndarray, int]:
        """Pairs of faces sharing each interior edge, and the number of boundary edges.

        :raises TopologyError: an edge is shared by more than two faces.
        """
        edges = np.sort(self.faces[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1)
        owner = np.repeat(np.arange(self.num_faces), 3)
        order = np.lexsort((edges[:, 1], edges[:, 0]))
        edges, owner = edges[order], owner[order]
        _, starts, counts = np.unique(edges, axis=0, return_index=True, return_counts=True)
        if np.any(counts > 2):
            raise TopologyError("Mesh is not manifold: an edge is shared by more than two faces")
        interior = starts[counts == 2]
        pairs = np.stack([owner[interior], owner[interior + 1]], axis=1)
        return pairs, int(np.sum(counts == 1))

    def __repr__(self) -> str:
        return f"<TriMesh vertices={self.num_vertices} faces={self.num_faces}>"


def spherical_uv(points: np.ndarray) -> np.ndarray:
    """Equirectangular coordinates of points on (or projected onto) the unit sphere.

    ``u`` follows the azimuth around the vertical axis (``u = 0.5`` faces +z), ``v`` the inclination from the
    north pole (+y, ``v = 0``).
    """
    unit = points / np.linalg.norm(points, axis=-1, keepdims=True)
    u = np.arctan2(unit[..., 0], unit[..., 2]) / (2 * np.pi) + 0.5
    v = np.arccos(np.clip(unit[..., 1], -1.0, 1.0)) / np.pi
    return np.stack([u, v], axis=-1)


def _icosahedron() -> typing.Tuple[np.ndarray, np.ndarray]:
    t = (1 + np.sqrt(5)) / 2
    vertices = np.array(
        [
            [-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
            [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
            [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1],
        ],
        dtype=np.float64,
    )  # fmt: skip
    faces = np.array(
        [
            [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
            [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
            [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
            [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
        ],
        dtype=np.int64,
    )  # fmt: skip
    return vertices / np.linalg.norm(vertices, axis=1, keepdims=True), faces


def _subdivide(vertices: np.ndarray, faces: np.ndarray) -> typing.Tuple[np.ndarray, np.ndarray]:
    edges = np.sort(faces[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1)
    unique, inverse = np.unique(edges, axis=0, return_inverse=True)
    midpoints = vertices[unique[:, 0]] + vertices[unique[:, 1]]
    midpoints /= np.linalg.norm(midpoints, axis=1, keepdims=True)
    mid = len(vertices) + inverse.reshape(-1, 3)
    a, b, c = faces.T
    ab, bc, ca = mid.T
    new_faces = np.concatenate(
        [
            np.stack([a, ab, ca], axis=1),
            np.stack([b, bc, ab], axis=1),
            np.stack([c, ca, bc], axis=1),
            np.stack([ab, bc, ca], axis=1),
        ]
    )
    return np.concatenate([vertices, midpoints]), new_faces


def _corner_uv(vertices: np.ndarray, faces: np.ndarray, uv: np.ndarray) -> np.ndarray:
    corner = uv[faces].copy()
    pole = np.abs(vertices[faces][..., 1]) > 1 - POLE_EPSILON
    u = corner[..., 0]
    masked = np.where(pole, np.nan, u)
    spread = np.nanmax(masked, axis=1) - np.nanmin(masked, axis=1)
    seam = spread > 0.5
    u[seam[:, None] & (u < 0.5) & ~pole] += 1.0
    # pole corners take the mean azimuth of the other two corners of their face
    rows = np.nonzero(pole.any(axis=1))[0]
    for row in rows:
        others = ~pole[row]
        u[row, pole[row]] = u[row, others].mean()
    return corner


def icosphere(subdivisions: int) -> TriMesh:
    """Builds a unit icosphere with an equirectangular UV atlas.

    The sphere has ``10 * 4**k + 2`` vertices and ``20 * 4**k`` faces, all counter-clockwise seen from outside.

    :param subdivisions: Number of 4-to-1 subdivision passes, ``0 <= k <= 6``.
    :raises SubdivisionRangeError: ``subdivisions`` is out of range.
    """
    if not 0 <= subdivisions <= MAX_SUBDIVISIONS:
        raise SubdivisionRangeError(f"Subdivision level must be within [0, {MAX_SUBDIVISIONS}], got {subdivisions}")
    vertices, faces = _icosahedron()
    for _ in range(subdivisions):
        vertices, faces = _subdivide(vertices, faces)
    # keep every face pointing outwards
    normals = np.cross(vertices[faces[:, 1]] - vertices[faces[:, 0]], vertices[faces[:, 2]] - vertices[faces[:, 0]])
    inward = np.einsum("ij,ij->i", normals, vertices[faces].mean(axis=1)) < 0
    faces[inward] = faces[inward][:, ::-1]
    uv = spherical_uv(vertices)
    pole = np.abs(vertices[:, 1]) > 1 - POLE_EPSILON
    uv[pole, 0] = 0.5
    log.debug("Built icosphere k=%d with %d vertices", subdivisions, len(vertices))
    return TriMesh(Tensor(vertices), faces, uv, _corner_uv(vertices, faces, uv))


def apply_deformation(template: TriMesh, displacement_map: Tensor) -> TriMesh:
    """Offsets every template vertex by the displacement map sampled at that vertex's UV.

    :param template: Mesh to deform.
    :param displacement_map: ``(3, Hd, Wd)`` map of xyz offsets.
    :raises NonFiniteDeformationError: the result holds NaN or infinite positions.
    """
    offsets = ops.bilinear_sample(displacement_map, template.uv)
    vertices = template.vertices + offsets
    if not np.all(np.isfinite(vertices.data)):
        raise NonFiniteDeformationError("Deformation produced non-finite vertex positions")
    return template.with_vertices(vertices)


def face_normals(mesh: TriMesh, *, normalise: bool = True) -> Tensor:
    """Per-face normals, ``(M, 3)``. Unnormalised normals have twice the face area as their length."""
    v = mesh.vertices
    f = mesh.faces
    v0, v1, v2 = v[f[:, 0]], v[f[:, 1]], v[f[:, 2]]
    n = ops.cross(v1 - v0, v2 - v0)
    if not normalise:
        return n
    length = ops.sqrt(ops.sum(n * n, axis=1, keepdims=True) + 1e-24)
    return n / length


def smoothness_loss(mesh: TriMesh, *, closed: bool = True) -> Tensor:
    """Mean of ``1 - cos`` of the dihedral angle over every interior edge.

    Flat neighbourhoods contribute 0, two faces folded at a right angle contribute 1.

    :param closed: Require every edge to be shared by exactly two faces.
    :raises TopologyError: ``closed`` is set and the mesh has a boundary edge, or it has no interior edges.
    """
    pairs, boundary = mesh.edge_faces
    if closed and boundary:
        raise TopologyError(f"Mesh declared closed has {boundary} boundary edges")
    if not len(pairs):
        raise TopologyError("Mesh has no interior edges")
    normals = face_normals(mesh)
    cos = ops.sum(normals[pairs[:, 0]] * normals[pairs[:, 1]], axis=1)
    return ops.mean(1.0 - cos)


def save_obj(mesh: TriMesh, path: typing.Union[str, os.PathLike]) -> pathlib.Path:
    """Writes a Wavefront OBJ with ``v``, ``vt`` and ``f v/vt`` records. ``vt`` uses a bottom-left origin."""
    path = pathlib.Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    corners = mesh.face_uv.reshape(-1, 2)
    unique, inverse = np.unique(corners, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1, 3)
    lines = [f"v {x:.9g} {y:.9g} {z:.9g}" for x, y, z in mesh.vertices.data]
    lines += [f"vt {u:.9g} {1 - v:.9g}" for u, v in unique]
    for face, tex in zip(mesh.faces + 1, inverse + 1):
        lines.append("f " + " ".join(f"{a}/{b}" for a, b in zip(face, tex)))
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text("\n".join(lines) + "\n")
    os.replace(tmp, path)
    return path


def load_obj(path: typing.Union[str, os.PathLike]) -> TriMesh:
    """Reads a Wavefront OBJ. Polygons are fan-triangulated; missing ``vt`` records fall back to spherical UVs.

    :raises GeometryError: the file holds no faces or a record is malformed.
    """
    vertices, texcoords, faces, face_tex = [], [], [], []
    for number, line in enumerate(pathlib.Path(path).read_text().splitlines(), 1):
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        try:
            if parts[0] == "v":
                vertices.append([float(x) for x in parts[1:4]])
            elif parts[0] == "vt":
                texcoords.append([float(parts[1]), 1 - float(parts[2])])
            elif parts[0] == "f":
                refs = [p.split("/") for p in parts[1:]]
                idx = [int(r[0]) - 1 for r in refs]
                tex = [int(r[1]) - 1 if len(r) > 1 and r[1] else -1 for r in refs]
                for i in range(1, len(idx) - 1):
                    faces.append([idx[0], idx[i], idx[i + 1]])
                    face_tex.append([tex[0], tex[i], tex[i + 1]])
        except (ValueError, IndexError) as e:
            raise GeometryError(f"Malformed OBJ record on line {number}: {line!r}", exception=e) from e
    if not faces:
        raise GeometryError(f"{path} contains no faces")
    vertices = np.asarray(vertices, dtype=np.float64)
    faces = np.asarray(faces, dtype=np.int64)
    face_tex = np.asarray(face_tex, dtype=np.int64)
    uv = spherical_uv(vertices)
    if texcoords and np.all(face_tex >= 0):
        face_uv = np.asarray(texcoords)[face_tex]
        uv[faces.reshape(-1)] = np.mod(face_uv.reshape(-1, 2), [1.0, np.inf])
    else:
        face_uv = _corner_uv(vertices / np.linalg.norm(vertices, axis=1, keepdims=True), faces, uv)
    return TriMesh(Tensor(vertices), faces, uv, face_uv)
