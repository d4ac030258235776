"""Pseudo ground-truth textures: every usable frame projected into UV space."""

import logging
import os
import pathlib
import typing

from ..autodiff.tensor import no_grad
from ..exceptions import DegenerateViewError, InvalidArgumentError, MissingArtifactError
from ..geometry.mesh import TriMesh, icosphere
from ..render.baking import TextureAtlas, inverse_render
from ..render.rasterizer import projected_silhouette
from ..utils.jsonio import read_json, write_json_atomic
from .dataset import Frame, SequenceDataset
from .model import ReconModel
from .trainer import reconstruct

__all__ = ("bake_frame", "bake_pseudo_textures", "load_atlases", "save_atlases")

log = logging.getLogger(__name__)

ATLAS_INDEX = "atlases.json"


def _frame_mesh(source: typing.Union[ReconModel, TriMesh], template: TriMesh, frame: Frame) -> TriMesh:
    if isinstance(source, TriMesh):
        return source.detach()
    with no_grad():
        mesh, _ = reconstruct(source, template, frame.masked_image())
    return mesh.detach()


def bake_frame(
    mesh: TriMesh,
    frame: Frame,
    texture_resolution: typing.Tuple[int, int],
    *,
    image_mask: typing.Literal["projected", "external"] = "projected",
) -> TextureAtlas:
    """Bakes one frame through its optimised camera.

    The image is masked with the mesh's projected silhouette, or with the frame's own (external) mask for the
    ablation. Either way, the silhouette decides which pixels may be sampled.

    :raises DegenerateViewError: see `inverse_render`.
    """
    camera = frame.optimized_camera()
    silhouette = projected_silhouette(mesh, camera, frame.resolution)
    if image_mask == "projected":
        image = frame.image * silhouette
    elif image_mask == "external":
        image = frame.image * frame.mask
    else:
        raise InvalidArgumentError(f"Unknown image mask {image_mask!r}")
    atlas = inverse_render(image, silhouette, mesh, camera, texture_resolution)
    atlas.frame = frame.index
    return atlas


def bake_pseudo_textures(
    source: typing.Union[ReconModel, TriMesh],
    sequence: SequenceDataset,
    *,
    texture_resolution: typing.Tuple[int, int] = (128, 128),
    template: typing.Optional[TriMesh] = None,
    image_mask: typing.Literal["projected", "external"] = "projected",
    min_visible: float = 0.01,
    include_pruned: bool = False,
) -> typing.List[TextureAtlas]:
    """Bakes one `TextureAtlas` per unpruned frame.

    :param source: A trained model, which predicts a mesh per frame, or a fixed mesh shared by every frame.
    :param template: Template deformed by the model. Defaults to a level 3 icosphere.
    :param image_mask: ``"projected"`` masks images with the mesh silhouette, ``"external"`` with the frame masks.
    :param min_visible: Frames whose atlas is visible on less than this fraction of texels are skipped.
    :param include_pruned: Bake pruned frames too (the unpruned-data ablation).
    """
    if isinstance(source, ReconModel):
        source.eval()
        template = template or icosphere(3)
    atlases = []
    frames = list(sequence) if include_pruned else sequence.unpruned()
    for frame in frames:
        mesh = _frame_mesh(source, template, frame)
        try:
            atlas = bake_frame(mesh, frame, texture_resolution, image_mask=image_mask)
        except DegenerateViewError as e:
            log.warning("Skipping frame %d: %s", frame.index, e)
            continue
        if atlas.visible_fraction < min_visible:
            log.warning(
                "Skipping frame %d: only %.2f%% of texels are visible", frame.index, 100 * atlas.visible_fraction
            )
            continue
        atlases.append(atlas)
    log.info("Baked %d atlases from %d frames", len(atlases), len(frames))
    return atlases


def save_atlases(atlases: typing.Sequence[TextureAtlas], directory: typing.Union[str, os.PathLike]) -> pathlib.Path:
    """Writes every atlas as a texture/visibility PNG pair plus a JSON index."""
    directory = pathlib.Path(directory)
    index = []
    for atlas in atlases:
        stem = f"frame_{atlas.frame:04d}"
        atlas.save(directory, stem)
        index.append({"frame": atlas.frame, "stem": stem, "visible_fraction": atlas.visible_fraction})
    return write_json_atomic(directory / ATLAS_INDEX, index)


def load_atlases(directory: typing.Union[str, os.PathLike]) -> typing.List[TextureAtlas]:
    """Reads atlases written by `save_atlases`.

    :raises MissingArtifactError: the directory has no atlas index.
    """
    directory = pathlib.Path(directory)
    path = directory / ATLAS_INDEX
    if not path.exists():
        raise MissingArtifactError(f"No baked atlases at {directory} (missing {ATLAS_INDEX})")
    return [TextureAtlas.load(directory, entry["stem"], entry["frame"]) for entry in read_json(path)]
