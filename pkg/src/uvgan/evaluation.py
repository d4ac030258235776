"""Turntable rendering, image-set distances and the evaluation report."""

import asyncio
import dataclasses
import logging
import math
import os
import pathlib
import typing

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator

from .autodiff.tensor import Tensor, no_grad
from .exceptions import InvalidArgumentError, MissingArtifactError
from .geometry.camera import WeakPerspectiveCamera, quat_from_axis_angle, quat_multiply
from .geometry.mesh import TriMesh
from .losses import FeatureExtractor
from .recon.dataset import Frame, SequenceDataset
from .recon.model import ReconModel
from .recon.trainer import reconstruct
from .render.shading import render
from .utils.csvlog import CsvLog
from .utils.images import resize_image, save_png
from .utils.jsonio import write_json_atomic
from .utils.unblocking import gather_blocking

__all__ = (
    "FID_SIZE",
    "FrameMetric",
    "MetricReport",
    "TurntableView",
    "ViewMetric",
    "eval_report",
    "export_fid",
    "feature_distance",
    "frechet_distance",
    "gaussian_fit",
    "masked_l1",
    "render_turntable",
    "render_turntable_async",
    "silhouette_iou",
    "turntable_cameras",
    "write_report",
)

log = logging.getLogger(__name__)

FID_SIZE = 299
COVARIANCE_EPSILON = 1e-6


def gaussian_fit(features: np.ndarray) -> typing.Tuple[np.ndarray, np.ndarray]:
    """Mean and (unbiased) covariance of ``(N, D)`` features.

    :raises InvalidArgumentError: fewer than two rows.
    """
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[0] < 2:
        raise InvalidArgumentError(f"A Gaussian fit needs at least two feature vectors, got {features.shape}")
    return features.mean(axis=0), np.atleast_2d(np.cov(features, rowvar=False))


def _psd_sqrt(matrix: np.ndarray) -> np.ndarray:
    values, vectors = np.linalg.eigh((matrix + matrix.T) / 2)
    return (vectors * np.sqrt(np.clip(values, 0.0, None))) @ vectors.T


def _trace_sqrt_product(a: np.ndarray, b: np.ndarray) -> float:
    # tr((a b)^(1/2)) is the nuclear norm of a^(1/2) b^(1/2)
    return float(np.linalg.svd(_psd_sqrt(a) @ _psd_sqrt(b), compute_uv=False).sum())


def frechet_distance(
    mu1: np.ndarray, cov1: np.ndarray, mu2: np.ndarray, cov2: np.ndarray, *, epsilon: float = COVARIANCE_EPSILON
) -> float:
    """``|mu1 - mu2|^2 + tr(S1 + S2 - 2 (S1 S2)^(1/2))`` between two Gaussians.

    Both covariances get ``epsilon`` added to their diagonal. The trace term is averaged over both argument
    orders, so the result is exactly symmetric. Never negative.
    """
    eye = np.eye(cov1.shape[0])
    cov1 = cov1 + epsilon * eye
    cov2 = cov2 + epsilon * eye
    cross = (_trace_sqrt_product(cov1, cov2) + _trace_sqrt_product(cov2, cov1)) / 2
    diff = mu1 - mu2
    distance = float(diff @ diff) + float(np.trace(cov1) + np.trace(cov2)) - 2 * cross
    return max(distance, 0.0)


def feature_distance(
    real_images: np.ndarray, fake_images: np.ndarray, extractor: typing.Optional[FeatureExtractor] = None
) -> float:
    """Fréchet distance between Gaussian fits of the pooled features of two image sets.

    :param real_images: ``(N, 3, H, W)`` images in ``[0, 1]``, ``N >= 2``.
    :param fake_images: ``(M, 3, H, W)`` images in ``[0, 1]``, ``M >= 2``.
    :param extractor: Feature network; a default `FeatureExtractor` when omitted.
    """
    extractor = extractor or FeatureExtractor()
    mu1, cov1 = gaussian_fit(extractor.pooled(np.asarray(real_images)))
    mu2, cov2 = gaussian_fit(extractor.pooled(np.asarray(fake_images)))
    return frechet_distance(mu1, cov1, mu2, cov2)


def silhouette_iou(a: np.ndarray, b: np.ndarray) -> float:
    """Intersection over union of two binary masks (values above 0.5 count). Two empty masks give 1."""
    a, b = np.asarray(a) > 0.5, np.asarray(b) > 0.5
    union = np.logical_or(a, b).sum()
    return float(np.logical_and(a, b).sum() / union) if union else 1.0


def masked_l1(image: np.ndarray, rendered: np.ndarray, mask: np.ndarray) -> float:
    """Mean absolute colour difference over the pixels inside ``mask``. 0 for an empty mask."""
    inside = np.asarray(mask) > 0.5
    if not inside.any():
        return 0.0
    return float(np.abs(np.asarray(image, np.float64) - np.asarray(rendered, np.float64))[:, inside].mean())


def turntable_cameras(
    n_views: int, *, elevation_deg: float = 10.0, scale: float = 0.8, start_deg: float = 0.0
) -> typing.List[WeakPerspectiveCamera]:
    """``n_views`` cameras equally spaced on a horizontal circle around the vertical axis, tilted by the elevation."""
    if n_views < 1:
        raise InvalidArgumentError(f"A turntable needs at least one view, got {n_views}")
    tilt = quat_from_axis_angle([1.0, 0.0, 0.0], elevation_deg)
    cameras = []
    for i in range(n_views):
        yaw = quat_from_axis_angle([0.0, 1.0, 0.0], start_deg + 360.0 * i / n_views)
        q = quat_multiply(tilt, yaw)
        cameras.append(WeakPerspectiveCamera(q / np.linalg.norm(q), scale))
    return cameras


@dataclasses.dataclass(eq=False)
class TurntableView:
    index: int
    angle_deg: float
    camera: WeakPerspectiveCamera
    rgb: np.ndarray
    silhouette: np.ndarray


def _render_view(
    item: typing.Tuple[int, WeakPerspectiveCamera],
    *,
    mesh: TriMesh,
    texture: np.ndarray,
    resolution: int,
    n_views: int,
) -> TurntableView:
    index, camera = item
    with no_grad():
        output = render(mesh, camera, Tensor(texture), resolution)
    return TurntableView(
        index, 360.0 * index / n_views, camera, output.rgb.data, output.fragments.coverage.astype(np.float32)
    )


async def render_turntable_async(
    mesh: TriMesh,
    texture: np.ndarray,
    n_views: int,
    resolution: int,
    *,
    elevation_deg: float = 10.0,
    scale: float = 0.8,
) -> typing.List[TurntableView]:
    """Renders every turntable view in a worker thread. Views come back in angle order."""
    cameras = turntable_cameras(n_views, elevation_deg=elevation_deg, scale=scale)
    mesh = mesh.detach()
    texture = np.asarray(getattr(texture, "data", texture))
    return await gather_blocking(
        _render_view, list(enumerate(cameras)), mesh=mesh, texture=texture, resolution=resolution, n_views=n_views
    )


def render_turntable(
    mesh: TriMesh,
    texture: np.ndarray,
    n_views: int,
    resolution: int,
    *,
    elevation_deg: float = 10.0,
    scale: float = 0.8,
) -> typing.List[TurntableView]:
    """Blocking wrapper around `render_turntable_async`."""
    return asyncio.run(
        render_turntable_async(mesh, texture, n_views, resolution, elevation_deg=elevation_deg, scale=scale)
    )


def export_fid(
    images: typing.Sequence[np.ndarray], directory: typing.Union[str, os.PathLike], *, prefix: str = "view"
) -> typing.List[pathlib.Path]:
    """Writes images resized to 299x299 for external FID tooling."""
    directory = pathlib.Path(directory)
    return [
        save_png(resize_image(image, (FID_SIZE, FID_SIZE)), directory / f"{prefix}_{i:04d}.png")
        for i, image in enumerate(images)
    ]


class _Report(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ViewMetric(_Report):
    view: int
    angle_deg: float
    coverage: float
    feature_mean_distance: float = Field(description="Squared distance of mean pooled features to the real set")


class FrameMetric(_Report):
    frame: int
    iou: float
    masked_l1: float


class MetricReport(_Report):
    """Evaluation summary. Every metric is finite."""

    artifacts: typing.Literal["trained", "ground_truth"]
    texture_source: typing.Literal["gan", "recon", "ground_truth"]
    views: int
    seeds: int
    iou: float
    masked_l1: float
    feature_distance: float
    feature_distance_per_seed: typing.List[float]
    best_feature_distance: typing.Optional[float] = None
    best_step: typing.Optional[int] = None
    per_view: typing.List[ViewMetric]
    per_frame: typing.List[FrameMetric]

    @field_validator("iou", "masked_l1", "feature_distance", "best_feature_distance")
    @classmethod
    def _finite(cls, value: typing.Optional[float]) -> typing.Optional[float]:
        if value is not None and not math.isfinite(value):
            raise ValueError("metric must be finite")
        return value


def _frame_geometry(
    geometry: typing.Union[ReconModel, TriMesh], template: typing.Optional[TriMesh], frame: Frame
) -> typing.Tuple[TriMesh, typing.Optional[np.ndarray]]:
    if isinstance(geometry, TriMesh):
        return geometry.detach(), None
    with no_grad():
        mesh, texture = reconstruct(geometry, template, frame.masked_image())
    return mesh.detach(), texture.data


def eval_report(
    sequence: SequenceDataset,
    geometry: typing.Union[ReconModel, TriMesh],
    textures_per_seed: typing.Sequence[np.ndarray],
    *,
    views: int = 8,
    template: typing.Optional[TriMesh] = None,
    frame_texture: typing.Optional[np.ndarray] = None,
    extractor: typing.Optional[FeatureExtractor] = None,
    artifacts: typing.Literal["trained", "ground_truth"] = "trained",
    texture_source: typing.Literal["gan", "recon", "ground_truth"] = "gan",
    elevation_deg: float = 10.0,
    scale: float = 0.8,
    best: typing.Optional[typing.Tuple[float, int]] = None,
) -> MetricReport:
    """Evaluates trained (or ground-truth) artifacts on a sequence.

    Silhouette IoU and masked L1 are measured on the held frames, rendering each through its optimised camera.
    With a model, each frame's own reconstruction and predicted texture are used; with a fixed mesh,
    ``frame_texture`` is. The feature distance compares turntable renders of every texture of a seed against
    the training images, and is averaged over seeds.

    :param textures_per_seed: One ``(n, 3, Ht, Wt)`` array of textures in ``[0, 1]`` per evaluation seed.
    :param best: ``(best_feature_distance, step)`` recorded while training, if known.
    :raises MissingArtifactError: a fixed mesh is given without ``frame_texture``, or no textures are given.
    """
    if isinstance(geometry, TriMesh) and frame_texture is None:
        raise MissingArtifactError("Evaluating a fixed mesh needs its texture")
    if not textures_per_seed or any(len(t) == 0 for t in textures_per_seed):
        raise MissingArtifactError("No textures to evaluate")
    if isinstance(geometry, ReconModel):
        geometry.eval()
    extractor = extractor or FeatureExtractor()
    resolution = sequence.resolution

    per_frame = []
    for frame in sequence.held_frames():
        mesh, predicted = _frame_geometry(geometry, template, frame)
        texture = predicted if predicted is not None else frame_texture
        with no_grad():
            output = render(mesh, frame.optimized_camera(), Tensor(texture), resolution)
        per_frame.append(
            FrameMetric(
                frame=frame.index,
                iou=silhouette_iou(output.fragments.coverage, frame.mask),
                masked_l1=masked_l1(frame.masked_image(), output.rgb.data, frame.mask),
            )
        )

    real = np.stack([f.masked_image() for f in sequence.training_frames() or list(sequence)])
    real_features = extractor.pooled(real)
    turntable_mesh, _ = _frame_geometry(geometry, template, (sequence.training_frames() or list(sequence))[0])
    distances = []
    view_renders: typing.List[typing.List[TurntableView]] = []
    for textures in textures_per_seed:
        renders = [
            render_turntable(turntable_mesh, t, views, resolution[0], elevation_deg=elevation_deg, scale=scale)
            for t in textures
        ]
        fake = np.stack([v.rgb for views_of_texture in renders for v in views_of_texture])
        mu1, cov1 = gaussian_fit(real_features)
        mu2, cov2 = gaussian_fit(extractor.pooled(fake))
        distances.append(frechet_distance(mu1, cov1, mu2, cov2))
        view_renders.extend(renders)

    real_mean = real_features.mean(axis=0)
    per_view = []
    for v in range(views):
        rgb = np.stack([r[v].rgb for r in view_renders])
        diff = extractor.pooled(rgb).mean(axis=0) - real_mean
        first = view_renders[0][v]
        per_view.append(
            ViewMetric(
                view=v,
                angle_deg=first.angle_deg,
                coverage=float(first.silhouette.mean()),
                feature_mean_distance=float(diff @ diff),
            )
        )

    report = MetricReport(
        artifacts=artifacts,
        texture_source=texture_source,
        views=views,
        seeds=len(textures_per_seed),
        iou=float(np.mean([m.iou for m in per_frame])),
        masked_l1=float(np.mean([m.masked_l1 for m in per_frame])),
        feature_distance=float(np.mean(distances)),
        feature_distance_per_seed=distances,
        best_feature_distance=best[0] if best else None,
        best_step=best[1] if best else None,
        per_view=per_view,
        per_frame=per_frame,
    )
    log.info(
        "Evaluation: IoU %.4f, masked L1 %.4f, feature distance %.4f",
        report.iou,
        report.masked_l1,
        report.feature_distance,
    )
    return report


def write_report(report: MetricReport, directory: typing.Union[str, os.PathLike]) -> pathlib.Path:
    """Writes ``report.json`` plus per-view and per-frame CSV breakdowns. Returns the JSON path."""
    directory = pathlib.Path(directory)
    path = write_json_atomic(directory / "report.json", report.model_dump(mode="json"))
    with CsvLog(directory / "per_view.csv", list(ViewMetric.model_fields)) as csv:
        for row in report.per_view:
            csv.write(row.model_dump())
    with CsvLog(directory / "per_frame.csv", list(FrameMetric.model_fields)) as csv:
        for row in report.per_frame:
            csv.write(row.model_dump())
    return path
