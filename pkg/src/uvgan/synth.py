"""Synthetic turntable scenes with known geometry, texture and cameras.

A scene is an icosphere pushed in and out by a smooth random field, painted with a procedural texture, and
photographed from a ring of cameras around the vertical axis. Both the field and the texture are mirror
symmetric between the northern and southern hemispheres.
"""

import dataclasses
import logging
import os
import pathlib
import time
import typing

import numpy as np
from scipy import ndimage

from .autodiff.tensor import Tensor, no_grad
from .geometry.camera import WeakPerspectiveCamera, quat_from_axis_angle, quat_multiply
from .geometry.mesh import TriMesh, apply_deformation, icosphere, save_obj
from .recon.dataset import Frame, SequenceDataset
from .render.rasterizer import projected_silhouette
from .render.shading import render
from .utils.images import save_mask, save_png
from .utils.lib import make_rng

if typing.TYPE_CHECKING:
    from .config import SynthConfig

__all__ = (
    "SyntheticScene",
    "corrupt_mask",
    "perturb_rotation",
    "procedural_texture",
    "radial_displacement",
    "synth_cameras",
    "synth_data",
    "synth_scene",
)

log = logging.getLogger(__name__)

Y_AXIS = (0.0, 1.0, 0.0)
X_AXIS = (1.0, 0.0, 0.0)


@dataclasses.dataclass(eq=False)
class SyntheticScene:
    mesh: TriMesh
    texture: np.ndarray
    displacement: np.ndarray


def _smooth_noise(rng: np.random.Generator, shape: typing.Tuple[int, ...], sigma: float) -> np.ndarray:
    # rows clamp at the poles, columns wrap around the seam
    field = ndimage.gaussian_filter(rng.standard_normal(shape), sigma=sigma, mode=("nearest", "wrap"))
    field = (field + field[::-1]) / 2
    return field / (np.abs(field).max() + 1e-12)


def _sphere_directions(height: int, width: int) -> np.ndarray:
    v = (np.arange(height) + 0.5) / height
    u = (np.arange(width) + 0.5) / width
    theta = v[:, None] * np.pi
    phi = (u[None, :] - 0.5) * 2 * np.pi
    return np.stack(
        [np.sin(theta) * np.sin(phi), np.cos(theta) * np.ones_like(phi), np.sin(theta) * np.cos(phi)]
    )


def radial_displacement(resolution: int, amplitude: float, rng: np.random.Generator) -> np.ndarray:
    """A ``(3, R, 2R)`` displacement map pushing the unit sphere along its normals by a smooth symmetric field."""
    height, width = resolution, 2 * resolution
    radius = _smooth_noise(rng, (height, width), sigma=resolution / 6)
    return (amplitude * radius * _sphere_directions(height, width)).astype(np.float32)


def procedural_texture(resolution: typing.Tuple[int, int], rng: np.random.Generator) -> np.ndarray:
    """A ``(3, H, W)`` texture in ``[0.1, 0.9]``: smooth colour blobs over latitude bands.

    Row ``i`` equals row ``H - 1 - i`` exactly.
    """
    height, width = resolution
    blobs = np.stack([_smooth_noise(rng, (height, width), sigma=width / 24) for _ in range(3)])
    v = (np.arange(height) + 0.5) / height
    bands = np.sin(2 * np.pi * rng.integers(2, 5) * np.abs(v - 0.5))[None, :, None]
    tint = rng.uniform(0.3, 0.7, size=(3, 1, 1))
    texture = tint + 0.25 * blobs + 0.1 * bands
    texture = (texture + texture[:, ::-1]) / 2
    return np.clip(texture, 0.1, 0.9).astype(np.float32)


def synth_scene(config: "SynthConfig", seed: int = 0) -> SyntheticScene:
    """Builds the ground-truth mesh and texture for ``seed``."""
    displacement = radial_displacement(
        config.displacement_resolution, config.displacement_amplitude, make_rng(seed, "displacement")
    )
    texture = procedural_texture(tuple(config.texture_resolution), make_rng(seed, "texture"))
    with no_grad():
        mesh = apply_deformation(icosphere(config.subdivisions), Tensor(displacement)).detach()
    return SyntheticScene(mesh, texture, displacement)


def synth_cameras(
    frames: int, step_deg: float, *, elevation_deg: float = 10.0, scale: float = 0.8
) -> typing.List[WeakPerspectiveCamera]:
    """Ground-truth cameras: a rotation of ``i * step_deg`` about the vertical axis, then the elevation tilt."""
    tilt = quat_from_axis_angle(X_AXIS, elevation_deg)
    cameras = []
    for i in range(frames):
        q = quat_multiply(tilt, quat_from_axis_angle(Y_AXIS, i * step_deg))
        cameras.append(WeakPerspectiveCamera(q / np.linalg.norm(q), scale))
    return cameras


def perturb_rotation(q: np.ndarray, sigma_deg: float, rng: np.random.Generator) -> np.ndarray:
    """Rotates ``q`` by a normally distributed angle about a uniformly random axis."""
    if sigma_deg <= 0:
        return np.asarray(q, dtype=np.float64)
    axis = rng.standard_normal(3)
    noise = quat_from_axis_angle(axis, rng.normal(0.0, sigma_deg))
    q = quat_multiply(noise, q)
    return q / np.linalg.norm(q)


def corrupt_mask(mask: np.ndarray, radius: int) -> np.ndarray:
    """Dilates (positive ``radius``) or erodes (negative) a binary mask by ``|radius|`` pixels."""
    if radius == 0:
        return mask.astype(np.float32)
    op = ndimage.binary_dilation if radius > 0 else ndimage.binary_erosion
    return op(mask > 0.5, iterations=abs(radius)).astype(np.float32)


def synth_data(
    config: "SynthConfig", directory: typing.Union[str, os.PathLike], *, seed: int = 0
) -> SequenceDataset:
    """Renders a synthetic sequence to ``directory`` and returns it as loaded back from the manifest.

    Writes ``images/``, ``masks/``, ``manifest.json`` and the ground truth in ``gt/mesh.obj`` and
    ``gt/texture.png``. Every camera starts from its ground truth, optionally rotated by Gaussian noise; frames
    listed in ``flip_frames`` start rotated a further 180 degrees about the vertical axis.
    """
    start = time.perf_counter()
    directory = pathlib.Path(directory)
    scene = synth_scene(config, seed)
    step = config.step_deg or 360.0 / config.frames
    cameras = synth_cameras(config.frames, step, elevation_deg=config.elevation_deg, scale=config.scale)
    rng = make_rng(seed, "cameras")
    flip = quat_from_axis_angle(Y_AXIS, 180.0)
    texture = Tensor(scene.texture)
    frames = []
    for i, camera in enumerate(cameras):
        q_gt = camera.q.data.astype(np.float64)
        q_init = perturb_rotation(q_gt, config.camera_noise_deg, rng)
        if i in config.flip_frames:
            q_init = quat_multiply(q_init, flip)
            log.debug("Frame %d starts from a flipped camera", i)
        with no_grad():
            rgb = render(scene.mesh, camera, texture, config.resolution).rgb.data
        mask = corrupt_mask(projected_silhouette(scene.mesh, camera, config.resolution), config.mask_radius)
        held = config.held_every > 0 and i % config.held_every == config.held_every - 1
        frames.append(
            Frame(
                index=i,
                image=rgb,
                mask=mask,
                camera_init=WeakPerspectiveCamera(q_init, config.scale),
                camera_gt=camera,
                split="held" if held else "train",
                image_path=save_png(rgb, directory / "images" / f"frame_{i:04d}.png"),
                mask_path=save_mask(mask, directory / "masks" / f"frame_{i:04d}.png"),
            )
        )
    save_obj(scene.mesh, directory / "gt" / "mesh.obj")
    save_png(scene.texture, directory / "gt" / "texture.png")
    manifest = SequenceDataset(frames, root=directory).save(directory / "manifest.json")
    log.info(
        "Rendered %d synthetic frames (%.2f degrees apart) to %s in %.1fs",
        len(frames),
        step,
        directory,
        time.perf_counter() - start,
    )
    return SequenceDataset.load(manifest)
