"""Image sequences and their JSON manifests.

A manifest is a JSON array with one entry per frame, in sequence order::

    [{"image_path": "image_000.png", "mask_path": "mask_000.png",
      "camera_init": {"q": [1, 0, 0, 0], "s": 0.8, "t": [0, 0]}}]

Paths are relative to the manifest's directory. Pruning and training write ``pruned`` and ``camera_opt`` back
into each entry.
"""

import dataclasses
import logging
import os
import pathlib
import typing

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, TypeAdapter, ValidationError

from ..exceptions import (
    InvalidArgumentError,
    InvalidCameraError,
    ManifestError,
    MissingArtifactError,
    SequenceTooShortError,
)
from ..geometry.camera import CameraOffset, WeakPerspectiveCamera, compose_camera
from ..utils.images import load_mask, load_png
from ..utils.jsonio import read_json, write_json_atomic

__all__ = (
    "CameraRecord",
    "Frame",
    "MANIFEST_ADAPTER",
    "ManifestEntry",
    "SequenceDataset",
)

log = logging.getLogger(__name__)


class CameraRecord(BaseModel):
    """Serialised form of a `WeakPerspectiveCamera`."""

    model_config = ConfigDict(extra="forbid")

    q: typing.List[float] = Field(min_length=4, max_length=4)
    s: float = Field(gt=0)
    t: typing.List[float] = Field(default_factory=lambda: [0.0, 0.0], min_length=2, max_length=2)

    @classmethod
    def of(cls, camera: WeakPerspectiveCamera) -> "CameraRecord":
        return cls.model_validate(camera.to_dict())

    def to_camera(self) -> WeakPerspectiveCamera:
        return WeakPerspectiveCamera(self.q, self.s, self.t)


class ManifestEntry(BaseModel):
    model_config = ConfigDict(extra="forbid")

    image_path: str
    mask_path: str
    camera_init: CameraRecord
    camera_gt: typing.Optional[CameraRecord] = None
    camera_opt: typing.Optional[CameraRecord] = None
    pruned: bool = False
    split: typing.Literal["train", "held"] = "train"


MANIFEST_ADAPTER = TypeAdapter(typing.List[ManifestEntry])


@dataclasses.dataclass(eq=False)
class Frame:
    """One observed view of the object.

    :var image: ``(3, H, W)`` image in ``[0, 1]``.
    :var mask: ``(H, W)`` binary foreground mask, as float 0/1.
    :var camera_init: Initial (noisy) camera estimate.
    :var camera_offset: Learnable correction on top of `start_camera`.
    :var camera_opt: Camera optimised by an earlier training run, if any. Training resumes from it.
    :var camera_gt: Ground-truth camera, only known for synthetic data.
    """

    index: int
    image: np.ndarray
    mask: np.ndarray
    camera_init: WeakPerspectiveCamera
    camera_offset: CameraOffset = dataclasses.field(default_factory=CameraOffset.zeros)
    camera_opt: typing.Optional[WeakPerspectiveCamera] = None
    camera_gt: typing.Optional[WeakPerspectiveCamera] = None
    pruned: bool = False
    split: str = "train"
    image_path: typing.Optional[pathlib.Path] = None
    mask_path: typing.Optional[pathlib.Path] = None

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[0] != 3:
            raise ManifestError(f"Frame {self.index}: image must be (3, H, W), got {self.image.shape}")
        if self.mask.shape != self.image.shape[1:]:
            raise ManifestError(f"Frame {self.index}: mask {self.mask.shape} does not match image {self.image.shape}")

    @property
    def resolution(self) -> typing.Tuple[int, int]:
        return self.mask.shape

    @property
    def start_camera(self) -> WeakPerspectiveCamera:
        return self.camera_opt if self.camera_opt is not None else self.camera_init

    @property
    def camera(self) -> WeakPerspectiveCamera:
        """The current, differentiable camera: `start_camera` composed with `camera_offset`."""
        return compose_camera(self.start_camera, self.camera_offset)

    def optimized_camera(self) -> WeakPerspectiveCamera:
        """A detached copy of `camera`, with its quaternion renormalised."""
        q, s, t = self.camera.detach().numpy()
        return WeakPerspectiveCamera(q / np.linalg.norm(q), s, t)

    def masked_image(self) -> np.ndarray:
        return self.image * self.mask

    def __repr__(self) -> str:
        flags = " pruned" if self.pruned else ""
        return f"<Frame {self.index} {self.resolution[0]}x{self.resolution[1]} split={self.split}{flags}>"


class SequenceDataset:
    """Ordered frames of one object. Order matters: pruning compares neighbouring frames.

    :param frames: Frames in sequence order.
    :param root: Directory the frames were loaded from, if any.
    """

    def __init__(self, frames: typing.Sequence[Frame], *, root: typing.Optional[pathlib.Path] = None):
        self.frames = list(frames)
        self.root = root
        if self.frames:
            shapes = {f.resolution for f in self.frames}
            if len(shapes) > 1:
                raise ManifestError(f"Frames of one sequence must share a resolution, got {sorted(shapes)}")

    def __len__(self) -> int:
        return len(self.frames)

    def __iter__(self) -> typing.Iterator[Frame]:
        return iter(self.frames)

    def __getitem__(self, index: int) -> Frame:
        return self.frames[index]

    def __repr__(self) -> str:
        return f"<SequenceDataset frames={len(self)} unpruned={len(self.unpruned())}>"

    @property
    def resolution(self) -> typing.Tuple[int, int]:
        if not self.frames:
            raise SequenceTooShortError("Sequence has no frames")
        return self.frames[0].resolution

    def unpruned(self) -> typing.List[Frame]:
        return [f for f in self.frames if not f.pruned]

    def training_frames(self) -> typing.List[Frame]:
        return [f for f in self.frames if not f.pruned and f.split == "train"]

    def held_frames(self) -> typing.List[Frame]:
        """Frames held out for evaluation. Falls back to every frame when none are marked held."""
        held = [f for f in self.frames if f.split == "held"]
        return held or list(self.frames)

    def sample_pair(self, rng: np.random.Generator) -> typing.Tuple[Frame, Frame]:
        """Draws an ordered pair of distinct training frames, uniformly.

        :raises SequenceTooShortError: fewer than two training frames remain.
        """
        pool = self.training_frames()
        if len(pool) < 2:
            raise SequenceTooShortError(f"Need at least 2 training frames to draw a pair, have {len(pool)}")
        i, j = rng.choice(len(pool), size=2, replace=False)
        return pool[int(i)], pool[int(j)]

    def with_pruned(self, flags: typing.Sequence[bool]) -> "SequenceDataset":
        """Returns a dataset sharing this one's frames' arrays and cameras, with new pruned flags."""
        if len(flags) != len(self.frames):
            raise InvalidArgumentError(f"Got {len(flags)} flags for {len(self.frames)} frames")
        frames = [dataclasses.replace(f, pruned=bool(p)) for f, p in zip(self.frames, flags)]
        return SequenceDataset(frames, root=self.root)

    @classmethod
    def load(cls, manifest: typing.Union[str, os.PathLike]) -> "SequenceDataset":
        """Reads a manifest and every image and mask it names.

        :raises MissingArtifactError: the manifest or one of its images does not exist.
        :raises ManifestError: the manifest is malformed or a camera is invalid.
        """
        manifest = pathlib.Path(manifest)
        try:
            raw = read_json(manifest)
        except FileNotFoundError as e:
            raise MissingArtifactError(f"Manifest not found: {manifest}", exception=e) from e
        except ValueError as e:
            raise ManifestError(f"Manifest {manifest} is not valid JSON", exception=e) from e
        try:
            entries = MANIFEST_ADAPTER.validate_python(raw)
        except ValidationError as e:
            problems = "; ".join(f"{'.'.join(str(p) for p in err['loc'])}: {err['msg']}" for err in e.errors())
            raise ManifestError(f"Malformed manifest {manifest}: {problems}", exception=e) from e
        root = manifest.parent
        frames = []
        for index, entry in enumerate(entries):
            image_path = (root / entry.image_path).resolve()
            mask_path = (root / entry.mask_path).resolve()
            try:
                frame = Frame(
                    index=index,
                    image=load_png(image_path),
                    mask=(load_mask(mask_path) > 0.5).astype(np.float32),
                    camera_init=entry.camera_init.to_camera(),
                    camera_opt=entry.camera_opt.to_camera() if entry.camera_opt else None,
                    camera_gt=entry.camera_gt.to_camera() if entry.camera_gt else None,
                    pruned=entry.pruned,
                    split=entry.split,
                    image_path=image_path,
                    mask_path=mask_path,
                )
            except FileNotFoundError as e:
                missing = e.filename or entry.image_path
                raise MissingArtifactError(f"Frame {index} of {manifest}: {missing} does not exist", exception=e) from e
            except InvalidCameraError as e:
                raise ManifestError(f"Frame {index} of {manifest} has an invalid camera: {e}", exception=e) from e
            frames.append(frame)
        log.info("Loaded %d frames from %s (%d pruned)", len(frames), manifest, sum(f.pruned for f in frames))
        return cls(frames, root=root)

    def entries(self, directory: pathlib.Path) -> typing.List[ManifestEntry]:
        entries = []
        for frame in self.frames:
            if frame.image_path is None or frame.mask_path is None:
                raise ManifestError(f"Frame {frame.index} was never written to disk")
            camera_opt = None
            if not frame.camera_offset.is_zero():
                camera_opt = CameraRecord.of(frame.optimized_camera())
            elif frame.camera_opt is not None:
                camera_opt = CameraRecord.of(frame.camera_opt)
            entries.append(
                ManifestEntry(
                    image_path=pathlib.Path(os.path.relpath(frame.image_path, directory)).as_posix(),
                    mask_path=pathlib.Path(os.path.relpath(frame.mask_path, directory)).as_posix(),
                    camera_init=CameraRecord.of(frame.camera_init),
                    camera_gt=CameraRecord.of(frame.camera_gt) if frame.camera_gt is not None else None,
                    camera_opt=camera_opt,
                    pruned=frame.pruned,
                    split=frame.split,
                )
            )
        return entries

    def save(self, manifest: typing.Union[str, os.PathLike]) -> pathlib.Path:
        """Writes the manifest atomically. Image paths are rewritten relative to the new location."""
        manifest = pathlib.Path(manifest)
        manifest.parent.mkdir(parents=True, exist_ok=True)
        entries = self.entries(manifest.parent.resolve())
        data = [e.model_dump(mode="json", exclude_none=True) for e in entries]
        write_json_atomic(manifest, data)
        log.debug("Wrote manifest with %d frames to %s", len(data), manifest)
        return manifest
