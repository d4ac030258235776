import logging
import os
import pathlib
import typing

import numpy as np
from PIL import Image

__all__ = ("contact_sheet", "load_mask", "load_png", "resize_image", "save_mask", "save_png", "to_uint8")

log = logging.getLogger(__name__)

PathLike = typing.Union[str, os.PathLike]


def to_uint8(image: np.ndarray) -> np.ndarray:
    """Converts a ``(3, H, W)`` or ``(H, W)`` float image in [0, 1] to an 8-bit ``(H, W, 3)`` / ``(H, W)`` array."""
    array = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    if array.ndim == 3:
        array = array.transpose(1, 2, 0)
    return np.round(array * 255).astype(np.uint8)


def _save(pil: Image.Image, path: PathLike) -> pathlib.Path:
    path = pathlib.Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    pil.save(tmp, format="PNG")
    os.replace(tmp, path)
    return path


def save_png(image: np.ndarray, path: PathLike) -> pathlib.Path:
    """Writes a ``(3, H, W)`` float image in [0, 1] as an 8-bit RGB PNG, atomically."""
    return _save(Image.fromarray(to_uint8(image)), path)


def save_mask(mask: np.ndarray, path: PathLike) -> pathlib.Path:
    """Writes an ``(H, W)`` mask (bool or float in [0, 1]) as an 8-bit greyscale PNG, atomically."""
    return _save(Image.fromarray(to_uint8(np.asarray(mask, dtype=np.float64))), path)


def load_png(path: PathLike, dtype=np.float32) -> np.ndarray:
    """Reads an image as a ``(3, H, W)`` float array in [0, 1]."""
    with Image.open(path) as pil:
        array = np.asarray(pil.convert("RGB"), dtype=np.float64) / 255.0
    return array.transpose(2, 0, 1).astype(dtype)


def load_mask(path: PathLike, dtype=np.float32) -> np.ndarray:
    """Reads a greyscale PNG as an ``(H, W)`` float array in [0, 1]."""
    with Image.open(path) as pil:
        return (np.asarray(pil.convert("L"), dtype=np.float64) / 255.0).astype(dtype)


def resize_image(image: np.ndarray, size: typing.Tuple[int, int]) -> np.ndarray:
    """Resizes a ``(3, H, W)`` float image to ``(3, *size)`` with bicubic filtering."""
    height, width = size
    pil = Image.fromarray(to_uint8(image)).resize((width, height), Image.Resampling.BICUBIC)
    return (np.asarray(pil, dtype=np.float64) / 255.0).transpose(2, 0, 1)


def contact_sheet(images: typing.Sequence[np.ndarray], columns: typing.Optional[int] = None) -> np.ndarray:
    """Tiles equally sized ``(3, H, W)`` images into a single grid image, left to right, top to bottom."""
    if not images:
        raise ValueError("Cannot build a contact sheet from zero images")
    columns = columns or int(np.ceil(np.sqrt(len(images))))
    rows = int(np.ceil(len(images) / columns))
    channels, height, width = images[0].shape
    sheet = np.zeros((channels, rows * height, columns * width), dtype=np.float64)
    for i, image in enumerate(images):
        r, c = divmod(i, columns)
        sheet[:, r * height : (r + 1) * height, c * width : (c + 1) * width] = image
    return sheet
