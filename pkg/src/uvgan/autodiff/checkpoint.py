"""Flat binary checkpoints.

A checkpoint is two files sharing a prefix: ``<prefix>.bin`` holds every array's raw bytes back to back, and
``<prefix>.json`` is the index mapping each name to its byte offset, shape and dtype.
"""

import logging
import os
import pathlib
import typing

import numpy as np

from ..exceptions import MissingArtifactError
from ..utils.jsonio import read_json, write_json_atomic

__all__ = ("checkpoint_exists", "load_checkpoint", "save_checkpoint")

log = logging.getLogger(__name__)


def _paths(prefix: typing.Union[str, os.PathLike]) -> typing.Tuple[pathlib.Path, pathlib.Path]:
    prefix = pathlib.Path(prefix)
    return prefix.with_name(prefix.name + ".bin"), prefix.with_name(prefix.name + ".json")


def checkpoint_exists(prefix: typing.Union[str, os.PathLike]) -> bool:
    blob, index = _paths(prefix)
    return blob.exists() and index.exists()


def save_checkpoint(
    prefix: typing.Union[str, os.PathLike],
    arrays: typing.Mapping[str, np.ndarray],
    *,
    metadata: typing.Optional[dict] = None,
) -> pathlib.Path:
    """Writes ``arrays`` to ``<prefix>.bin`` and the index to ``<prefix>.json``.

    Both files are written to temporary names first and renamed into place, blob first.

    :param prefix: Path prefix, without extension.
    :param arrays: Name to array mapping. Names are stored in sorted order.
    :param metadata: Extra JSON-serialisable information stored alongside the index.
    :returns: The index path.
    """
    blob, index = _paths(prefix)
    blob.parent.mkdir(parents=True, exist_ok=True)
    entries = {}
    offset = 0
    tmp_blob = blob.with_name(blob.name + ".tmp")
    with tmp_blob.open("wb") as fd:
        for name in sorted(arrays):
            array = np.ascontiguousarray(arrays[name])
            raw = array.tobytes()
            fd.write(raw)
            entries[name] = {"offset": offset, "shape": list(array.shape), "dtype": array.dtype.str}
            offset += len(raw)
    os.replace(tmp_blob, blob)
    write_json_atomic(index, {"tensors": entries, "metadata": metadata or {}})
    log.debug("Wrote %d tensors (%d bytes) to %s", len(entries), offset, blob)
    return index


def load_checkpoint(
    prefix: typing.Union[str, os.PathLike],
) -> typing.Tuple[typing.Dict[str, np.ndarray], dict]:
    """Reads a checkpoint written by `save_checkpoint`.

    :returns: A tuple of ``(arrays, metadata)``.
    :raises MissingArtifactError: either file is missing.
    """
    blob, index = _paths(prefix)
    if not checkpoint_exists(prefix):
        raise MissingArtifactError(f"No checkpoint at {prefix} (expected {blob.name} and {index.name})")
    meta = read_json(index)
    raw = blob.read_bytes()
    arrays = {}
    for name, entry in meta["tensors"].items():
        dtype = np.dtype(entry["dtype"])
        count = int(np.prod(entry["shape"], dtype=np.int64))
        arrays[name] = (
            np.frombuffer(raw, dtype=dtype, count=count, offset=entry["offset"]).reshape(entry["shape"]).copy()
        )
    return arrays, meta.get("metadata", {})
