import json
import logging
import os
import pathlib
import typing

import numpy as np

try:
    import orjson
except ImportError:
    orjson = None

__all__ = ("dumps", "loads", "read_json", "write_json_atomic")

log = logging.getLogger(__name__)


def _default(obj: typing.Any) -> typing.Any:
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, pathlib.PurePath):
        return obj.as_posix()
    raise TypeError(f"Object of type {type(obj).__name__} is not JSON serialisable")


def dumps(obj: typing.Any) -> bytes:
    """Serialises ``obj`` to indented JSON bytes with sorted keys.

    Numpy arrays and scalars are converted to plain lists and numbers. If orjson is installed it is used,
    otherwise the standard library is.
    """
    if orjson:
        return orjson.dumps(
            obj, default=_default, option=orjson.OPT_INDENT_2 | orjson.OPT_SORT_KEYS | orjson.OPT_SERIALIZE_NUMPY
        )
    return json.dumps(obj, default=_default, indent=2, sort_keys=True).encode()


def loads(obj: typing.Union[str, bytes]) -> typing.Any:
    if orjson:
        return orjson.loads(obj)
    if isinstance(obj, bytes):
        obj = obj.decode()
    return json.loads(obj)


def read_json(path: typing.Union[str, os.PathLike]) -> typing.Any:
    return loads(pathlib.Path(path).read_bytes())


def write_json_atomic(path: typing.Union[str, os.PathLike], obj: typing.Any) -> pathlib.Path:
    """Writes ``obj`` as JSON to a temporary sibling of ``path`` and renames it into place."""
    path = pathlib.Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(dumps(obj))
    os.replace(tmp, path)
    log.debug("Wrote %s", path)
    return path
