import contextlib
import logging
import time
import typing

import numpy as np

__all__ = ("make_rng", "silence_noisy_loggers", "timed")


def silence_noisy_loggers(*exclude: str):
    """Silences noisy loggers so that debugging is easier, by setting their log levels to WARNING
    :param exclude: A list of loggers to exclude from silencing
    """
    silence = ["PIL.PngImagePlugin", "PIL.Image", "asyncio"]
    for excl in exclude:
        silence.remove(excl)
    for logger in silence:
        logging.getLogger(logger).setLevel(logging.WARNING)


def make_rng(seed: typing.Optional[int], *streams: typing.Union[int, str]) -> np.random.Generator:
    """Returns a generator derived from ``seed`` and an optional stream name.

    Separate streams (for example ``make_rng(seed, "gan")``) give independent but reproducible sequences.
    """
    keys = [seed if seed is not None else 0]
    for stream in streams:
        keys.append(stream if isinstance(stream, int) else sum(ord(c) * (i + 1) for i, c in enumerate(stream)))
    return np.random.default_rng(keys)


@contextlib.contextmanager
def timed(logger: logging.Logger, what: str, level: int = logging.DEBUG):
    """Logs how long the body took, in milliseconds."""
    start = time.perf_counter()
    try:
        yield
    finally:
        logger.log(level, "%s took %.2fms", what, (time.perf_counter() - start) * 1000)
