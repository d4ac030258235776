import logging
import typing

import numpy as np

from ..exceptions import InvalidArgumentError, SequenceTooShortError
from ..geometry.camera import quaternion_geodesic
from .dataset import SequenceDataset

__all__ = ("MIN_THRESHOLD_DEG", "adaptive_threshold", "consecutive_geodesics", "prune_sequence")

log = logging.getLogger(__name__)

MIN_THRESHOLD_DEG = 1.0


def consecutive_geodesics(sequence: SequenceDataset) -> np.ndarray:
    """Rotation, in degrees, between each pair of neighbouring frames' optimised cameras. Length ``n - 1``."""
    quats = [frame.optimized_camera().q.data for frame in sequence]
    return np.array([quaternion_geodesic(a, b) for a, b in zip(quats[:-1], quats[1:])])


def adaptive_threshold(steps: np.ndarray, factor: float = 4.0) -> float:
    """``factor`` times the median consecutive step, never below `MIN_THRESHOLD_DEG`."""
    if not len(steps):
        raise SequenceTooShortError("Cannot derive a threshold from an empty sequence")
    return max(factor * float(np.median(steps)), MIN_THRESHOLD_DEG)


def prune_sequence(
    sequence: SequenceDataset, threshold_deg: typing.Optional[float] = None, *, factor: float = 4.0
) -> SequenceDataset:
    """Flags frames whose camera jumps away from both of its neighbours.

    Frame ``i`` is pruned when its geodesic distance to frame ``i - 1`` and to frame ``i + 1`` both exceed the
    threshold; the first and last frames only have one neighbour to compare against. A single wrong frame is
    therefore flagged without dragging its neighbours along. Frames already pruned stay pruned, so pruning an
    already pruned sequence changes nothing.

    :param threshold_deg: Fixed threshold in degrees. When None, `adaptive_threshold` of the sequence is used.
    :param factor: Multiplier of the median step for the adaptive threshold.
    :raises SequenceTooShortError: the sequence has fewer than 3 frames.
    :returns: A new dataset sharing the frames' data, with updated pruned flags.
    """
    if len(sequence) < 3:
        raise SequenceTooShortError(f"Pruning needs at least 3 frames, got {len(sequence)}")
    if threshold_deg is not None and threshold_deg <= 0:
        raise InvalidArgumentError(f"Pruning threshold must be positive, got {threshold_deg}")
    steps = consecutive_geodesics(sequence)
    threshold = adaptive_threshold(steps, factor) if threshold_deg is None else float(threshold_deg)
    jumps = steps > threshold
    flags = np.zeros(len(sequence), dtype=bool)
    flags[0] = jumps[0]
    flags[-1] = jumps[-1]
    flags[1:-1] = jumps[:-1] & jumps[1:]
    previous = np.array([frame.pruned for frame in sequence])
    for index in np.nonzero(flags & ~previous)[0]:
        log.warning("Pruning frame %d: its camera is more than %.2f degrees from its neighbours", index, threshold)
    log.info(
        "Pruned %d of %d frames (threshold %.2f degrees, median step %.2f)",
        int(flags.sum()),
        len(sequence),
        threshold,
        float(np.median(steps)),
    )
    return sequence.with_pruned(flags | previous)
