import csv
import logging
import os
import pathlib
import typing

__all__ = ("CsvLog",)

log = logging.getLogger(__name__)


class CsvLog:
    """Append-only CSV file with a fixed header, flushed after every row.

    :param path: Where to write. Parent directories are created.
    :param fields: Column names, in order.
    """

    def __init__(self, path: typing.Union[str, os.PathLike], fields: typing.Sequence[str]):
        self.path = pathlib.Path(path)
        self.fields = list(fields)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fd = self.path.open("w", newline="")
        self._writer = csv.DictWriter(self._fd, fieldnames=self.fields, extrasaction="ignore")
        self._writer.writeheader()
        self.rows = 0

    def write(self, row: typing.Mapping[str, typing.Any]) -> None:
        self._writer.writerow({k: (f"{v:.8g}" if isinstance(v, float) else v) for k, v in row.items()})
        self._fd.flush()
        self.rows += 1

    def close(self) -> None:
        if not self._fd.closed:
            self._fd.close()
            log.debug("Closed %s after %d rows", self.path, self.rows)

    def __enter__(self) -> "CsvLog":
        return self

    def __exit__(self, *exc) -> None:
        self.close()
