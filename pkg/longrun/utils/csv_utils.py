import csv
import hashlib
import logging
from collections.abc import Iterable, Sequence
from pathlib import Path

import numpy as np

from longrun.exceptions import ConfigError
from longrun.models.markov import StateSpace, TransitionKernel

logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)


def format_value(value) -> str:
    """Report cells: floats with 15 significant digits, rest as str."""
    if isinstance(value, bool):
        return "pass" if value else "fail"
    if isinstance(value, (float, np.floating)):
        return format(float(value), ".15g")
    return str(value)


def exact_value(value: float) -> str:
    return format(float(value), ".17g")


class CsvHandler:
    """Comma-separated, LF line endings, one header row."""

    @staticmethod
    def write_rows(
        path: Path, header: Sequence[str], rows: Iterable[Sequence]
    ) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(header)
            for row in rows:
                writer.writerow([format_value(cell) for cell in row])
        logger.info(f"Wrote {path}")
        return path

    @staticmethod
    def read_rows(path: Path) -> tuple[list[str], list[list[str]]]:
        path = Path(path)
        if not path.is_file():
            logger.error(f"CSV file not found: {path}")
            raise ConfigError(f"no such file: {path}")
        with path.open(newline="", encoding="utf-8") as f:
            rows = list(csv.reader(f))
        if not rows:
            raise ConfigError(f"{path} has no header row")
        return rows[0], rows[1:]

    @staticmethod
    def write_kernel(path: Path, K: TransitionKernel) -> Path:
        rows = [
            [label] + [exact_value(p) for p in row]
            for label, row in zip(K.space.labels, K.rows)
        ]
        return CsvHandler.write_rows(path, ["state", *K.space.labels], rows)

    @staticmethod
    def read_kernel(path: Path, step=1) -> TransitionKernel:
        header, rows = CsvHandler.read_rows(path)
        labels = header[1:]
        if [row[0] for row in rows] != labels:
            logger.error(f"Row and column labels differ in {path}")
            raise ConfigError(f"kernel file {path} is not square")
        values = np.array([[float(v) for v in row[1:]] for row in rows])
        return TransitionKernel(
            space=StateSpace(labels=labels), rows=values, step=step
        )

    @staticmethod
    def write_vector(
        path: Path, space: StateSpace, values, name: str = "value"
    ) -> Path:
        rows = [
            [label, exact_value(v)] for label, v in zip(space.labels, values)
        ]
        return CsvHandler.write_rows(path, ["state", name], rows)

    @staticmethod
    def read_vector(path: Path) -> tuple[StateSpace, np.ndarray]:
        _, rows = CsvHandler.read_rows(path)
        space = StateSpace(labels=[row[0] for row in rows])
        return space, np.array([float(row[1]) for row in rows])

    @staticmethod
    def sha256(path: Path) -> str:
        digest = hashlib.sha256()
        with Path(path).open("rb") as f:
            for chunk in iter(lambda: f.read(1 << 16), b""):
                digest.update(chunk)
        return digest.hexdigest()
