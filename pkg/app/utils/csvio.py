"""
Header-checked CSV tables backed by numpy.

Values are written in their shortest round-trip text form (numpy's str of
int64/float64), so a write followed by a read reproduces every value exactly.
"""

import warnings
from pathlib import Path
from typing import Sequence

import numpy as np

from ..common import RecordingFormatError


def read_csv_columns(path: Path, header: Sequence[str]) -> dict[str, np.ndarray]:
    """Read a CSV whose first line must equal ``header``; columns come back as str arrays."""
    path = Path(path)
    if not path.is_file():
        raise RecordingFormatError(f"missing file {path.name}")
    with path.open() as fh:
        first = fh.readline().strip()
    expected = ",".join(header)
    if first != expected:
        raise RecordingFormatError(
            f"{path.name}: malformed header {first!r} (expected {expected!r})"
        )
    try:
        with warnings.catch_warnings():
            # Header-only files are valid empty streams.
            warnings.simplefilter("ignore", UserWarning)
            rows = np.loadtxt(path, dtype=str, delimiter=",", skiprows=1, ndmin=2)
    except ValueError as exc:
        raise RecordingFormatError(f"{path.name}: malformed record ({exc})") from exc
    if rows.size == 0:
        rows = np.empty((0, len(header)), dtype=str)
    if rows.shape[1] != len(header):
        raise RecordingFormatError(
            f"{path.name}: malformed record (expected {len(header)} columns, got {rows.shape[1]})"
        )
    return {name: rows[:, i] for i, name in enumerate(header)}


def parse_column(values: np.ndarray, dtype, path: Path, name: str) -> np.ndarray:
    try:
        return values.astype(dtype)
    except ValueError as exc:
        raise RecordingFormatError(f"{Path(path).name}: malformed record in column {name!r} ({exc})") from exc


def write_csv_columns(path: Path, header: Sequence[str], columns: Sequence[np.ndarray]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [",".join(header)]
    if len(columns) and len(columns[0]):
        text = np.column_stack([np.asarray(col).astype(str) for col in columns])
        lines.extend(",".join(row) for row in text)
    path.write_text("\n".join(lines) + "\n")
