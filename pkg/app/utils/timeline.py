"""
Validity timelines: sorted, disjoint, non-empty [start_ns, end_ns) intervals.

The constructor normalizes any interval list (sort, drop empties, merge
overlapping or touching intervals), so two timelines covering the same set
compare equal regardless of how they were built.
"""

from pathlib import Path
from typing import Iterable

import numpy as np

from .csvio import parse_column, read_csv_columns, write_csv_columns

_HEADER = ("start_ns", "end_ns")


def _normalize(starts: np.ndarray, ends: np.ndarray) -> np.ndarray:
    starts = np.asarray(starts, dtype=np.int64)
    ends = np.asarray(ends, dtype=np.int64)
    keep = ends > starts
    starts, ends = starts[keep], ends[keep]
    if starts.size == 0:
        return np.empty((0, 2), dtype=np.int64)
    order = np.argsort(starts, kind="stable")
    starts, ends = starts[order], ends[order]
    reach = np.maximum.accumulate(ends)
    opens = np.ones(starts.size, dtype=bool)
    opens[1:] = starts[1:] > reach[:-1]
    first = np.flatnonzero(opens)
    return np.column_stack([starts[first], np.maximum.reduceat(ends, first)])


class ValidityTimeline:
    """Set of usable time, as normalized half-open nanosecond intervals."""

    __slots__ = ("intervals",)

    def __init__(self, intervals: Iterable = ()):
        arr = np.asarray(list(intervals) if not isinstance(intervals, np.ndarray) else intervals,
                         dtype=np.int64).reshape(-1, 2)
        self.intervals = _normalize(arr[:, 0], arr[:, 1])

    @classmethod
    def from_bounds(cls, starts, ends) -> "ValidityTimeline":
        return cls(np.column_stack([np.asarray(starts, np.int64), np.asarray(ends, np.int64)]))

    @classmethod
    def span(cls, start_ns: int, end_ns: int) -> "ValidityTimeline":
        return cls([(start_ns, end_ns)])

    def __len__(self) -> int:
        return len(self.intervals)

    def __bool__(self) -> bool:
        return len(self.intervals) > 0

    def __eq__(self, other) -> bool:
        return isinstance(other, ValidityTimeline) and np.array_equal(self.intervals, other.intervals)

    def __repr__(self) -> str:
        return f"ValidityTimeline({self.intervals.tolist()})"

    @property
    def duration_ns(self) -> int:
        return int((self.intervals[:, 1] - self.intervals[:, 0]).sum())

    def contains(self, t) -> np.ndarray:
        """Vectorized membership test."""
        t = np.asarray(t, dtype=np.int64)
        if not len(self.intervals):
            return np.zeros(t.shape, dtype=bool)
        idx = np.searchsorted(self.intervals[:, 0], t, side="right") - 1
        inside = idx >= 0
        safe = np.clip(idx, 0, None)
        return inside & (t < self.intervals[safe, 1])

    def intersect(self, other: "ValidityTimeline") -> "ValidityTimeline":
        a, b = self.intervals, other.intervals
        out = []
        i = j = 0
        while i < len(a) and j < len(b):
            lo = max(a[i, 0], b[j, 0])
            hi = min(a[i, 1], b[j, 1])
            if lo < hi:
                out.append((lo, hi))
            if a[i, 1] < b[j, 1]:
                i += 1
            else:
                j += 1
        return ValidityTimeline(out)

    def union(self, other: "ValidityTimeline") -> "ValidityTimeline":
        return ValidityTimeline(np.vstack([self.intervals, other.intervals]))

    def complement(self, start_ns: int, end_ns: int) -> "ValidityTimeline":
        """The gaps of this timeline inside [start_ns, end_ns)."""
        clipped = self.intersect(ValidityTimeline.span(start_ns, end_ns)).intervals
        bounds = np.concatenate([[start_ns], clipped.ravel(), [end_ns]]).astype(np.int64)
        return ValidityTimeline(bounds.reshape(-1, 2))

    def to_csv(self, path: Path) -> None:
        write_csv_columns(path, _HEADER, [self.intervals[:, 0], self.intervals[:, 1]])

    @classmethod
    def from_csv(cls, path: Path) -> "ValidityTimeline":
        cols = read_csv_columns(path, _HEADER)
        return cls.from_bounds(
            parse_column(cols["start_ns"], np.int64, path, "start_ns"),
            parse_column(cols["end_ns"], np.int64, path, "end_ns"),
        )
