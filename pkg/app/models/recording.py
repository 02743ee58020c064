"""
evortho - Recording data model

Record dtypes for every sensor stream, the lazy chunked event stream, and
the in-memory view of one flight recording.

Event records are 16 bytes little-endian: u64 t_ns, u16 x, u16 y,
u8 polarity (1 = ON, 0 = OFF), 3 zero padding bytes.
"""

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, Iterator, List, Optional

import numpy as np

from ..common import RecordingFormatError
from ..utils.imaging import read_image
from .schemas import CameraCalibration, RecordingMetadata

EVENT_DTYPE = np.dtype(
    [("t", "<u8"), ("x", "<u2"), ("y", "<u2"), ("p", "u1"), ("pad", "V3")]
)
assert EVENT_DTYPE.itemsize == 16

POLARITY_ON = 1
POLARITY_OFF = 0

IMU_DTYPE = np.dtype([
    ("t", "<i8"),
    ("wx", "<f8"), ("wy", "<f8"), ("wz", "<f8"),
    ("ax", "<f8"), ("ay", "<f8"), ("az", "<f8"),
    ("qw", "<f8"), ("qx", "<f8"), ("qy", "<f8"), ("qz", "<f8"),
    ("elapsed", "<i8"),
])

GNSS_DTYPE = np.dtype([
    ("t", "<i8"), ("lat", "<f8"), ("lon", "<f8"), ("alt", "<f8"), ("fix", "u1"),
])

# Invalid range readings are NaN.
RANGE_DTYPE = np.dtype([("t", "<i8"), ("range", "<f8")])

DEFAULT_CHUNK_EVENTS = 1 << 20


def make_events(t, x, y, p) -> np.ndarray:
    """Build an event record array from column data (padding zeroed)."""
    t = np.asarray(t)
    events = np.zeros(t.shape[0], dtype=EVENT_DTYPE)
    events["t"] = t
    events["x"] = x
    events["y"] = y
    events["p"] = p
    return events


def rechunk(chunks: Iterator[np.ndarray], size: int) -> Iterator[np.ndarray]:
    """Re-block an iterator of record arrays into arrays of exactly ``size`` (last may be short)."""
    if size < 1:
        raise ValueError(f"chunk size must be >= 1, got {size}")
    pending: List[np.ndarray] = []
    held = 0
    for chunk in chunks:
        start = 0
        while start < len(chunk):
            take = min(size - held, len(chunk) - start)
            pending.append(chunk[start:start + take])
            held += take
            start += take
            if held == size:
                yield np.concatenate(pending) if len(pending) > 1 else pending[0].copy()
                pending, held = [], 0
    if held:
        yield np.concatenate(pending) if len(pending) > 1 else pending[0].copy()


ChunkTransform = Callable[[np.ndarray], np.ndarray]


class EventStream:
    """Time-ordered events, read lazily in chunks.

    Backed by an in-memory array, a memory-mapped ``events.bin``, or a
    generator factory. ``map_chunks`` returns a new stream that applies a
    per-chunk transform (used to move timestamps to the global clock); the
    source is never modified, so a stream can be iterated any number of times
    and from several threads at once.
    """

    def __init__(
        self,
        array: Optional[np.ndarray] = None,
        path: Optional[Path] = None,
        factory: Optional[Callable[[], Iterator[np.ndarray]]] = None,
        transforms: tuple = (),
    ):
        if sum(src is not None for src in (array, path, factory)) != 1:
            raise ValueError("EventStream needs exactly one of array, path, factory")
        self._array = array
        self._path = Path(path) if path is not None else None
        self._factory = factory
        self._transforms = transforms

    @classmethod
    def from_array(cls, events: np.ndarray) -> "EventStream":
        if events.dtype != EVENT_DTYPE:
            raise RecordingFormatError(f"events: expected {EVENT_DTYPE}, got {events.dtype}")
        return cls(array=events)

    @classmethod
    def empty(cls) -> "EventStream":
        return cls(array=np.zeros(0, dtype=EVENT_DTYPE))

    @classmethod
    def from_file(cls, path: Path) -> "EventStream":
        path = Path(path)
        if not path.is_file():
            raise RecordingFormatError(f"missing file {path.name}")
        size = path.stat().st_size
        if size % EVENT_DTYPE.itemsize:
            raise RecordingFormatError(
                f"{path.name}: truncated record ({size} bytes is not a multiple of "
                f"{EVENT_DTYPE.itemsize})"
            )
        return cls(path=path)

    @classmethod
    def from_factory(cls, factory: Callable[[], Iterator[np.ndarray]]) -> "EventStream":
        return cls(factory=factory)

    @property
    def source_path(self) -> Optional[Path]:
        """The backing file when chunks are the file's records unchanged."""
        return self._path if not self._transforms else None

    @property
    def known_length(self) -> Optional[int]:
        """Event count when available without iterating."""
        if self._transforms:
            return None
        if self._array is not None:
            return len(self._array)
        if self._path is not None:
            return self._path.stat().st_size // EVENT_DTYPE.itemsize
        return None

    def _raw(self) -> np.ndarray:
        if self._array is not None:
            return self._array
        if self._path.stat().st_size == 0:
            return np.zeros(0, dtype=EVENT_DTYPE)
        return np.memmap(self._path, dtype=EVENT_DTYPE, mode="r")

    def _source_chunks(self, size: int) -> Iterator[np.ndarray]:
        if self._factory is not None:
            yield from rechunk(self._factory(), size)
            return
        raw = self._raw()
        for start in range(0, len(raw), size):
            yield np.array(raw[start:start + size])

    def chunks(self, size: int = DEFAULT_CHUNK_EVENTS) -> Iterator[np.ndarray]:
        """Yield record arrays of at most ``size`` events, in time order."""
        if size < 1:
            raise ValueError(f"chunk size must be >= 1, got {size}")
        if not self._transforms:
            yield from self._source_chunks(size)
            return

        def transformed():
            for chunk in self._source_chunks(size):
                for fn in self._transforms:
                    chunk = fn(chunk)
                if len(chunk):
                    yield chunk

        yield from rechunk(transformed(), size)

    def map_chunks(self, fn: ChunkTransform) -> "EventStream":
        return EventStream(
            array=self._array,
            path=self._path,
            factory=self._factory,
            transforms=self._transforms + (fn,),
        )

    def to_array(self, chunk_size: int = DEFAULT_CHUNK_EVENTS) -> np.ndarray:
        parts = list(self.chunks(chunk_size))
        if not parts:
            return np.zeros(0, dtype=EVENT_DTYPE)
        return np.concatenate(parts)

    def count(self, chunk_size: int = DEFAULT_CHUNK_EVENTS) -> int:
        known = self.known_length
        if known is not None:
            return known
        return sum(len(chunk) for chunk in self.chunks(chunk_size))

    def time_span(self, chunk_size: int = DEFAULT_CHUNK_EVENTS) -> Optional[tuple[int, int]]:
        """(first, last) timestamp, or None for an empty stream."""
        first = last = None
        for chunk in self.chunks(chunk_size):
            if first is None:
                first = int(chunk["t"][0])
            last = int(chunk["t"][-1])
        return None if first is None else (first, last)


@dataclass(frozen=True)
class FrameRecord:
    """One triggered RGB exposure; ``t_ns`` is the exposure midpoint."""

    pulse_index: int
    t_ns: int
    exposure_us: int
    filename: str


ImageLoader = Callable[[FrameRecord], np.ndarray]


@dataclass
class Recording:
    """All streams of one flight. Times are sensor-local until synchronized
    (``metadata.clock == "global"``)."""

    metadata: RecordingMetadata
    calib_event: CameraCalibration
    calib_rgb: CameraCalibration
    events: EventStream
    frames: List[FrameRecord] = field(default_factory=list)
    imu: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=IMU_DTYPE))
    gnss: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=GNSS_DTYPE))
    range: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=RANGE_DTYPE))
    triggers: Dict[str, np.ndarray] = field(default_factory=dict)
    root: Optional[Path] = None
    # Overrides reading frames/<filename> from root (the simulator renders lazily).
    image_loader: Optional[ImageLoader] = None

    def load_image(self, frame: FrameRecord) -> np.ndarray:
        if self.image_loader is not None:
            return self.image_loader(frame)
        if self.root is None:
            raise RecordingFormatError(f"no image source for frame {frame.filename}")
        return read_image(self.root / "frames" / frame.filename)

    def image_path(self, frame: FrameRecord) -> Optional[Path]:
        if self.image_loader is not None or self.root is None:
            return None
        return self.root / "frames" / frame.filename

    def with_changes(self, **changes) -> "Recording":
        return replace(self, **changes)
