"""
evortho - Event Reconstruction Service

Per-pixel leaky log-intensity integrator:

    L(x, y) <- L(x, y) * exp(-(t - t_last) / tau) +/- c      on every event
    L       <- L * exp(-(t_frame - t_last) / tau)             when a frame is sampled

Decay is applied lazily per pixel on update and to the whole raster on
sampling, so cost is O(events + pixels per frame). Frames are sampled at
keyframe times from the events of a short window before each keyframe.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
from numba import njit

from ..common import NS_PER_US, ReconstructionError
from ..models.recording import DEFAULT_CHUNK_EVENTS, EventStream, FrameRecord
from ..models.schemas import ReconConfig
from ..utils.imaging import write_image
from .recording_service import write_frame_index

logger = logging.getLogger(__name__)

NEUTRAL_GRAY = 128


@njit(cache=True, nogil=True)
def _integrate(L, t_last, t, x, y, p, y0, c_on, c_off, tau_ns):
    """Apply events in order; returns the index of a per-pixel time regression or -1."""
    for i in range(t.size):
        yi = y[i] - y0
        xi = x[i]
        dt = t[i] - t_last[yi, xi]
        if dt < 0:
            return i
        step = c_on if p[i] != 0 else -c_off
        L[yi, xi] = L[yi, xi] * np.exp(-dt / tau_ns) + step
        t_last[yi, xi] = t[i]
    return -1


class ReconState:
    """Integrator raster in event-camera geometry.

    ``bands`` > 1 splits the raster into horizontal bands updated from a
    thread pool; each band sees its events in stream order, so results do not
    depend on the band count.
    """

    def __init__(self, width: int, height: int, config: Optional[ReconConfig] = None,
                 bands: int = 1, pool: Optional[ThreadPoolExecutor] = None):
        self.width = width
        self.height = height
        self.config = config or ReconConfig()
        self.L = np.zeros((height, width), dtype=np.float64)
        self.t_last = np.zeros((height, width), dtype=np.int64)
        self.last_event_t: Optional[int] = None
        self.events_integrated = 0
        self.band_edges = np.linspace(0, height, max(1, min(bands, height)) + 1).astype(np.int64)
        self.pool = pool if len(self.band_edges) > 2 else None

    @property
    def pristine(self) -> bool:
        return self.events_integrated == 0

    def _check(self, events: np.ndarray) -> None:
        if events["x"].max() >= self.width or events["y"].max() >= self.height:
            bad = np.flatnonzero((events["x"] >= self.width) | (events["y"] >= self.height))[0]
            raise ReconstructionError(f"event at index {int(bad)} outside the {self.width}x{self.height} sensor")
        t = events["t"]
        if self.last_event_t is not None and int(t[0]) < self.last_event_t:
            raise ReconstructionError("unsorted events: time regression at index 0 of the batch")
        regress = np.flatnonzero(t[1:] < t[:-1])
        if regress.size:
            raise ReconstructionError(f"unsorted events: time regression at index {int(regress[0]) + 1}")

    def _run_band(self, y0: int, y1: int, t, x, y, p) -> int:
        if y0 != 0 or y1 != self.height:
            sel = (y >= y0) & (y < y1)
            t, x, y, p = t[sel], x[sel], y[sel], p[sel]
        if not t.size:
            return -1
        cfg = self.config
        return _integrate(self.L[y0:y1], self.t_last[y0:y1], t, x, y, p, y0,
                          cfg.c_on, cfg.c_off, cfg.tau_ns)

    def update(self, events: np.ndarray) -> None:
        """Integrate a time-ordered batch of event records."""
        if not len(events):
            return
        self._check(events)
        t = events["t"].astype(np.int64)
        x = events["x"].astype(np.int64)
        y = events["y"].astype(np.int64)
        p = events["p"]
        edges = self.band_edges
        if self.pool is None:
            codes = [self._run_band(0, self.height, t, x, y, p)]
        else:
            futures = [self.pool.submit(self._run_band, int(edges[i]), int(edges[i + 1]), t, x, y, p)
                       for i in range(len(edges) - 1)]
            codes = [f.result() for f in futures]
        if any(code >= 0 for code in codes):
            raise ReconstructionError("event time precedes the last update at its pixel")
        self.last_event_t = int(t[-1])
        self.events_integrated += len(events)

    def decay_to(self, t_ns: int) -> None:
        dt = t_ns - self.t_last
        if dt.min() < 0:
            raise ReconstructionError(f"frame time {t_ns} precedes pixel updates")
        self.L *= np.exp(-dt / self.config.tau_ns)
        self.t_last[:] = t_ns


def update(state: ReconState, event: np.ndarray) -> None:
    """Single-event (or batch) update."""
    state.update(np.atleast_1d(event))


def synthesize_frame(state: ReconState, events_in_window: np.ndarray, t_frame_ns: int) -> np.ndarray:
    """Apply the window's events, decay to ``t_frame_ns`` and return a copy of L."""
    if len(events_in_window) and int(events_in_window["t"].max()) >= t_frame_ns:
        raise ReconstructionError("window events must precede the frame time")
    state.update(events_in_window)
    state.decay_to(t_frame_ns)
    return state.L.copy()


def tone_map(raster: np.ndarray, lo_pct: float = 1.0, hi_pct: float = 99.0) -> np.ndarray:
    """Affine map sending the lo/hi percentiles to 0/255, clamped and rounded."""
    lo, hi = np.percentile(raster, [lo_pct, hi_pct])
    if hi <= lo:
        out = np.full(raster.shape, NEUTRAL_GRAY, dtype=np.uint8)
        out[raster > hi] = 255
        out[raster < lo] = 0
        return out
    scaled = (raster - lo) * (255.0 / (hi - lo))
    return np.rint(np.clip(scaled, 0.0, 255.0)).astype(np.uint8)


def _check_order(t: np.ndarray, offset: int, last_t: Optional[int]) -> None:
    if last_t is not None and int(t[0]) < last_t:
        raise ReconstructionError(f"unsorted events: time regression at index {offset}")
    regress = np.flatnonzero(t[1:] < t[:-1])
    if regress.size:
        raise ReconstructionError(f"unsorted events: time regression at index {offset + int(regress[0]) + 1}")


def reconstruct_at_keyframes(
    events: EventStream,
    keyframe_times: Sequence[int],
    config: ReconConfig,
    width: int,
    height: int,
    chunk_size: int = DEFAULT_CHUNK_EVENTS,
    workers: int = 1,
) -> List[Tuple[int, np.ndarray]]:
    """One tone-mapped frame per keyframe.

    The window of keyframe k is [max(t_k - window, t_{k-1}), t_k). Output is
    identical for every chunk size and worker count.
    """
    times = np.asarray(keyframe_times, dtype=np.int64)
    if np.any(np.diff(times) < 0):
        raise ReconstructionError("keyframe times must be sorted")

    pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
    state = ReconState(width, height, config, bands=workers, pool=pool)
    frames: List[Tuple[int, np.ndarray]] = []
    neutral = 0

    def window(k: int) -> Tuple[int, int]:
        lo = int(times[k]) - config.window_ns
        if k > 0:
            lo = max(lo, int(times[k - 1]))
        return lo, int(times[k])

    def emit(k: int) -> None:
        nonlocal neutral
        t_k = int(times[k])
        if state.pristine:
            neutral += 1
            state.decay_to(t_k)
            frames.append((t_k, np.full((height, width), NEUTRAL_GRAY, dtype=np.uint8)))
        else:
            state.decay_to(t_k)
            frames.append((t_k, tone_map(state.L, config.tone_lo, config.tone_hi)))

    k = 0
    seen = 0
    last_t = None
    try:
        for chunk in events.chunks(chunk_size):
            if k == len(times):
                break
            t = chunk["t"].astype(np.int64)
            _check_order(t, seen, last_t)
            seen += len(t)
            last_t = int(t[-1])
            start = 0
            while k < len(times) and start < len(chunk):
                lo, hi = window(k)
                i0 = start + int(np.searchsorted(t[start:], lo, side="left"))
                i1 = start + int(np.searchsorted(t[start:], hi, side="left"))
                state.update(chunk[i0:i1])
                if i1 < len(chunk):
                    emit(k)
                    k += 1
                    start = i1
                else:
                    start = len(chunk)
        while k < len(times):
            emit(k)
            k += 1
    finally:
        if pool is not None:
            pool.shutdown()

    if neutral:
        logger.warning("%d of %d keyframes precede all events; emitted neutral frames",
                       neutral, len(times))
    logger.info("Reconstructed %d frames from %d events", len(frames), state.events_integrated)
    return frames


def write_recon_frames(
    out_dir: Path,
    frames: List[Tuple[int, np.ndarray]],
    pulse_indices: Sequence[int],
    window_ns: int,
) -> List[FrameRecord]:
    """Write ``<out_dir>/kf_NNNNN.png`` plus ``index.csv`` (frames/index.csv layout)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records = []
    for i, ((t_ns, img), pulse) in enumerate(zip(frames, pulse_indices)):
        name = f"kf_{i:05d}.png"
        write_image(out_dir / name, img)
        records.append(FrameRecord(int(pulse), int(t_ns), window_ns // NS_PER_US, name))
    write_frame_index(out_dir / "index.csv", records)
    return records
