# evortho - Gating Service

# Rejects aggressive-rotation and low-altitude intervals and picks keyframes
# at a fixed ground spacing from GNSS projected to UTM.

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Sequence

import numpy as np
from scipy.ndimage import median_filter

from ..common import NS_PER_MS, GatingError
from ..models.recording import FrameRecord, Recording
from ..models.schemas import FIX_CODES, GateConfig
from ..utils.csvio import parse_column, read_csv_columns, write_csv_columns
from ..utils.geodesy import latlon_to_utm_arrays
from ..utils.timeline import ValidityTimeline

logger = logging.getLogger(__name__)

KEYFRAME_HEADER = ("keyframe_index", "t_ns", "pulse_index", "rgb_filename")

# Absorbs sub-micrometre round-off of the lat/lon -> UTM round trip.
SPACING_EPS_M = 1e-6


def _hold_ends(t: np.ndarray) -> np.ndarray:
    """Sample-and-hold: each sample is in force until the next one (the last for 1 ns)."""
    return np.concatenate([t[1:], [t[-1] + 1]])


def rotation_gate(imu: np.ndarray, threshold_rad_s: float = 0.4, hold_ms: float = 100.0) -> ValidityTimeline:
    """Valid time of the IMU span; invalid while |omega| >= threshold and hold_ms after."""
    if len(imu) == 0:
        raise GatingError("rotation gate: empty IMU stream")
    t = imu["t"].astype(np.int64)
    norm = np.sqrt(imu["wx"] ** 2 + imu["wy"] ** 2 + imu["wz"] ** 2)
    bad = norm >= threshold_rad_s
    hold_ns = int(round(hold_ms * NS_PER_MS))
    invalid = ValidityTimeline.from_bounds(t[bad], _hold_ends(t)[bad] + hold_ns)
    return invalid.complement(int(t[0]), int(t[-1]) + 1)


def altitude_gate(rng: np.ndarray, min_agl_m: float = 20.0, window: int = 5) -> ValidityTimeline:
    """Valid where the median-filtered range is at least ``min_agl_m``. NaN readings are skipped."""
    ok = ~np.isnan(rng["range"])
    if not ok.any():
        raise GatingError("altitude gate: all range samples are invalid")
    t = rng["t"][ok].astype(np.int64)
    smoothed = median_filter(rng["range"][ok], size=window, mode="nearest")
    low = smoothed < min_agl_m
    invalid = ValidityTimeline.from_bounds(t[low], _hold_ends(t)[low])
    return invalid.complement(int(t[0]), int(t[-1]) + 1)


def greedy_spacing(east: np.ndarray, north: np.ndarray, spacing_m: float) -> List[int]:
    """Indices of the greedy forward walk: first point, then each point at least
    ``spacing_m`` from the previously emitted one."""
    if len(east) == 0:
        return []
    chosen = [0]
    last_e, last_n = east[0], north[0]
    for i in range(1, len(east)):
        if np.hypot(east[i] - last_e, north[i] - last_n) >= spacing_m - SPACING_EPS_M:
            chosen.append(i)
            last_e, last_n = east[i], north[i]
    return chosen


def select_keyframes(gnss: np.ndarray, timeline: ValidityTimeline, spacing_m: float = 2.0) -> np.ndarray:
    """Timestamps of fixes chosen every ``spacing_m`` metres inside ``timeline``."""
    usable = (gnss["fix"] != FIX_CODES["none"]) & timeline.contains(gnss["t"])
    fixes = gnss[usable]
    if len(fixes) == 0:
        raise GatingError("no valid GNSS fixes inside the validity timeline")
    east, north, _, _ = latlon_to_utm_arrays(fixes["lat"], fixes["lon"])
    chosen = greedy_spacing(east, north, spacing_m)
    return fixes["t"][chosen].astype(np.int64)


# ── Keyframe pairing ─────────────────────────────────────────────────────


@dataclass(frozen=True)
class Keyframe:
    keyframe_index: int
    t_ns: int
    pulse_index: int
    rgb_filename: str


def snap_keyframes(
    keyframe_times: Sequence[int],
    frames: List[FrameRecord],
    timeline: ValidityTimeline,
) -> List[Keyframe]:
    """Move each keyframe onto the nearest RGB exposure midpoint inside the timeline.

    Two keyframes landing on the same frame keep only the first.
    """
    usable = [f for f in frames if timeline.contains(f.t_ns)]
    if not usable:
        raise GatingError("no RGB frames inside the validity timeline")
    t_frames = np.array([f.t_ns for f in usable], dtype=np.int64)
    keyframes: List[Keyframe] = []
    taken = set()
    for t in np.asarray(keyframe_times, dtype=np.int64):
        pos = int(np.searchsorted(t_frames, t))
        candidates = [i for i in (pos - 1, pos) if 0 <= i < len(usable)]
        best = min(candidates, key=lambda i: (abs(int(t_frames[i]) - int(t)), i))
        if best in taken:
            continue
        taken.add(best)
        frame = usable[best]
        keyframes.append(Keyframe(len(keyframes), frame.t_ns, frame.pulse_index, frame.filename))
    return keyframes


def write_keyframes(path: Path, keyframes: List[Keyframe]) -> None:
    write_csv_columns(path, KEYFRAME_HEADER, [
        np.array([k.keyframe_index for k in keyframes], dtype=np.int64),
        np.array([k.t_ns for k in keyframes], dtype=np.int64),
        np.array([k.pulse_index for k in keyframes], dtype=np.int64),
        np.array([k.rgb_filename for k in keyframes], dtype=str),
    ])


def read_keyframes(path: Path) -> List[Keyframe]:
    cols = read_csv_columns(path, KEYFRAME_HEADER)
    index = parse_column(cols["keyframe_index"], np.int64, path, "keyframe_index")
    t = parse_column(cols["t_ns"], np.int64, path, "t_ns")
    pulse = parse_column(cols["pulse_index"], np.int64, path, "pulse_index")
    return [
        Keyframe(int(i), int(ts), int(p), str(name))
        for i, ts, p, name in zip(index, t, pulse, cols["rgb_filename"])
    ]


# ── Recording-level gating ──────────────────────────────────────────────


@dataclass
class GateResult:
    rotation: ValidityTimeline
    altitude: ValidityTimeline
    combined: ValidityTimeline
    # Stream spans the gates were evaluated over, [start, end).
    imu_span: tuple[int, int]
    range_span: tuple[int, int]

    @property
    def rotation_gaps(self) -> ValidityTimeline:
        return self.rotation.complement(*self.imu_span)

    @property
    def altitude_gaps(self) -> ValidityTimeline:
        return self.altitude.complement(*self.range_span)

    @property
    def dropped(self) -> ValidityTimeline:
        start = min(self.imu_span[0], self.range_span[0])
        end = max(self.imu_span[1], self.range_span[1])
        return self.combined.complement(start, end)


def gate_recording(rec: Recording, config: GateConfig) -> GateResult:
    if rec.metadata.clock != "global":
        raise GatingError("recording is not synchronized (manifest clock = local)")
    rotation = rotation_gate(rec.imu, config.omega_max, config.hold_ms)
    altitude = altitude_gate(rec.range, config.min_agl, config.median_window)
    t_range = rec.range["t"][~np.isnan(rec.range["range"])]
    result = GateResult(
        rotation=rotation,
        altitude=altitude,
        combined=rotation.intersect(altitude),
        imu_span=(int(rec.imu["t"][0]), int(rec.imu["t"][-1]) + 1),
        range_span=(int(t_range[0]), int(t_range[-1]) + 1),
    )
    if not result.combined:
        raise GatingError("no valid data")
    logger.info(
        "Gated %s: %d rotation gaps, %d altitude gaps, %.1f s valid",
        rec.metadata.sequence, len(result.rotation_gaps), len(result.altitude_gaps),
        result.combined.duration_ns / 1e9,
    )
    return result
