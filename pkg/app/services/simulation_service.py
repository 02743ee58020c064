# evortho - Simulation Service

# Synthetic recordings with exact ground truth: a textured ground plane, a
# lawnmower (or crosshatch) flight with stop-and-turn waypoints, ideal
# threshold-crossing events, triggered RGB frames, IMU / GNSS / range streams
# and sync pulses observed through per-sensor affine clocks.

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import cv2
import numpy as np
import numba
from numba import njit, prange
from scipy.spatial.transform import Rotation

from ..common import NS_PER_MS, NS_PER_S, ConfigError, SimulationError, format_key_value_text
from ..models.recording import (
    GNSS_DTYPE,
    IMU_DTYPE,
    POLARITY_OFF,
    POLARITY_ON,
    RANGE_DTYPE,
    EventStream,
    FrameRecord,
    Recording,
    make_events,
)
from ..models.schemas import (
    FIX_CODES,
    CameraCalibration,
    ClockModel,
    FlightPlan,
    PulsePattern,
    RecordingMetadata,
    SimulationConfig,
    UtmPoint,
)
from ..utils.camera import matrix_to_quat, nadir_rotation, pixel_rays
from ..utils.geodesy import latlon_to_utm, utm_to_latlon_arrays
from ..utils.imaging import read_image, write_image, write_world_file
from .recording_service import write_recording
from .sync_service import pattern_template, to_sensor

logger = logging.getLogger(__name__)

GRAVITY = 9.81
# Normalized intensity floor inside the log, keeps black texels finite.
LOG_EPS = 1e-3
SLAB_SAMPLES = 50
MIN_TEXTURE_TEXELS = 512
# Exposure at which an RGB frame reproduces the texture at unit irradiance.
REFERENCE_EXPOSURE_US = 5_000


# ── Sequence catalog ─────────────────────────────────────────────────────


@dataclass(frozen=True)
class SequencePreset:
    name: str
    duration_s: float
    area: str
    time_of_day: str
    height_m: float
    speed_m_s: float
    bias_on: int
    bias_off: int
    overlap_pct: float
    crosshatch: bool
    illumination: str


PRESETS: Dict[str, SequencePreset] = {
    p.name: p
    for p in (
        SequencePreset("F1.D.1", 514, "A", "Noon", 40, 3, 0, 0, 82, False, "Cloudy"),
        SequencePreset("F1.D.2", 507, "A", "Noon", 40, 3, 50, 50, 82, False, "Cloudy"),
        SequencePreset("F2.D.1", 615, "A", "Afternoon", 40, 3, 50, 50, 64, False, "Sunny"),
        SequencePreset("F2.D.2", 614, "B", "Afternoon", 40, 3, 100, 100, 64, False, "Sunny"),
        SequencePreset("F2.D.3", 528, "A", "Evening", 40, 3, 50, 50, 64, False, "Sunny"),
        SequencePreset("F2.D.4", 541, "A", "Evening", 40, 3, 0, 0, 64, False, "Sunny"),
        SequencePreset("F2.N.1", 555, "A", "Sunset", 40, 3, 0, 0, 64, False, ""),
        SequencePreset("F2.N.2", 554, "A", "Dusk", 40, 3, 50, 50, 64, False, ""),
        SequencePreset("F2.N.3", 541, "A", "Night", 40, 3, 100, 100, 64, False, ""),
        SequencePreset("F3.D.1", 1282, "A", "Afternoon", 35, 3, 0, 0, 80, True, "Cloudy"),
        SequencePreset("F3.D.2", 671, "A", "Afternoon", 40, 3, 0, 0, 82, False, "Cloudy"),
        SequencePreset("F3.D.3", 558, "A", "Evening", 35, 6, 0, 0, 80, False, "Cloudy"),
        SequencePreset("F3.D.4", 489, "A", "Evening", 35, 9, 0, 0, 80, False, "Cloudy"),
        SequencePreset("F3.N.1", 832, "A", "Sunset", 35, 3, 0, 0, 80, False, ""),
        SequencePreset("F3.N.2", 853, "A", "Dusk", 35, 3, 0, 0, 80, False, ""),
    )
}

SMALL_SUFFIX = "-small"
SMALL_TRACK_LENGTH_M = 30.0
SMALL_TRACKS = 3
FULL_TRACK_LENGTH_M = 200.0

# Irradiance relative to a cloudy noon, by (time of day, sky).
_IRRADIANCE = {
    ("Noon", "Cloudy"): 1.0,
    ("Afternoon", "Sunny"): 1.7,
    ("Afternoon", "Cloudy"): 0.9,
    ("Evening", "Sunny"): 1.2,
    ("Evening", "Cloudy"): 0.7,
    ("Sunset", ""): 0.3,
    ("Dusk", ""): 0.12,
    ("Night", ""): 0.04,
}


def resolve_preset(name: str) -> Tuple[SequencePreset, bool]:
    """Catalog entry for ``F1.D.1`` or ``F1.D.1-small``; the flag marks the desk-scale variant."""
    small = name.endswith(SMALL_SUFFIX)
    base = name[: -len(SMALL_SUFFIX)] if small else name
    if base not in PRESETS:
        raise ConfigError(f"unknown simulate.preset {name!r} (known: {', '.join(PRESETS)})")
    return PRESETS[base], small


@dataclass(frozen=True)
class Photometry:
    irradiance: float
    exposure_us: int
    read_noise_dn: float


def preset_photometry(preset: SequencePreset) -> Photometry:
    """Brighter sky, shorter exposure; dark sequences get long exposures and more noise."""
    irradiance = _IRRADIANCE.get((preset.time_of_day, preset.illumination), 1.0)
    if irradiance >= 0.7:
        return Photometry(irradiance, 5_000, 1.0)
    if irradiance >= 0.3:
        return Photometry(irradiance, 10_000, 3.0)
    return Photometry(irradiance, 15_000, 6.0)


# ── Trajectory ───────────────────────────────────────────────────────────


@dataclass
class TrajectorySample:
    """Vectorized rig state. ``position`` is world (east, north, altitude MSL)."""

    t_s: np.ndarray
    position: np.ndarray
    velocity: np.ndarray
    acceleration: np.ndarray
    heading: np.ndarray
    yaw_rate: np.ndarray
    agl: np.ndarray

    @property
    def rotation(self) -> np.ndarray:
        """Rig-to-world rotations (n, 3, 3)."""
        return nadir_rotation(self.heading)


def _raised_cosine(tau):
    return (1.0 - np.cos(np.pi * tau)) / 2.0


class _Segment:
    kind = "segment"
    duration = 0.0

    def evaluate(self, u: np.ndarray):
        raise NotImplementedError


@dataclass
class _Hover(_Segment):
    point: np.ndarray
    heading: float
    duration: float
    kind = "hover"

    def evaluate(self, u):
        n = u.size
        zero = np.zeros((n, 3))
        return np.tile(self.point, (n, 1)), zero, zero.copy(), np.full(n, self.heading), np.zeros(n)


@dataclass
class _Move(_Segment):
    """Straight move at ``speed`` with raised-cosine acceleration over ``ramp_s``."""

    start: np.ndarray
    end: np.ndarray
    speed: float
    ramp_s: float
    heading: float
    kind: str = "leg"
    duration: float = field(init=False)

    def __post_init__(self):
        self.length = float(np.linalg.norm(self.end - self.start))
        self.direction = (self.end - self.start) / self.length
        v = self.speed
        self.ramp = min(self.ramp_s, self.length / v)
        self.cruise = (self.length - v * self.ramp) / v
        self.duration = 2.0 * self.ramp + self.cruise

    def evaluate(self, u):
        v, tr, tc = self.speed, self.ramp, self.cruise
        s = np.empty_like(u)
        sd = np.empty_like(u)
        sdd = np.zeros_like(u)
        up = u < tr
        mid = (u >= tr) & (u < tr + tc)
        down = u >= tr + tc
        if tr > 0:
            a = u[up]
            s[up] = v * (a / 2.0 - tr / (2.0 * np.pi) * np.sin(np.pi * a / tr))
            sd[up] = v * (1.0 - np.cos(np.pi * a / tr)) / 2.0
            sdd[up] = v * np.pi / (2.0 * tr) * np.sin(np.pi * a / tr)
            b = np.minimum(u[down] - tr - tc, tr)
            s[down] = v * tr / 2.0 + v * tc + v * (b / 2.0 + tr / (2.0 * np.pi) * np.sin(np.pi * b / tr))
            sd[down] = v * (1.0 + np.cos(np.pi * b / tr)) / 2.0
            sdd[down] = -v * np.pi / (2.0 * tr) * np.sin(np.pi * b / tr)
        else:
            s[up | down] = np.clip(u[up | down] * v, 0.0, self.length)
            sd[up | down] = v
        s[mid] = v * tr / 2.0 + v * (u[mid] - tr)
        sd[mid] = v
        d = self.direction
        n = u.size
        return (self.start + s[:, None] * d, sd[:, None] * d, sdd[:, None] * d,
                np.full(n, self.heading), np.zeros(n))


@dataclass
class _Turn(_Segment):
    """Yaw in place from ``h0`` by ``delta`` with a raised-cosine rate of peak ``peak_rate``."""

    point: np.ndarray
    h0: float
    delta: float
    peak_rate: float
    kind = "turn"
    duration: float = field(init=False)

    def __post_init__(self):
        self.duration = abs(self.delta) * np.pi / (2.0 * self.peak_rate)

    def evaluate(self, u):
        tau = np.clip(u / self.duration, 0.0, 1.0)
        n = u.size
        zero = np.zeros((n, 3))
        heading = self.h0 + self.delta * _raised_cosine(tau)
        rate = self.delta * np.pi / (2.0 * self.duration) * np.sin(np.pi * tau)
        return np.tile(self.point, (n, 1)), zero, zero.copy(), heading, rate


class Trajectory:
    """Piecewise rig trajectory in local metres (x east, y north, z AGL).

    ``origin`` (east, north, ground altitude MSL) places it in the world.
    """

    def __init__(self, segments: List[_Segment], origin: Tuple[float, float, float] = (0.0, 0.0, 0.0)):
        if not segments:
            raise SimulationError("empty trajectory")
        self.segments = segments
        self.origin = np.asarray(origin, dtype=np.float64)
        self.starts = np.concatenate([[0.0], np.cumsum([s.duration for s in segments])])

    @property
    def duration(self) -> float:
        return float(self.starts[-1])

    def placed(self, origin: Tuple[float, float, float]) -> "Trajectory":
        return Trajectory(self.segments, origin)

    def intervals(self, kind: str) -> List[Tuple[float, float]]:
        """(start, end) seconds of every segment of ``kind``."""
        return [(float(self.starts[i]), float(self.starts[i + 1]))
                for i, seg in enumerate(self.segments) if seg.kind == kind]

    def sample(self, t_s) -> TrajectorySample:
        t = np.clip(np.atleast_1d(np.asarray(t_s, dtype=np.float64)), 0.0, self.duration)
        n = t.size
        pos = np.empty((n, 3))
        vel = np.empty((n, 3))
        acc = np.empty((n, 3))
        heading = np.empty(n)
        rate = np.empty(n)
        idx = np.clip(np.searchsorted(self.starts, t, side="right") - 1, 0, len(self.segments) - 1)
        for i in np.unique(idx):
            sel = idx == i
            p, v, a, h, r = self.segments[i].evaluate(t[sel] - self.starts[i])
            pos[sel], vel[sel], acc[sel], heading[sel], rate[sel] = p, v, a, h, r
        return TrajectorySample(
            t_s=t, position=pos + self.origin, velocity=vel, acceleration=acc,
            heading=heading, yaw_rate=rate, agl=pos[:, 2],
        )


def track_spacing(altitude_agl: float, fov_lateral_deg: float, overlap: float) -> float:
    """Spacing between parallel tracks for a given lateral image overlap."""
    if not 0.0 <= overlap < 1.0:
        raise SimulationError(f"overlap must be in [0, 1), got {overlap}")
    footprint = 2.0 * altitude_agl * np.tan(np.radians(fov_lateral_deg) / 2.0)
    return footprint * (1.0 - overlap)


def _lawnmower(e_min, e_max, n_min, n_max, spacing, along_east=True) -> List[Tuple[float, float]]:
    """Waypoints of back-and-forth tracks; tracks run east-west unless ``along_east`` is False."""
    if along_east:
        lanes = np.arange(n_min, n_max + 1e-9, spacing)
        ends = (e_min, e_max)
    else:
        lanes = np.arange(e_min, e_max + 1e-9, spacing)
        ends = (n_min, n_max)
    points = []
    for i, lane in enumerate(lanes):
        a, b = ends if i % 2 == 0 else ends[::-1]
        for along in (a, b):
            points.append((along, lane) if along_east else (lane, along))
    return points


def plan_flight(plan: FlightPlan, fov_lateral_deg: float) -> Trajectory:
    """Hover, climb, survey tracks joined by stop-and-turn waypoints, descend, hover."""
    if plan.overlap is not None and plan.overlap >= 1.0:
        raise SimulationError(f"overlap must be below 1, got {plan.overlap}")
    spacing = plan.track_spacing or track_spacing(plan.altitude_agl, fov_lateral_deg, plan.overlap)

    waypoints = _lawnmower(plan.east_min, plan.east_max, plan.north_min, plan.north_max, spacing)
    if plan.pattern == "crosshatch":
        waypoints += _lawnmower(plan.east_min, plan.east_max, plan.north_min, plan.north_max,
                                spacing, along_east=False)

    h = plan.altitude_agl
    start_agl = plan.start_agl if plan.start_agl is not None else h
    e0, n0 = waypoints[0]
    heading = 0.0
    for e, n in waypoints[1:]:
        if (e, n) != (e0, n0):
            heading = float(np.arctan2(n - n0, e - e0))
            break

    segments: List[_Segment] = []
    here = np.array([e0, n0, start_agl])
    if plan.hover_s > 0:
        segments.append(_Hover(here.copy(), heading, plan.hover_s))
    if start_agl != h:
        top = np.array([e0, n0, h])
        segments.append(_Move(here, top, plan.climb_rate, plan.ramp_s, heading, kind="climb"))
        here = top

    for e, n in waypoints[1:]:
        target = np.array([e, n, h])
        if np.allclose(target, here, atol=1e-9):
            continue
        wanted = float(np.arctan2(n - here[1], e - here[0]))
        delta = (wanted - heading + np.pi) % (2.0 * np.pi) - np.pi
        if abs(delta) > 1e-9:
            if abs(abs(delta) - np.pi) < 1e-9:
                delta = np.pi
            segments.append(_Turn(here.copy(), heading, delta, plan.turn_rate_peak))
            heading += delta
        segments.append(_Move(here, target, plan.speed, plan.ramp_s, heading))
        here = target

    if start_agl != h:
        bottom = np.array([here[0], here[1], start_agl])
        segments.append(_Move(here, bottom, plan.climb_rate, plan.ramp_s, heading, kind="descent"))
        here = bottom
    if plan.hover_s > 0:
        segments.append(_Hover(here.copy(), heading, plan.hover_s))
    return Trajectory(segments)


# ── Scene ────────────────────────────────────────────────────────────────


@dataclass
class ScenePlane:
    """Flat textured ground. ``origin`` is the UTM centre of the top-left texel."""

    texture: np.ndarray
    texel_m: float
    origin: UtmPoint
    ground_alt: float

    def __post_init__(self):
        if self.texel_m <= 0:
            raise SimulationError("meters per texel must be positive")
        if self.texture.ndim == 2:
            self.texture = np.repeat(self.texture[..., None], 3, axis=-1)
        lum = self.texture[..., :3].astype(np.float64) @ np.array([0.299, 0.587, 0.114])
        self.log_luminance = np.log(lum / 255.0 + LOG_EPS)

    def write(self, path: Path) -> None:
        write_image(path, self.texture)
        write_world_file(Path(path).with_suffix(".wld"), self.texel_m,
                         self.origin.easting, self.origin.northing)


def make_texture(kind: str, rows: int, cols: int, texel_m: float, checker_m: float) -> np.ndarray:
    """Checkerboard with a low-frequency colour gradient, a flat gray field, or an image file."""
    if kind == "constant":
        return np.full((rows, cols, 3), 128, dtype=np.uint8)
    if kind != "checkerboard":
        path = Path(kind)
        if not path.is_file():
            raise ConfigError(f"simulate.scene: no builtin scene or image named {kind!r}")
        img = read_image(path)
        return np.repeat(img[..., None], 3, axis=-1) if img.ndim == 2 else img
    r, c = np.mgrid[0:rows, 0:cols].astype(np.float64)
    squares = (np.floor(c * texel_m / checker_m) + np.floor(r * texel_m / checker_m)) % 2 == 0
    light = np.array([176.0, 160.0, 128.0])
    dark = np.array([72.0, 88.0, 104.0])
    img = np.where(squares[..., None], light, dark)
    u = c / max(cols - 1, 1)
    v = r / max(rows - 1, 1)
    img[..., 0] += 48.0 * (u - 0.5)
    img[..., 1] += 48.0 * (v - 0.5)
    img[..., 2] += 24.0 * np.sin(np.pi * (u + v))
    return np.rint(np.clip(img, 0.0, 255.0)).astype(np.uint8)


def _rays_to_ground(calib: CameraCalibration, R_wc: np.ndarray, center: np.ndarray,
                    ground_alt: float) -> Tuple[np.ndarray, np.ndarray]:
    if center[2] <= ground_alt:
        raise SimulationError(f"camera at {center[2]:.2f} m is not above the ground plane ({ground_alt:.2f} m)")
    rays = pixel_rays(calib) @ R_wc.T
    dz = rays[..., 2]
    if dz.max() >= 0:
        raise SimulationError("camera view does not point at the ground")
    k = (ground_alt - center[2]) / dz
    return center[0] + k * rays[..., 0], center[1] + k * rays[..., 1]


def _sample_texture(scene: ScenePlane, east: np.ndarray, north: np.ndarray) -> np.ndarray:
    col = ((east - scene.origin.easting) / scene.texel_m).astype(np.float32)
    row = ((scene.origin.northing - north) / scene.texel_m).astype(np.float32)
    tex = scene.texture.astype(np.float32)
    return cv2.remap(tex, col, row, interpolation=cv2.INTER_LINEAR, borderMode=cv2.BORDER_REPLICATE)


def render_view(scene: ScenePlane, calib: CameraCalibration, R_wc: np.ndarray, center: np.ndarray) -> np.ndarray:
    """Float RGB image of the plane seen from one pose (ray-plane hit, bilinear texel)."""
    east, north = _rays_to_ground(calib, R_wc, center, scene.ground_alt)
    return _sample_texture(scene, east, north).astype(np.float64)


def render_rgb(
    poses: Sequence[Tuple[np.ndarray, np.ndarray]],
    scene: ScenePlane,
    calib: CameraCalibration,
    gain: float = 1.0,
    read_noise_dn: float = 0.0,
    rng: Optional[np.random.Generator] = None,
) -> np.ndarray:
    """8-bit frame averaged over sub-exposure ``(R_wc, center)`` poses (one pose: no blur)."""
    if not poses:
        raise SimulationError("render_rgb needs at least one pose")
    acc = np.zeros((calib.height, calib.width, 3))
    for R_wc, center in poses:
        acc += render_view(scene, calib, R_wc, np.asarray(center, dtype=np.float64))
    img = acc / len(poses) * gain
    if read_noise_dn > 0:
        img = img + (rng or np.random.default_rng(0)).normal(0.0, read_noise_dn, img.shape)
    return np.rint(np.clip(img, 0.0, 255.0)).astype(np.uint8)


# ── Event generation ────────────────────────────────────────────────────


@njit(parallel=True, cache=True)
def _render_log(R, C, rays, log_tex, origin_e, origin_n, texel, ground, out):
    S = R.shape[0]
    N = rays.shape[0]
    th, tw = log_tex.shape
    for n in prange(N):
        rx, ry, rz = rays[n, 0], rays[n, 1], rays[n, 2]
        for s in range(S):
            dx = R[s, 0, 0] * rx + R[s, 0, 1] * ry + R[s, 0, 2] * rz
            dy = R[s, 1, 0] * rx + R[s, 1, 1] * ry + R[s, 1, 2] * rz
            dz = R[s, 2, 0] * rx + R[s, 2, 1] * ry + R[s, 2, 2] * rz
            k = (ground - C[s, 2]) / dz
            col = (C[s, 0] + k * dx - origin_e) / texel
            row = (origin_n - (C[s, 1] + k * dy)) / texel
            col = min(max(col, 0.0), tw - 1.0)
            row = min(max(row, 0.0), th - 1.0)
            c0 = min(int(col), max(tw - 2, 0))
            r0 = min(int(row), max(th - 2, 0))
            c1 = min(c0 + 1, tw - 1)
            r1 = min(r0 + 1, th - 1)
            fc = col - c0
            fr = row - r0
            top = log_tex[r0, c0] * (1.0 - fc) + log_tex[r0, c1] * fc
            bottom = log_tex[r1, c0] * (1.0 - fc) + log_tex[r1, c1] * fc
            out[s, n] = top * (1.0 - fr) + bottom * fr


@njit(parallel=True, cache=True)
def _count_crossings(L, ref, contrast, counts):
    S, N = L.shape
    for n in prange(N):
        r = ref[n]
        c = 0
        for s in range(S):
            b = L[s, n]
            while b - r >= contrast:
                r += contrast
                c += 1
            while r - b >= contrast:
                r -= contrast
                c += 1
        counts[n] = c


@njit(parallel=True, cache=True)
def _fill_crossings(L, times, t_prev, prev, ref, contrast, offsets, out_t, out_pix, out_p):
    S, N = L.shape
    for n in prange(N):
        r = ref[n]
        a = prev[n]
        ta = t_prev
        k = offsets[n]
        for s in range(S):
            b = L[s, n]
            tb = times[s]
            while b - r >= contrast:
                r += contrast
                out_t[k] = ta + np.int64(np.floor((r - a) / (b - a) * (tb - ta) + 0.5))
                out_pix[k] = n
                out_p[k] = 1
                k += 1
            while r - b >= contrast:
                r -= contrast
                out_t[k] = ta + np.int64(np.floor((r - a) / (b - a) * (tb - ta) + 0.5))
                out_pix[k] = n
                out_p[k] = 0
                k += 1
            a = b
            ta = tb
        ref[n] = r
        prev[n] = a


@dataclass
class ThresholdState:
    """Per-pixel log level at the last event (``ref``) and at the last sample (``prev``)."""

    ref: np.ndarray
    prev: np.ndarray
    t_prev: int

    @classmethod
    def from_frame(cls, log_frame: np.ndarray, t_ns: int) -> "ThresholdState":
        flat = np.ascontiguousarray(log_frame, dtype=np.float64).ravel()
        return cls(ref=flat.copy(), prev=flat.copy(), t_prev=int(t_ns))


def threshold_crossings(
    state: ThresholdState,
    log_frames: np.ndarray,
    times_ns: np.ndarray,
    contrast: float,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Events for log frames (S, N) sampled at ``times_ns`` after ``state.t_prev``.

    Each crossing of ref +/- contrast is one event, timestamped by linear
    interpolation between samples. Returns (t, pixel, polarity) in time
    order; ties keep per-pixel emission order. ``state`` advances.
    """
    L = np.ascontiguousarray(log_frames, dtype=np.float64).reshape(len(times_ns), -1)
    times = np.asarray(times_ns, dtype=np.int64)
    if times.size and (times[0] <= state.t_prev or np.any(np.diff(times) <= 0)):
        raise SimulationError("supersample times must increase")
    counts = np.zeros(L.shape[1], dtype=np.int64)
    _count_crossings(L, state.ref, contrast, counts)
    offsets = np.concatenate([[0], np.cumsum(counts)[:-1]]).astype(np.int64)
    total = int(counts.sum())
    out_t = np.empty(total, dtype=np.int64)
    out_pix = np.empty(total, dtype=np.int64)
    out_p = np.empty(total, dtype=np.uint8)
    _fill_crossings(L, times, state.t_prev, state.prev, state.ref, contrast, offsets, out_t, out_pix, out_p)
    if times.size:
        state.t_prev = int(times[-1])
    order = np.lexsort((out_pix, out_t))
    return out_t[order], out_pix[order], out_p[order]


def thin_events(n: int, allowed: int) -> np.ndarray:
    """Evenly spread indices keeping ``allowed`` of ``n`` events."""
    if n <= allowed:
        return np.arange(n)
    return (np.arange(allowed, dtype=np.int64) * n) // allowed


class EventGenerator:
    """Ideal event camera flown along a trajectory, one time slab at a time.

    ``slabs()`` is re-iterable and deterministic; ``generated`` and
    ``dropped`` describe the last complete pass.
    """

    def __init__(
        self,
        trajectory: Trajectory,
        scene: ScenePlane,
        calib: CameraCalibration,
        contrast: float,
        max_event_rate: float,
        supersample_hz: float = 1000.0,
        t_end_ns: Optional[int] = None,
    ):
        self.trajectory = trajectory
        self.scene = scene
        self.calib = calib
        self.contrast = contrast
        self.max_event_rate = max_event_rate
        self.step_ns = int(round(NS_PER_S / supersample_hz))
        self.t_end_ns = t_end_ns if t_end_ns is not None else int(round(trajectory.duration * NS_PER_S))
        self.rays = np.ascontiguousarray(pixel_rays(calib).reshape(-1, 3))
        self.generated = 0
        self.dropped = 0

    def _log_frames(self, times_ns: np.ndarray) -> np.ndarray:
        sample = self.trajectory.sample(times_ns / NS_PER_S)
        R = np.ascontiguousarray(sample.rotation @ self.calib.rotation)
        C = np.ascontiguousarray(sample.position)
        if np.any(C[:, 2] <= self.scene.ground_alt):
            raise SimulationError("event camera at or below the ground plane")
        out = np.empty((len(times_ns), self.rays.shape[0]))
        origin = self.scene.origin
        _render_log(R, C, self.rays, self.scene.log_luminance, origin.easting, origin.northing,
                    self.scene.texel_m, self.scene.ground_alt, out)
        return out

    def slabs(self) -> Iterator[np.ndarray]:
        """Global-time event record arrays, time-ordered across slabs."""
        times = np.arange(0, self.t_end_ns + 1, self.step_ns, dtype=np.int64)
        generated = dropped = 0
        state = ThresholdState.from_frame(self._log_frames(times[:1])[0], int(times[0]))
        width = self.calib.width
        for start in range(1, len(times), SLAB_SAMPLES):
            slab = times[start:start + SLAB_SAMPLES]
            t_prev = state.t_prev
            t, pix, p = threshold_crossings(state, self._log_frames(slab), slab, self.contrast)
            generated += len(t)
            allowed = int(self.max_event_rate * (int(slab[-1]) - t_prev) / NS_PER_S)
            if len(t) > allowed:
                keep = thin_events(len(t), allowed)
                dropped += len(t) - len(keep)
                t, pix, p = t[keep], pix[keep], p[keep]
            if len(t):
                yield make_events(t.astype(np.uint64), pix % width, pix // width,
                                  np.where(p == 1, POLARITY_ON, POLARITY_OFF))
        self.generated, self.dropped = generated, dropped
        if dropped:
            logger.warning("event rate cap: dropped %d of %d events", dropped, generated)


def generate_events(
    trajectory: Trajectory,
    scene: ScenePlane,
    event_calib: CameraCalibration,
    contrast: float,
    max_event_rate: float,
    supersample_hz: float = 1000.0,
) -> EventStream:
    """Lazy global-time event stream of the whole flight."""
    generator = EventGenerator(trajectory, scene, event_calib, contrast, max_event_rate, supersample_hz)
    return EventStream.from_factory(generator.slabs)


# ── Sensor streams ───────────────────────────────────────────────────────


@dataclass
class SensorStreams:
    imu: np.ndarray
    gnss: np.ndarray
    range: np.ndarray
    triggers: Dict[str, np.ndarray]
    # Global slot of every observed pulse, per sensor.
    trigger_slots: Dict[str, np.ndarray]


def _clock(config: SimulationConfig, sensor: str) -> ClockModel:
    scale, offset = config.clock(sensor)
    return ClockModel(scale=scale, offset_ns=offset)


def emit_sensor_streams(
    trajectory: Trajectory,
    config: SimulationConfig,
    zone: int,
    southern: bool,
    rng: np.random.Generator,
) -> SensorStreams:
    """IMU, GNSS, range and trigger observations in their own clocks."""
    pattern = PulsePattern.parse(config.pattern)
    period = pattern.period_ns
    t_end = int(round(trajectory.duration * NS_PER_S))

    triggers, trigger_slots = {}, {}
    for sensor in ("event", "rgb", "imu", "gnss"):
        slow = pattern.slow_ratio if sensor == "gnss" else 1
        slots = pattern_template(pattern, t_end // (period * slow) + 1) * slow
        slots = slots[config.drop_prefix.get(sensor, 0):]
        if slots.size < 2:
            raise SimulationError(f"{sensor}: flight too short for the sync pattern")
        model = _clock(config, sensor)
        local = model.scale * (slots * period).astype(np.float64) + model.offset_ns
        if config.jitter_ns > 0:
            local = local + rng.normal(0.0, config.jitter_ns, local.shape)
        triggers[sensor] = np.rint(local).astype(np.int64)
        trigger_slots[sensor] = slots

    # IMU: sampled from the first observed pulse on, stamped with time since the last pulse.
    imu_clock = _clock(config, "imu")
    step = int(round(NS_PER_S / config.imu_rate_hz))
    t_imu = np.arange(int(trigger_slots["imu"][0]) * period, t_end + 1, step, dtype=np.int64)
    s = trajectory.sample(t_imu / NS_PER_S)
    R_wb = s.rotation
    omega = np.einsum("nji,nj->ni", R_wb, np.column_stack([np.zeros((len(t_imu), 2)), s.yaw_rate]))
    force = np.einsum("nji,nj->ni", R_wb, s.acceleration + np.array([0.0, 0.0, GRAVITY]))
    if config.gyro_noise > 0:
        omega = omega + rng.normal(0.0, config.gyro_noise, omega.shape)
    if config.accel_noise > 0:
        force = force + rng.normal(0.0, config.accel_noise, force.shape)
    quat = matrix_to_quat(R_wb)
    local = to_sensor(imu_clock, t_imu)
    pulses = triggers["imu"]
    last = np.searchsorted(pulses, local, side="right") - 1
    keep = last >= 0
    imu = np.zeros(int(keep.sum()), dtype=IMU_DTYPE)
    imu["t"] = local[keep]
    for i, name in enumerate(("wx", "wy", "wz")):
        imu[name] = omega[keep, i]
    for i, name in enumerate(("ax", "ay", "az")):
        imu[name] = force[keep, i]
    for i, name in enumerate(("qw", "qx", "qy", "qz")):
        imu[name] = quat[keep, i]
    imu["elapsed"] = local[keep] - pulses[last[keep]]

    # GNSS fixes at the receiver rate, in the receiver clock.
    step = int(round(NS_PER_S / config.gnss_rate_hz))
    t_gnss = np.arange(0, t_end + 1, step, dtype=np.int64)
    s = trajectory.sample(t_gnss / NS_PER_S)
    east, north, alt = s.position[:, 0], s.position[:, 1], s.position[:, 2]
    if config.gnss_noise_m > 0:
        east = east + rng.normal(0.0, config.gnss_noise_m, east.shape)
        north = north + rng.normal(0.0, config.gnss_noise_m, north.shape)
        alt = alt + rng.normal(0.0, config.gnss_noise_m, alt.shape)
    lat, lon = utm_to_latlon_arrays(east, north, zone, southern)
    gnss = np.zeros(len(t_gnss), dtype=GNSS_DTYPE)
    gnss["t"] = to_sensor(_clock(config, "gnss"), t_gnss)
    gnss["lat"], gnss["lon"], gnss["alt"] = lat, lon, alt
    gnss["fix"] = FIX_CODES["rtk"]

    # Range: slant distance along the rig axis, host clock shifted by range_offset_ns.
    step = int(round(NS_PER_S / config.range_rate_hz))
    t_range = np.arange(0, t_end + 1, step, dtype=np.int64)
    s = trajectory.sample(t_range / NS_PER_S)
    tilt_cos = -s.rotation[:, 2, 2]
    distance = s.agl / tilt_cos
    if config.range_noise_m > 0:
        distance = distance + rng.normal(0.0, config.range_noise_m, distance.shape)
    rng_stream = np.zeros(len(t_range), dtype=RANGE_DTYPE)
    rng_stream["t"] = t_range - config.range_offset_ns
    rng_stream["range"] = distance

    return SensorStreams(imu=imu, gnss=gnss, range=rng_stream, triggers=triggers,
                         trigger_slots=trigger_slots)


# ── Recording assembly ───────────────────────────────────────────────────


@dataclass
class SimulationResult:
    recording: Recording
    scene: ScenePlane
    trajectory: Trajectory
    plan: FlightPlan
    preset: SequencePreset
    clocks: Dict[str, ClockModel]
    events: Optional[EventGenerator] = None


class SimulationService:
    """Builds a synthetic Recording from a ``simulate.*`` configuration."""

    def __init__(self, config: Optional[SimulationConfig] = None, seed: int = 0, workers: int = 1):
        self.config = config or SimulationConfig()
        self.seed = seed
        self.workers = workers
        self.preset, self.small = resolve_preset(self.config.preset)

    def calibrations(self) -> Tuple[CameraCalibration, CameraCalibration]:
        cfg = self.config
        event = CameraCalibration.from_fov(cfg.event_width, cfg.event_height,
                                           cfg.event_hfov_deg, cfg.event_vfov_deg)
        misalignment = Rotation.from_rotvec(cfg.rgb_misalignment_deg, degrees=True)
        rgb = CameraCalibration.from_fov(cfg.rgb_width, cfg.rgb_height,
                                         cfg.rgb_hfov_deg, cfg.rgb_vfov_deg, misalignment)
        return event, rgb

    def flight_plan(self) -> FlightPlan:
        cfg, preset = self.config, self.preset
        altitude = cfg.altitude_agl or preset.height_m
        speed = cfg.speed or preset.speed_m_s
        overlap = cfg.overlap if cfg.overlap is not None else preset.overlap_pct / 100.0
        pattern = cfg.flight_pattern or ("crosshatch" if preset.crosshatch else "lawnmower")
        spacing = track_spacing(altitude, cfg.event_hfov_deg, overlap)
        length = cfg.track_length_m or (SMALL_TRACK_LENGTH_M if self.small else FULL_TRACK_LENGTH_M)
        tracks = cfg.n_tracks or (SMALL_TRACKS if self.small else self._tracks_for_duration(length, spacing, speed))
        return FlightPlan(
            east_max=length,
            north_max=(tracks - 1) * spacing,
            altitude_agl=altitude,
            speed=speed,
            overlap=overlap,
            track_spacing=spacing,
            pattern=pattern,
            turn_rate_peak=cfg.turn_rate,
            ramp_s=cfg.ramp_s,
            start_agl=min(cfg.start_agl, altitude),
            climb_rate=cfg.climb_rate,
            hover_s=cfg.hover_s,
        )

    def _tracks_for_duration(self, length: float, spacing: float, speed: float) -> int:
        """Track count that roughly fills the catalogued flight time."""
        cfg, preset = self.config, self.preset
        turn_s = 2 * (np.pi / 2) * np.pi / (2 * cfg.turn_rate)
        per_track = length / speed + spacing / speed + 4 * cfg.ramp_s + turn_s
        climb_s = 2 * (preset.height_m - cfg.start_agl) / cfg.climb_rate + 2 * cfg.hover_s
        budget = preset.duration_s - climb_s
        if preset.crosshatch:
            budget /= 2
        return max(2, int(round(budget / per_track)))

    def scene_for(self, plan: FlightPlan, origin: UtmPoint) -> ScenePlane:
        cfg = self.config
        margin = 1.5 * plan.altitude_agl * np.tan(np.radians(max(cfg.event_hfov_deg, cfg.rgb_hfov_deg)) / 2)
        span_e = plan.east_max - plan.east_min + 2 * margin
        span_n = plan.north_max - plan.north_min + 2 * margin
        cols = max(MIN_TEXTURE_TEXELS, int(np.ceil(span_e / cfg.texel_m)) + 1)
        rows = max(MIN_TEXTURE_TEXELS, int(np.ceil(span_n / cfg.texel_m)) + 1)
        centre_e = origin.easting + (plan.east_min + plan.east_max) / 2
        centre_n = origin.northing + (plan.north_min + plan.north_max) / 2
        corner = UtmPoint(
            easting=centre_e - (cols - 1) / 2 * cfg.texel_m,
            northing=centre_n + (rows - 1) / 2 * cfg.texel_m,
            zone=origin.zone, hemisphere=origin.hemisphere, altitude=cfg.ground_alt_msl,
        )
        texture = make_texture(cfg.scene, rows, cols, cfg.texel_m, cfg.checker_m)
        return ScenePlane(texture, cfg.texel_m, corner, cfg.ground_alt_msl)

    def simulate(self) -> SimulationResult:
        cfg, preset = self.config, self.preset
        rng = np.random.default_rng(self.seed)
        photometry = preset_photometry(preset)
        exposure_us = cfg.exposure_us or photometry.exposure_us
        gain = photometry.irradiance * exposure_us / REFERENCE_EXPOSURE_US
        read_noise = cfg.read_noise_dn if cfg.read_noise_dn is not None else photometry.read_noise_dn

        origin = latlon_to_utm(cfg.latitude, cfg.longitude)
        plan = self.flight_plan()
        trajectory = plan_flight(plan, cfg.event_hfov_deg).placed(
            (origin.easting, origin.northing, cfg.ground_alt_msl)
        )
        scene = self.scene_for(plan, origin)
        calib_event, calib_rgb = self.calibrations()
        streams = emit_sensor_streams(trajectory, cfg, origin.zone, origin.hemisphere == "S", rng)

        pattern = PulsePattern.parse(cfg.pattern)
        period = pattern.period_ns
        rgb_clock = _clock(cfg, "rgb")
        frames: List[FrameRecord] = []
        frame_slots: Dict[str, int] = {}
        for i, slot in enumerate(streams.trigger_slots["rgb"]):
            if slot % cfg.frame_every:
                continue
            name = f"rgb_{int(slot):06d}.png"
            mid = int(slot) * period + exposure_us * 1000 // 2
            frames.append(FrameRecord(i, to_sensor(rgb_clock, mid), exposure_us, name))
            frame_slots[name] = int(slot)

        blur = cfg.motion_blur_samples
        seed = self.seed

        def load_image(frame: FrameRecord) -> np.ndarray:
            slot = frame_slots[frame.filename]
            start = slot * period
            t = (start + (np.arange(blur) + 0.5) / blur * exposure_us * 1000) / NS_PER_S
            s = trajectory.sample(t)
            poses = [(R @ calib_rgb.rotation, c) for R, c in zip(s.rotation, s.position)]
            return render_rgb(poses, scene, calib_rgb, gain, read_noise,
                              np.random.default_rng([seed, slot]))

        generator = None
        if cfg.events:
            numba.set_num_threads(max(1, min(self.workers, numba.config.NUMBA_NUM_THREADS)))
            generator = EventGenerator(trajectory, scene, calib_event, cfg.contrast,
                                       cfg.max_event_rate, cfg.supersample_hz)
            event_clock = _clock(cfg, "event")

            def local_chunks():
                for chunk in generator.slabs():
                    chunk["t"] = to_sensor(event_clock, chunk["t"].astype(np.int64)).astype(np.uint64)
                    yield chunk

            events = EventStream.from_factory(local_chunks)
        else:
            events = EventStream.empty()

        metadata = RecordingMetadata(
            sequence=cfg.preset,
            area=preset.area,
            time_of_day=preset.time_of_day,
            duration_s=round(trajectory.duration, 3),
            flight_height_m=plan.altitude_agl,
            speed_m_s=plan.speed,
            bias_on=preset.bias_on,
            bias_off=preset.bias_off,
            overlap_pct=round((plan.overlap or 0.0) * 100.0, 6),
            crosshatch=plan.pattern == "crosshatch",
            illumination=preset.illumination,
            clock="local",
            sync_pattern=pattern.to_text(),
            sync_period_ns=period,
            sync_slow_ratio=pattern.slow_ratio,
            sync_range_offset_ns=cfg.range_offset_ns,
            truth_texture="truth/texture.png",
        )
        recording = Recording(
            metadata=metadata,
            calib_event=calib_event,
            calib_rgb=calib_rgb,
            events=events,
            frames=frames,
            imu=streams.imu,
            gnss=streams.gnss,
            range=streams.range,
            triggers=streams.triggers,
            image_loader=load_image,
        )
        logger.info(
            "Simulated %s: %.1f s flight, %d frames, %d IMU, %d GNSS, %d range samples",
            cfg.preset, trajectory.duration, len(frames), len(streams.imu),
            len(streams.gnss), len(streams.range),
        )
        return SimulationResult(
            recording=recording,
            scene=scene,
            trajectory=trajectory,
            plan=plan,
            preset=preset,
            clocks={sensor: _clock(cfg, sensor) for sensor in ("event", "rgb", "imu", "gnss")},
            events=generator,
        )


def simulate(config: Optional[SimulationConfig] = None, seed: int = 0, workers: int = 1) -> SimulationResult:
    return SimulationService(config, seed, workers).simulate()


def write_simulation(result: SimulationResult, out_dir: Path, chunk_size: int = 1 << 20) -> Path:
    """Recording directory plus ``truth/`` (texture, world file, true clocks)."""
    out_dir = Path(out_dir)
    write_recording(result.recording, out_dir, chunk_size)
    result.scene.write(out_dir / "truth" / "texture.png")
    items = []
    for sensor, model in sorted(result.clocks.items()):
        items += [(f"clock.{sensor}.scale", model.scale), (f"clock.{sensor}.offset_ns", model.offset_ns)]
    items.append(("range_offset_ns", result.recording.metadata.sync_range_offset_ns))
    for i, (start, end) in enumerate(result.trajectory.intervals("turn")):
        items.append((f"turn.{i}", f"{int(round(start * NS_PER_S))},{int(round(end * NS_PER_S))}"))
    (out_dir / "truth" / "clocks.txt").write_text(format_key_value_text(items))
    if result.events is not None and result.events.dropped:
        logger.warning("%d events dropped by the rate cap", result.events.dropped)
    return out_dir
