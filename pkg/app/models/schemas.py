"""
evortho - Pydantic Schemas

Validated parameter and metadata models: recording manifest, calibrations,
pulse patterns, clock models, per-module configuration sections and reports.
"""

from enum import Enum
from typing import Dict, Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from scipy.spatial.transform import Rotation

from ..common import NS_PER_MS

DEFAULT_PATTERN = "9:2,6:1,run"
DEFAULT_PERIOD_NS = 20 * NS_PER_MS
DEFAULT_SLOW_RATIO = 50


class FixQuality(str, Enum):
    NONE = "none"
    FIX2D = "fix2d"
    FIX3D = "fix3d"
    RTK = "rtk"


# Stored as u1 codes in the GNSS record array, as names in gnss.csv.
FIX_CODES = {q.value: code for code, q in enumerate(FixQuality)}
FIX_NAMES = {code: name for name, code in FIX_CODES.items()}


class FusionMethod(str, Enum):
    MEAN = "mean"
    BROVEY = "brovey"
    ESRI = "esri"
    EVENTS_ONLY = "events_only"
    RGB_CROPPED = "rgb_cropped"

    @property
    def report_label(self) -> str:
        """Row type as printed in the results table."""
        return {
            "mean": "Mean Fusion",
            "brovey": "Brovey Fusion",
            "esri": "ESRI Fusion",
            "events_only": "Events Only",
            "rgb_cropped": "RGB Cropped",
        }[self.value]


# ── Recording container ──────────────────────────────────────────────────


class RecordingMetadata(BaseModel):
    """Manifest of one flight: sequence catalog columns plus clock/sync keys.

    Dotted manifest keys (``sync.pattern``) are field aliases so the manifest
    text maps one-to-one onto this model.
    """

    model_config = ConfigDict(populate_by_name=True, extra="forbid")

    format_version: int = 1
    sequence: str = Field(..., min_length=1)
    area: str = ""
    time_of_day: str = ""
    duration_s: Optional[float] = Field(default=None, ge=0)
    flight_height_m: float = Field(default=40.0, gt=0)
    speed_m_s: float = Field(default=3.0, gt=0)
    bias_on: int = 0
    bias_off: int = 0
    overlap_pct: float = Field(default=82.0, ge=0, lt=100)
    crosshatch: bool = False
    illumination: str = ""
    # "local": every stream still in its sensor clock; "global": synchronized.
    clock: Literal["local", "global"] = "local"
    frame_timestamp: Literal["midpoint"] = "midpoint"
    sync_pattern: str = Field(default=DEFAULT_PATTERN, alias="sync.pattern")
    sync_period_ns: int = Field(default=DEFAULT_PERIOD_NS, gt=0, alias="sync.period_ns")
    sync_slow_ratio: int = Field(default=DEFAULT_SLOW_RATIO, ge=1, alias="sync.slow_ratio")
    sync_range_offset_ns: int = Field(default=0, alias="sync.range_offset_ns")
    truth_texture: Optional[str] = None

    @field_validator("sync_pattern")
    @classmethod
    def validate_pattern(cls, v):
        PulsePattern.parse(v)
        return v


class CameraCalibration(BaseModel):
    """Pinhole + radial-tangential camera with camera-to-rig extrinsics.

    Rig convention: x right, y down, z along the optical axis of the event
    camera; the event camera's extrinsic is normally the identity.
    """

    model_config = ConfigDict(extra="forbid", frozen=True)

    width: int = Field(..., gt=0)
    height: int = Field(..., gt=0)
    fx: float = Field(..., gt=0)
    fy: float = Field(..., gt=0)
    cx: float
    cy: float
    k1: float = 0.0
    k2: float = 0.0
    p1: float = 0.0
    p2: float = 0.0
    qw: float = 1.0
    qx: float = 0.0
    qy: float = 0.0
    qz: float = 0.0
    tx: float = 0.0
    ty: float = 0.0
    tz: float = 0.0

    @model_validator(mode="after")
    def check_geometry(self):
        if not 0 <= self.cx < self.width:
            raise ValueError(f"cx={self.cx} outside [0, {self.width})")
        if not 0 <= self.cy < self.height:
            raise ValueError(f"cy={self.cy} outside [0, {self.height})")
        norm = float(np.sqrt(self.qw**2 + self.qx**2 + self.qy**2 + self.qz**2))
        if abs(norm - 1.0) > 1e-6:
            raise ValueError(f"extrinsic quaternion norm {norm:.9f} is not 1")
        return self

    @classmethod
    def from_fov(
        cls,
        width: int,
        height: int,
        hfov_deg: float,
        vfov_deg: float,
        rotation: Optional[Rotation] = None,
    ) -> "CameraCalibration":
        """Distortion-free camera whose pixel-centre span covers the given FOV."""
        fx = (width / 2.0) / np.tan(np.radians(hfov_deg) / 2.0)
        fy = (height / 2.0) / np.tan(np.radians(vfov_deg) / 2.0)
        x, y, z, w = (rotation or Rotation.identity()).as_quat()
        if w < 0:
            x, y, z, w = -x, -y, -z, -w
        return cls(
            width=width, height=height, fx=float(fx), fy=float(fy),
            cx=(width - 1) / 2.0, cy=(height - 1) / 2.0,
            qw=float(w), qx=float(x), qy=float(y), qz=float(z),
        )

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def distortion(self) -> Tuple[float, float, float, float]:
        return (self.k1, self.k2, self.p1, self.p2)

    @property
    def rotation(self) -> np.ndarray:
        """Camera-to-rig rotation matrix."""
        return Rotation.from_quat([self.qx, self.qy, self.qz, self.qw]).as_matrix()


# ── Synchronization ──────────────────────────────────────────────────────


class PulsePattern(BaseModel):
    """Trigger marker: bursts of pulses separated by predefined silent slots."""

    model_config = ConfigDict(frozen=True)

    period_ns: int = Field(default=DEFAULT_PERIOD_NS, gt=0)
    # (pulse_count, trailing_skipped_slots); the last burst has 0 skips and
    # continues indefinitely.
    bursts: Tuple[Tuple[int, int], ...] = ((9, 2), (6, 1), (1, 0))
    slow_ratio: int = Field(default=DEFAULT_SLOW_RATIO, ge=1)

    @model_validator(mode="after")
    def check_bursts(self):
        if not self.bursts:
            raise ValueError("pattern needs at least one burst")
        for count, skips in self.bursts:
            if count < 1:
                raise ValueError(f"burst pulse count must be >= 1, got {count}")
        for count, skips in self.bursts[:-1]:
            if skips < 1:
                raise ValueError("marker bursts must skip at least one slot")
        if self.bursts[-1][1] != 0:
            raise ValueError("last burst must be a continuous run (0 skipped slots)")
        return self

    @classmethod
    def parse(
        cls,
        text: str,
        period_ns: int = DEFAULT_PERIOD_NS,
        slow_ratio: int = DEFAULT_SLOW_RATIO,
    ) -> "PulsePattern":
        """Parse ``9:2,6:1,run``; ``run`` is shorthand for a trailing ``1:0``."""
        bursts = []
        for token in (part.strip() for part in text.split(",")):
            if token == "run":
                bursts.append((1, 0))
                continue
            count, sep, skips = token.partition(":")
            if not sep:
                raise ValueError(f"bad pattern token {token!r} (expected count:skips or run)")
            try:
                bursts.append((int(count), int(skips)))
            except ValueError:
                raise ValueError(f"bad pattern token {token!r} (expected integers)")
        return cls(period_ns=period_ns, bursts=tuple(bursts), slow_ratio=slow_ratio)

    def to_text(self) -> str:
        tokens = [f"{c}:{s}" for c, s in self.bursts[:-1]]
        last = self.bursts[-1]
        tokens.append("run" if last == (1, 0) else f"{last[0]}:0")
        return ",".join(tokens)

    @property
    def marker_length(self) -> int:
        """Slots before the continuous run starts."""
        return sum(c + s for c, s in self.bursts[:-1])


class ClockModel(BaseModel):
    """Affine sensor clock: sensor_time = scale * global_time + offset_ns."""

    model_config = ConfigDict(frozen=True)

    scale: float = 1.0
    offset_ns: float = 0.0
    rms_residual_ns: float = Field(default=0.0, ge=0)
    max_residual_ns: float = Field(default=0.0, ge=0)
    pairs: int = 0

    @field_validator("scale")
    @classmethod
    def validate_scale(cls, v):
        if not abs(v - 1.0) < 1e-3:
            raise ValueError(f"clock scale {v!r} implies more than 1000 ppm drift")
        return v


class SyncSolution(BaseModel):
    """Per-sensor clock models; pulse index 0 defines global t = 0."""

    pattern: str = DEFAULT_PATTERN
    period_ns: int = DEFAULT_PERIOD_NS
    clocks: Dict[str, ClockModel] = Field(default_factory=dict)
    first_index: Dict[str, int] = Field(default_factory=dict)
    max_disagreement_ns: float = 0.0


# ── Module configuration sections ────────────────────────────────────────


class SyncConfig(BaseModel):
    """``sync.*`` keys; None means use the recording manifest's value."""

    model_config = ConfigDict(extra="forbid")

    pattern: Optional[str] = None
    period_ns: Optional[int] = Field(default=None, gt=0)
    slow_ratio: Optional[int] = Field(default=None, ge=1)
    range_offset_ns: Optional[int] = None
    max_residual_ns: float = Field(default=1_000_000.0, gt=0)
    elapsed_tolerance_ns: int = Field(default=1_000_000, ge=0)

    @field_validator("pattern")
    @classmethod
    def validate_pattern(cls, v):
        if v is not None:
            PulsePattern.parse(v)
        return v


class GateConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    omega_max: float = Field(default=0.4, gt=0)
    hold_ms: float = Field(default=100.0, ge=0)
    min_agl: float = Field(default=20.0, ge=0)
    median_window: int = Field(default=5, ge=1)


class KeyframeConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    spacing: float = Field(default=2.0, gt=0)


class ReconConfig(BaseModel):
    """Leaky log-intensity integrator parameters."""

    model_config = ConfigDict(extra="forbid")

    c_on: float = Field(default=0.1, gt=0)
    c_off: float = Field(default=0.1, gt=0)
    tau_s: float = Field(default=0.1, gt=0)
    window_ns: int = Field(default=5 * NS_PER_MS, gt=0)
    tone_lo: float = Field(default=1.0, ge=0, le=100)
    tone_hi: float = Field(default=99.0, ge=0, le=100)

    @model_validator(mode="after")
    def check_percentiles(self):
        if not self.tone_lo < self.tone_hi:
            raise ValueError(f"tone_lo ({self.tone_lo}) must be below tone_hi ({self.tone_hi})")
        return self

    @property
    def tau_ns(self) -> float:
        return self.tau_s * 1e9


class FusionConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    method: FusionMethod = FusionMethod.MEAN
    # Intensity weights for I; None is the plain channel mean.
    weights: Optional[Tuple[float, float, float]] = None

    @field_validator("weights", mode="before")
    @classmethod
    def parse_weights(cls, v):
        if isinstance(v, str):
            if v.strip().lower() in ("", "equal", "none"):
                return None
            v = tuple(float(part) for part in v.split(","))
        return v

    @field_validator("weights")
    @classmethod
    def check_weights(cls, v):
        if v is not None and (min(v) < 0 or sum(v) <= 0):
            raise ValueError("intensity weights must be non-negative with a positive sum")
        return v


class OrthoConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    resolution: float = Field(default=0.01, gt=0)
    # None: median(GNSS altitude - range) over valid samples.
    ground_alt: Optional[float] = None


class StagesConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    orthoproject: bool = True
    evaluate: bool = True
    # Score only the covered part of the truth texture (the scene extends past the survey).
    evaluate_masked: bool = True


def _parse_clock(v):
    if isinstance(v, str):
        scale, _, offset = v.partition(",")
        return (float(scale), int(float(offset)))
    return v


class SimulationConfig(BaseModel):
    """``simulate.*`` keys. Flight parameters left at None come from the preset."""

    model_config = ConfigDict(extra="forbid")

    preset: str = "F1.D.1-small"
    # Builtin "checkerboard" / "constant", or the path of an 8-bit image.
    scene: str = "checkerboard"
    texel_m: float = Field(default=0.25, gt=0)
    checker_m: float = Field(default=16.0, gt=0)

    event_width: int = Field(default=320, gt=0)
    event_height: int = Field(default=180, gt=0)
    event_hfov_deg: float = Field(default=64.0, gt=0, lt=180)
    event_vfov_deg: float = Field(default=39.0, gt=0, lt=180)
    rgb_width: int = Field(default=400, gt=0)
    rgb_height: int = Field(default=300, gt=0)
    rgb_hfov_deg: float = Field(default=71.0, gt=0, lt=180)
    rgb_vfov_deg: float = Field(default=56.0, gt=0, lt=180)
    # Small mounting misalignment of the RGB camera, rotation vector in degrees.
    rgb_misalignment_deg: Tuple[float, float, float] = (0.4, -0.3, 0.2)
    frame_every: int = Field(default=5, ge=1)
    exposure_us: Optional[int] = Field(default=None, ge=5000, le=15000)
    motion_blur_samples: int = Field(default=5, ge=1)
    read_noise_dn: Optional[float] = Field(default=None, ge=0)

    contrast: float = Field(default=0.2, gt=0)
    supersample_hz: float = Field(default=1000.0, ge=1000.0)
    max_event_rate: float = Field(default=20e6, gt=0)
    events: bool = True

    imu_rate_hz: float = Field(default=400.0, gt=0)
    gnss_rate_hz: float = Field(default=5.0, gt=0)
    range_rate_hz: float = Field(default=60.0, gt=0)
    gyro_noise: float = Field(default=0.0, ge=0)
    accel_noise: float = Field(default=0.0, ge=0)
    gnss_noise_m: float = Field(default=0.0, ge=0)
    range_noise_m: float = Field(default=0.0, ge=0)

    # (scale, offset_ns) per sensor clock.
    clock_event: Tuple[float, int] = (1.000002, 12_500_000_000)
    clock_rgb: Tuple[float, int] = (0.999999, 4_100_000_000)
    clock_imu: Tuple[float, int] = (1.0, 750_000_000)
    clock_gnss: Tuple[float, int] = (1.0, 3_000_000_000)
    jitter_ns: float = Field(default=0.0, ge=0)
    drop_prefix: Dict[str, int] = Field(default_factory=dict)
    pattern: str = DEFAULT_PATTERN
    range_offset_ns: int = 0

    latitude: float = Field(default=39.9522, ge=-84, le=84)
    longitude: float = Field(default=-75.1990, ge=-180, le=180)
    ground_alt_msl: float = 20.0

    altitude_agl: Optional[float] = Field(default=None, gt=0)
    speed: Optional[float] = Field(default=None, gt=0)
    overlap: Optional[float] = Field(default=None, ge=0, lt=1)
    track_length_m: Optional[float] = Field(default=None, gt=0)
    n_tracks: Optional[int] = Field(default=None, ge=1)
    flight_pattern: Optional[Literal["lawnmower", "crosshatch"]] = None
    start_agl: float = Field(default=10.0, gt=0)
    climb_rate: float = Field(default=4.0, gt=0)
    ramp_s: float = Field(default=1.5, ge=0)
    turn_rate: float = Field(default=0.6, gt=0)
    hover_s: float = Field(default=1.0, ge=0)

    @field_validator("clock_event", "clock_rgb", "clock_imu", "clock_gnss", mode="before")
    @classmethod
    def parse_clock(cls, v):
        return _parse_clock(v)

    @field_validator("rgb_misalignment_deg", mode="before")
    @classmethod
    def parse_triplet(cls, v):
        if isinstance(v, str):
            return tuple(float(part) for part in v.split(","))
        return v

    @field_validator("drop_prefix", mode="before")
    @classmethod
    def parse_drops(cls, v):
        if isinstance(v, str):
            drops = {}
            for token in filter(None, (part.strip() for part in v.split(","))):
                sensor, _, count = token.partition(":")
                drops[sensor.strip()] = int(count)
            return drops
        return v

    @field_validator("pattern")
    @classmethod
    def validate_pattern(cls, v):
        PulsePattern.parse(v)
        return v

    def clock(self, sensor: str) -> Tuple[float, int]:
        return getattr(self, f"clock_{sensor}")


# ── Geodesy / export / evaluation ────────────────────────────────────────


class UtmPoint(BaseModel):
    model_config = ConfigDict(frozen=True)

    easting: float
    northing: float
    zone: int = Field(..., ge=1, le=60)
    hemisphere: Literal["N", "S"]
    altitude: float = 0.0


class GeotaggedImage(BaseModel):
    filename: str
    lat_deg: float = Field(..., ge=-90, le=90)
    lon_deg: float = Field(..., ge=-180, le=180)
    alt_m: float
    t_ns: int
    keyframe_index: int = Field(..., ge=0)


class FlightPlan(BaseModel):
    """Survey rectangle in local east/north metres (tracks run east-west)."""

    model_config = ConfigDict(extra="forbid")

    east_min: float = 0.0
    north_min: float = 0.0
    east_max: float
    north_max: float
    altitude_agl: float = Field(..., gt=0)
    speed: float = Field(..., gt=0)
    overlap: Optional[float] = Field(default=None, ge=0)
    track_spacing: Optional[float] = Field(default=None, gt=0)
    pattern: Literal["lawnmower", "crosshatch"] = "lawnmower"
    turn_rate_peak: float = Field(default=0.6, gt=0)
    ramp_s: float = Field(default=1.5, ge=0)
    start_agl: Optional[float] = Field(default=None, gt=0)
    climb_rate: float = Field(default=4.0, gt=0)
    hover_s: float = Field(default=1.0, ge=0)

    @model_validator(mode="after")
    def check_rectangle(self):
        if not (self.east_max > self.east_min and self.north_max >= self.north_min):
            raise ValueError("flight rectangle must have positive extent")
        if self.overlap is None and self.track_spacing is None:
            raise ValueError("give either overlap or track_spacing")
        return self


REPORT_HEADER = "sequence,type,psnr_color,psnr_gray,ssim,nonzero_Mpx"


class OrthoReport(BaseModel):
    """Metric bundle for one orthomosaic, one results-table row."""

    sequence: str = ""
    type: str = ""
    status: Literal["ok", "failed"] = "ok"
    psnr_color_db: float = float("nan")
    psnr_gray_db: float = float("nan")
    ssim: float = float("nan")
    nonzero_pixels: int = Field(default=0, ge=0)
    aligned_width: int = 0
    aligned_height: int = 0
    masked: bool = False

    @field_validator("ssim")
    @classmethod
    def check_ssim(cls, v):
        if not np.isnan(v) and not -1.0 - 1e-9 <= v <= 1.0 + 1e-9:
            raise ValueError(f"ssim {v} outside [-1, 1]")
        return v

    def to_csv_row(self) -> str:
        if self.status == "failed":
            metrics = ["failed"] * 4
        else:
            metrics = [
                _fmt_metric(self.psnr_color_db),
                _fmt_metric(self.psnr_gray_db),
                _fmt_metric(self.ssim),
                f"{self.nonzero_pixels / 1e6:.2f}",
            ]
        return ",".join([self.sequence, self.type, *metrics])


def _fmt_metric(value: float) -> str:
    if np.isinf(value):
        return "inf" if value > 0 else "-inf"
    return f"{value:.2f}"
