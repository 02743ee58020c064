"""
evortho - Recording Service

Reads, writes and validates the directory-backed recording container:

    manifest.txt, calib_event.txt, calib_rgb.txt      key = value text
    events.bin                                        16-byte event records
    frames/index.csv + frames/*.png                   triggered RGB exposures
    imu.csv, gnss.csv, range.csv                      sensor streams
    triggers_<sensor>.csv                             observed sync pulses
"""

import logging
import shutil
from pathlib import Path
from typing import List, Optional

import numpy as np
from pydantic import BaseModel, ValidationError

from ..common import (
    NS_PER_MS,
    PipelineError,
    RecordingFormatError,
    format_key_value_text,
    parse_key_value_text,
)
from ..models.recording import (
    DEFAULT_CHUNK_EVENTS,
    GNSS_DTYPE,
    IMU_DTYPE,
    RANGE_DTYPE,
    EventStream,
    FrameRecord,
    Recording,
)
from ..models.schemas import FIX_CODES, FIX_NAMES, CameraCalibration, PulsePattern, RecordingMetadata
from ..utils.csvio import parse_column, read_csv_columns, write_csv_columns
from ..utils.imaging import image_size, write_image

logger = logging.getLogger(__name__)

IMU_HEADER = ("t_ns", "wx", "wy", "wz", "ax", "ay", "az", "qw", "qx", "qy", "qz", "elapsed_ns")
GNSS_HEADER = ("t_ns", "lat_deg", "lon_deg", "alt_m", "fix")
RANGE_HEADER = ("t_host_ns", "range_m")
TRIGGER_HEADER = ("pulse_local_time_ns",)
FRAME_HEADER = ("pulse_index", "t_ns", "exposure_us", "filename")

TRIGGER_SENSORS = ("event", "rgb", "imu", "gnss")

# Exposure bounds of the RGB camera configuration.
MIN_EXPOSURE_US = 5_000
MAX_EXPOSURE_US = 15_000
QUATERNION_TOLERANCE = 1e-6
# Slack on elapsed-since-pulse beyond one period before a pulse counts as lost.
ELAPSED_TOLERANCE_NS = NS_PER_MS


def _load_model(model: type[BaseModel], path: Path) -> BaseModel:
    if not path.is_file():
        raise RecordingFormatError(f"missing file {path.name}")
    try:
        values = parse_key_value_text(path.read_text(), source=path.name)
        return model.model_validate(values)
    except ValidationError as exc:
        err = exc.errors()[0]
        key = ".".join(str(part) for part in err["loc"])
        raise RecordingFormatError(f"{path.name}: invalid {key!r}: {err['msg']}") from exc
    except ValueError as exc:
        raise RecordingFormatError(str(exc)) from exc


def _first_regression(t: np.ndarray) -> Optional[int]:
    bad = np.flatnonzero(np.diff(t.astype(np.int64)) < 0)
    return int(bad[0]) + 1 if bad.size else None


def _check_ordered(name: str, t: np.ndarray) -> None:
    idx = _first_regression(t)
    if idx is not None:
        raise RecordingFormatError(f"{name}: non-monotonic timestamp at index {idx}")


# ── Stream codecs ────────────────────────────────────────────────────────


def read_imu(path: Path) -> np.ndarray:
    cols = read_csv_columns(path, IMU_HEADER)
    imu = np.zeros(len(cols["t_ns"]), dtype=IMU_DTYPE)
    for header, name in zip(IMU_HEADER, IMU_DTYPE.names):
        imu[name] = parse_column(cols[header], IMU_DTYPE[name], path, header)
    return imu


def write_imu(path: Path, imu: np.ndarray) -> None:
    write_csv_columns(path, IMU_HEADER, [imu[name] for name in IMU_DTYPE.names])


def read_gnss(path: Path) -> np.ndarray:
    cols = read_csv_columns(path, GNSS_HEADER)
    gnss = np.zeros(len(cols["t_ns"]), dtype=GNSS_DTYPE)
    gnss["t"] = parse_column(cols["t_ns"], np.int64, path, "t_ns")
    gnss["lat"] = parse_column(cols["lat_deg"], np.float64, path, "lat_deg")
    gnss["lon"] = parse_column(cols["lon_deg"], np.float64, path, "lon_deg")
    gnss["alt"] = parse_column(cols["alt_m"], np.float64, path, "alt_m")
    for i, name in enumerate(cols["fix"]):
        if name not in FIX_CODES:
            raise RecordingFormatError(f"{path.name}: malformed record at index {i} (fix {name!r})")
        gnss["fix"][i] = FIX_CODES[name]
    return gnss


def write_gnss(path: Path, gnss: np.ndarray) -> None:
    fixes = np.array([FIX_NAMES[int(code)] for code in gnss["fix"]], dtype=str)
    write_csv_columns(path, GNSS_HEADER, [gnss["t"], gnss["lat"], gnss["lon"], gnss["alt"], fixes])


def read_range(path: Path) -> np.ndarray:
    cols = read_csv_columns(path, RANGE_HEADER)
    rng = np.zeros(len(cols["t_host_ns"]), dtype=RANGE_DTYPE)
    rng["t"] = parse_column(cols["t_host_ns"], np.int64, path, "t_host_ns")
    rng["range"] = parse_column(cols["range_m"], np.float64, path, "range_m")
    return rng


def write_range(path: Path, rng: np.ndarray) -> None:
    write_csv_columns(path, RANGE_HEADER, [rng["t"], rng["range"]])


def read_triggers(path: Path) -> np.ndarray:
    cols = read_csv_columns(path, TRIGGER_HEADER)
    return parse_column(cols["pulse_local_time_ns"], np.int64, path, "pulse_local_time_ns")


def write_triggers(path: Path, pulses: np.ndarray) -> None:
    write_csv_columns(path, TRIGGER_HEADER, [np.asarray(pulses, dtype=np.int64)])


def read_frame_index(path: Path) -> List[FrameRecord]:
    cols = read_csv_columns(path, FRAME_HEADER)
    pulse = parse_column(cols["pulse_index"], np.int64, path, "pulse_index")
    t = parse_column(cols["t_ns"], np.int64, path, "t_ns")
    exposure = parse_column(cols["exposure_us"], np.int64, path, "exposure_us")
    return [
        FrameRecord(int(p), int(ts), int(e), str(name))
        for p, ts, e, name in zip(pulse, t, exposure, cols["filename"])
    ]


def write_frame_index(path: Path, frames: List[FrameRecord]) -> None:
    write_csv_columns(path, FRAME_HEADER, [
        np.array([f.pulse_index for f in frames], dtype=np.int64),
        np.array([f.t_ns for f in frames], dtype=np.int64),
        np.array([f.exposure_us for f in frames], dtype=np.int64),
        np.array([f.filename for f in frames], dtype=str),
    ])


def write_events(path: Path, events: EventStream, chunk_size: int = DEFAULT_CHUNK_EVENTS) -> int:
    """Stream events to ``path``; refuses out-of-order input. Returns the count."""
    path = Path(path)
    if events.source_path is not None and events.source_path.resolve() == path.resolve():
        return events.count()
    written = 0
    last_t = None
    tmp = path.with_suffix(".bin.tmp")
    try:
        with tmp.open("wb") as fh:
            for chunk in events.chunks(chunk_size):
                t = chunk["t"]
                if (last_t is not None and t[0] < last_t) or _first_regression(t) is not None:
                    local = _first_regression(t)
                    index = written + (local if local is not None else 0)
                    raise RecordingFormatError(
                        f"events: refusing to write unsorted events (first regression at index {index})"
                    )
                last_t = t[-1]
                fh.write(np.ascontiguousarray(chunk).tobytes())
                written += len(chunk)
        tmp.replace(path)
    finally:
        tmp.unlink(missing_ok=True)
    return written


# ── Container ────────────────────────────────────────────────────────────


def read_recording(path: Path, validate: bool = True) -> Recording:
    """Open a recording directory. Events stay on disk and are read in chunks.

    Checks files, record structure and time ordering; with ``validate`` the
    type invariants from validate_recording must hold too.
    """
    root = Path(path)
    if not root.is_dir():
        raise RecordingFormatError(f"recording directory not found: {root}")

    metadata = _load_model(RecordingMetadata, root / "manifest.txt")
    calib_event = _load_model(CameraCalibration, root / "calib_event.txt")
    calib_rgb = _load_model(CameraCalibration, root / "calib_rgb.txt")
    events = EventStream.from_file(root / "events.bin")
    frames = read_frame_index(root / "frames" / "index.csv")
    imu = read_imu(root / "imu.csv")
    gnss = read_gnss(root / "gnss.csv")
    rng = read_range(root / "range.csv")
    triggers = {
        p.stem.removeprefix("triggers_"): read_triggers(p)
        for p in sorted(root.glob("triggers_*.csv"))
    }

    for frame in frames:
        if not (root / "frames" / frame.filename).is_file():
            raise RecordingFormatError(f"missing file frames/{frame.filename}")

    last_t = None
    offset = 0
    for chunk in events.chunks():
        t = chunk["t"]
        if last_t is not None and t[0] < last_t:
            raise RecordingFormatError(f"events: non-monotonic timestamp at index {offset}")
        local = _first_regression(t)
        if local is not None:
            raise RecordingFormatError(f"events: non-monotonic timestamp at index {offset + local}")
        last_t = t[-1]
        offset += len(chunk)

    _check_ordered("imu", imu["t"])
    _check_ordered("gnss", gnss["t"])
    _check_ordered("range", rng["t"])
    _check_ordered("frames", np.array([f.t_ns for f in frames], dtype=np.int64))
    for sensor, pulses in triggers.items():
        bad = np.flatnonzero(np.diff(pulses) <= 0)
        if bad.size:
            raise RecordingFormatError(
                f"triggers_{sensor}: pulse times not strictly increasing at index {int(bad[0]) + 1}"
            )

    rec = Recording(
        metadata=metadata,
        calib_event=calib_event,
        calib_rgb=calib_rgb,
        events=events,
        frames=frames,
        imu=imu,
        gnss=gnss,
        range=rng,
        triggers=triggers,
        root=root,
    )
    if validate:
        violations = validate_recording(rec)
        if violations:
            more = f" (+{len(violations) - 1} more)" if len(violations) > 1 else ""
            raise RecordingFormatError(f"{root.name}: {violations[0]}{more}")
    logger.debug("Opened recording %s (%d frames, %d imu)", root, len(frames), len(imu))
    return rec


def write_recording(rec: Recording, path: Path, chunk_size: int = DEFAULT_CHUNK_EVENTS) -> None:
    """Write every stream of ``rec`` below ``path`` (created if needed)."""
    root = Path(path)
    (root / "frames").mkdir(parents=True, exist_ok=True)

    (root / "manifest.txt").write_text(
        format_key_value_text(rec.metadata.model_dump(by_alias=True, mode="json"))
    )
    (root / "calib_event.txt").write_text(format_key_value_text(rec.calib_event.model_dump()))
    (root / "calib_rgb.txt").write_text(format_key_value_text(rec.calib_rgb.model_dump()))

    count = write_events(root / "events.bin", rec.events, chunk_size)

    write_frame_index(root / "frames" / "index.csv", rec.frames)
    for frame in rec.frames:
        target = root / "frames" / frame.filename
        source = rec.image_path(frame)
        if source is not None and source.resolve() == target.resolve():
            continue
        if source is not None:
            shutil.copyfile(source, target)
        else:
            write_image(target, rec.load_image(frame))

    write_imu(root / "imu.csv", rec.imu)
    write_gnss(root / "gnss.csv", rec.gnss)
    write_range(root / "range.csv", rec.range)
    for stale in root.glob("triggers_*.csv"):
        if stale.stem.removeprefix("triggers_") not in rec.triggers:
            stale.unlink()
    for sensor, pulses in rec.triggers.items():
        write_triggers(root / f"triggers_{sensor}.csv", pulses)
    logger.info("Wrote recording %s (%d events, %d frames)", root, count, len(rec.frames))


def validate_recording(rec: Recording, chunk_size: int = DEFAULT_CHUNK_EVENTS) -> List[str]:
    """Every type-invariant violation as ``"<stream>: <rule> at index i"``; [] when clean."""
    violations: List[str] = []
    w, h = rec.calib_event.width, rec.calib_event.height

    offset = 0
    last_t = None
    for chunk in rec.events.chunks(chunk_size):
        for rule, bad in (
            ("x out of bounds", chunk["x"] >= w),
            ("y out of bounds", chunk["y"] >= h),
            ("invalid polarity", chunk["p"] > 1),
        ):
            idx = np.flatnonzero(bad)
            if idx.size:
                violations.append(f"events: {rule} at index {offset + int(idx[0])}")
        t = chunk["t"]
        if last_t is not None and t[0] < last_t:
            violations.append(f"events: non-monotonic timestamp at index {offset}")
        local = _first_regression(t)
        if local is not None:
            violations.append(f"events: non-monotonic timestamp at index {offset + local}")
        last_t = t[-1]
        offset += len(chunk)

    imu = rec.imu
    if len(imu):
        norm = np.sqrt(imu["qw"] ** 2 + imu["qx"] ** 2 + imu["qy"] ** 2 + imu["qz"] ** 2)
        _first(violations, "imu: non-unit quaternion", ~(np.abs(norm - 1.0) <= QUATERNION_TOLERANCE))
        limit = rec.metadata.sync_period_ns + ELAPSED_TOLERANCE_NS
        # Inside the marker gaps a sample may legitimately be several periods past its pulse.
        marker = _marker_slots(rec)
        _first(violations, "imu: negative elapsed_since_pulse", imu["elapsed"] < 0)
        _first(violations, "imu: elapsed_since_pulse exceeds pulse spacing",
               imu["elapsed"] > limit * (marker + 1))
        _first(violations, "imu: non-monotonic timestamp", _regressions(imu["t"]))

    gnss = rec.gnss
    if len(gnss):
        _first(violations, "gnss: latitude out of range", ~(np.abs(gnss["lat"]) <= 90.0))
        _first(violations, "gnss: longitude out of range", ~(np.abs(gnss["lon"]) <= 180.0))
        _first(violations, "gnss: unknown fix quality", gnss["fix"] >= len(FIX_NAMES))
        _first(violations, "gnss: non-monotonic timestamp", _regressions(gnss["t"]))

    rng = rec.range
    if len(rng):
        r = rng["range"]
        _first(violations, "range: non-positive range", ~np.isnan(r) & ~(r > 0))
        _first(violations, "range: non-monotonic timestamp", _regressions(rng["t"]))

    if rec.frames:
        exposure = np.array([f.exposure_us for f in rec.frames])
        _first(violations, "frames: exposure outside 5-15 ms",
               (exposure < MIN_EXPOSURE_US) | (exposure > MAX_EXPOSURE_US))
        _first(violations, "frames: non-monotonic timestamp",
               _regressions(np.array([f.t_ns for f in rec.frames], dtype=np.int64)))
        violations.extend(_frame_size_violations(rec))

    for sensor, pulses in sorted(rec.triggers.items()):
        _first(violations, f"triggers_{sensor}: pulse times not strictly increasing",
               np.concatenate([[False], np.diff(pulses) <= 0]))
    return violations


def _frame_size_violations(rec: Recording) -> List[str]:
    """First unreadable frame and first frame whose size differs from calib_rgb; headers only on disk."""
    expected = (rec.calib_rgb.width, rec.calib_rgb.height)
    if rec.image_loader is None and rec.root is None:
        return []
    unreadable = mismatched = None
    for i, frame in enumerate(rec.frames):
        try:
            path = rec.image_path(frame)
            if path is not None:
                size = image_size(path)
            else:
                img = rec.load_image(frame)
                size = (img.shape[1], img.shape[0])
        except PipelineError:
            if unreadable is None:
                unreadable = i
            continue
        if mismatched is None and size != expected:
            mismatched = i
        if unreadable is not None and mismatched is not None:
            break
    found = []
    if unreadable is not None:
        found.append(f"frames: unreadable image at index {unreadable}")
    if mismatched is not None:
        found.append(f"frames: image size differs from calibration at index {mismatched}")
    return found


def _regressions(t: np.ndarray) -> np.ndarray:
    return np.concatenate([[False], np.diff(t.astype(np.int64)) < 0])


def _first(violations: List[str], rule: str, bad: np.ndarray) -> None:
    idx = np.flatnonzero(bad)
    if idx.size:
        violations.append(f"{rule} at index {int(idx[0])}")


def _marker_slots(rec: Recording) -> int:
    pattern = PulsePattern.parse(rec.metadata.sync_pattern)
    return max((skips for _, skips in pattern.bursts), default=0)


def describe_recording(rec: Recording) -> dict:
    """Counts and spans for ``info`` output."""
    span = rec.events.time_span()
    return {
        "sequence": rec.metadata.sequence,
        "clock": rec.metadata.clock,
        "events": rec.events.count(),
        "event_span_ns": f"{span[0]}..{span[1]}" if span else "-",
        "frames": len(rec.frames),
        "imu": len(rec.imu),
        "gnss": len(rec.gnss),
        "range": len(rec.range),
        "triggers": ",".join(f"{k}:{len(v)}" for k, v in sorted(rec.triggers.items())),
    }
