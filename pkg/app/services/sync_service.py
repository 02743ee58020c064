# evortho - Time Synchronization Service

# Decodes the pulse/gap start marker from every sensor's trigger observations,
# assigns global pulse indices, and fits per-sensor affine clock models.
# Global time is the trigger generator's clock: pulse k sits at k * period_ns.

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np
from pydantic import ValidationError

from ..common import SyncError, format_key_value_text, parse_key_value_text
from ..models.recording import FrameRecord, Recording
from ..models.schemas import ClockModel, PulsePattern, SyncConfig, SyncSolution

logger = logging.getLogger(__name__)

SYNCED_SENSORS = ("event", "rgb", "imu", "gnss")
SLOW_CHANNEL_SENSORS = ("gnss",)

# Intervals whose slot count is further than this from an integer are rejected.
QUANTIZATION_LIMIT = 0.3


# ── Pattern template ─────────────────────────────────────────────────────


def pattern_template(pattern: PulsePattern, n_slots: int) -> np.ndarray:
    """Global slot indices below ``n_slots`` that carry a pulse."""
    return np.flatnonzero(_template_mask(pattern, n_slots))


def _template_mask(pattern: PulsePattern, n_slots: int) -> np.ndarray:
    mask = np.zeros(max(n_slots, 0), dtype=bool)
    slot = 0
    for count, skips in pattern.bursts[:-1]:
        mask[slot:slot + count] = True
        slot += count + skips
    mask[slot:] = True
    return mask


def _next_template_slot(pattern: PulsePattern, slots: np.ndarray) -> np.ndarray:
    """First template slot strictly after each slot."""
    limit = pattern.marker_length + 2
    following = np.empty(limit, dtype=np.int64)
    mask = _template_mask(pattern, limit + 1)
    nxt = limit
    for k in range(limit - 1, -1, -1):
        following[k] = nxt
        if mask[k]:
            nxt = k
    slots = np.asarray(slots, dtype=np.int64)
    return np.where(slots < limit, following[np.minimum(slots, limit - 1)], slots + 1)


# ── Marker decoding ──────────────────────────────────────────────────────


def _longest_run(flags: np.ndarray) -> Tuple[int, int]:
    """(start, length) of the longest run of True values."""
    if not flags.any():
        return 0, 0
    padded = np.concatenate([[False], flags, [False]]).astype(np.int8)
    edges = np.diff(padded)
    starts = np.flatnonzero(edges == 1)
    ends = np.flatnonzero(edges == -1)
    best = int(np.argmax(ends - starts))
    return int(starts[best]), int(ends[best] - starts[best])


def estimate_period(pulses: np.ndarray) -> float:
    """Apparent pulse period in sensor ticks.

    Median interval first (robust to the marker gaps), then refined over the
    longest run of single-slot intervals so clock drift is absorbed.
    """
    intervals = np.diff(np.asarray(pulses, dtype=np.int64)).astype(np.float64)
    if intervals.size == 0:
        raise SyncError("need at least 2 trigger observations")
    rough = float(np.median(intervals))
    if rough <= 0:
        raise SyncError("trigger observations are not increasing")
    start, length = _longest_run(np.abs(intervals / rough - 1.0) < QUANTIZATION_LIMIT)
    if length == 0:
        return rough
    return float(pulses[start + length] - pulses[start]) / length


def quantize_intervals(pulses: np.ndarray, period: float) -> np.ndarray:
    """Observed slot offsets relative to the first pulse (0, k1, k1 + k2, ...)."""
    pulses = np.asarray(pulses, dtype=np.int64)
    q = np.diff(pulses).astype(np.float64) / period
    k = np.rint(q)
    off = np.abs(q - k)
    if off.size and off.max() >= QUANTIZATION_LIMIT:
        i = int(np.argmax(off))
        raise SyncError(
            f"interval quantization off by {off[i]:.2f} slots at index {i + 1} (clock too noisy)"
        )
    if np.any(k < 1):
        i = int(np.flatnonzero(k < 1)[0])
        raise SyncError(f"pulse interval at index {i + 1} is shorter than half a period")
    return np.concatenate([[0], np.cumsum(k.astype(np.int64))])


def _matching_offsets(rel: np.ndarray, pattern: PulsePattern) -> list[int]:
    marker = pattern.marker_length
    mask = _template_mask(pattern, marker + 1)
    matches = []
    for o in range(marker + 1):
        end = min(o + int(rel[-1]), marker)
        window = mask[o:end + 1]
        # The window must show at least one gap, or nothing pins the offset.
        if window.all():
            continue
        observed = rel[rel + o <= end] + o
        if np.array_equal(observed, np.flatnonzero(window) + o):
            matches.append(o)
    return matches


def decode_slots(pulses: np.ndarray, pattern: PulsePattern) -> Tuple[np.ndarray, float]:
    """Global slot index of every observed pulse, plus the apparent period."""
    pulses = np.asarray(pulses, dtype=np.int64)
    if pulses.size < 2:
        raise SyncError(f"need at least 2 trigger observations, got {pulses.size}")
    period = estimate_period(pulses)
    rel = quantize_intervals(pulses, period)
    if pattern.marker_length == 0:
        # No marker: the first observed pulse is pulse 0 by definition.
        return rel, period
    matches = _matching_offsets(rel, pattern)
    if not matches:
        raise SyncError(f"marker not found in {pulses.size} observed pulses")
    if len(matches) > 1:
        raise SyncError(f"marker found at multiple offsets {matches} (ambiguous pattern)")
    return rel + matches[0], period


def match_pattern(pulses: np.ndarray, pattern: PulsePattern) -> int:
    """Global slot index of the first observed pulse."""
    slots, _ = decode_slots(pulses, pattern)
    return int(slots[0])


# ── Clock models ─────────────────────────────────────────────────────────


def fit_clock(
    global_ns: np.ndarray,
    sensor_ns: np.ndarray,
    max_residual_ns: float = 1_000_000.0,
) -> ClockModel:
    """Least-squares ``sensor = scale * global + offset``.

    Centered so nanosecond-scale offsets of 10^10 do not eat precision. A
    residual above ``max_residual_ns`` means a pulse was mis-associated.
    """
    g = np.asarray(global_ns, dtype=np.float64)
    s = np.asarray(sensor_ns, dtype=np.float64)
    if g.size != s.size:
        raise SyncError("fit_clock: global and sensor arrays differ in length")
    if g.size < 2:
        raise SyncError(f"fit_clock needs at least 2 matched pairs, got {g.size}")
    g_mean = g.mean()
    s_mean = s.mean()
    dg = g - g_mean
    denom = float(np.dot(dg, dg))
    if denom == 0.0:
        raise SyncError("fit_clock: all pairs share one global time")
    scale = float(np.dot(dg, s - s_mean)) / denom
    offset = s_mean - scale * g_mean
    residual = s - (scale * g + offset)
    max_res = float(np.abs(residual).max())
    if max_res > max_residual_ns:
        worst = int(np.argmax(np.abs(residual)))
        raise SyncError(
            f"clock fit residual {max_res:.0f} ns at pair {worst} exceeds "
            f"{max_residual_ns:.0f} ns (mis-associated pulse?)"
        )
    try:
        return ClockModel(
            scale=scale,
            offset_ns=float(offset),
            rms_residual_ns=float(np.sqrt(np.mean(residual ** 2))),
            max_residual_ns=max_res,
            pairs=int(g.size),
        )
    except ValidationError as exc:
        raise SyncError(f"implausible clock fit: {exc.errors()[0]['msg']}") from exc


def to_global(model: ClockModel, t_sensor):
    """Invert the fitted map; rounds to whole nanoseconds."""
    t = np.rint((np.asarray(t_sensor, dtype=np.float64) - model.offset_ns) / model.scale)
    return t.astype(np.int64) if t.ndim else int(t)


def to_sensor(model: ClockModel, t_global):
    t = np.rint(model.scale * np.asarray(t_global, dtype=np.float64) + model.offset_ns)
    return t.astype(np.int64) if t.ndim else int(t)


# ── Per-stream rewriting ─────────────────────────────────────────────────


def resolve_imu_times(
    imu: np.ndarray,
    pulses: np.ndarray,
    slots: np.ndarray,
    model: ClockModel,
    pattern: PulsePattern,
    tolerance_ns: int = 1_000_000,
) -> np.ndarray:
    """IMU samples in global time: reference pulse time + elapsed_since_pulse.

    The reference pulse is the observed trigger closest to ``t - elapsed``.
    Samples that refer to a pulse before the first observed one are dropped.
    """
    period = pattern.period_ns
    pulses = np.asarray(pulses, dtype=np.int64)
    t = imu["t"].astype(np.int64)
    elapsed = imu["elapsed"].astype(np.int64)
    ref_local = t - elapsed

    early = ref_local < pulses[0] - period // 4
    if early.any():
        logger.warning("imu: dropping %d samples recorded before the first observed pulse",
                       int(early.sum()))
        imu, ref_local, elapsed = imu[~early], ref_local[~early], elapsed[~early]

    pos = np.searchsorted(pulses, ref_local)
    left = np.clip(pos - 1, 0, len(pulses) - 1)
    right = np.clip(pos, 0, len(pulses) - 1)
    nearest = np.where(
        np.abs(pulses[right] - ref_local) < np.abs(pulses[left] - ref_local), right, left
    )
    off = np.abs(pulses[nearest] - ref_local)
    unmatched = np.flatnonzero(off > period // 4)
    if unmatched.size:
        raise SyncError(f"imu: sample {int(unmatched[0])} refers to no observed pulse")

    k = slots[nearest].astype(np.int64)
    allowed = (_next_template_slot(pattern, k) - k) * period + tolerance_ns
    elapsed_global = np.rint(elapsed / model.scale).astype(np.int64)
    missed = np.flatnonzero(elapsed_global > allowed)
    if missed.size:
        i = int(missed[0])
        raise SyncError(
            f"imu: missed pulse at sample {i} (elapsed {int(elapsed[i])} ns exceeds "
            f"{int(allowed[i])} ns)"
        )

    out = imu.copy()
    out["t"] = k * period + elapsed_global
    if np.any(np.diff(out["t"]) < 0):
        logger.warning("imu: reordering samples after pulse jitter")
        out = out[np.argsort(out["t"], kind="stable")]
    return out


def _events_to_global(model: ClockModel):
    def transform(chunk: np.ndarray) -> np.ndarray:
        t = to_global(model, chunk["t"])
        keep = t >= 0
        out = chunk[keep].copy()
        out["t"] = t[keep].astype(np.uint64)
        return out

    return transform


def _frames_to_global(frames: list[FrameRecord], slots: np.ndarray, period: int) -> list[FrameRecord]:
    synced = []
    for frame in frames:
        if not 0 <= frame.pulse_index < len(slots):
            raise SyncError(
                f"rgb: frame {frame.filename} refers to trigger {frame.pulse_index}, "
                f"only {len(slots)} observed"
            )
        slot = int(slots[frame.pulse_index])
        synced.append(FrameRecord(
            pulse_index=slot,
            t_ns=slot * period + frame.exposure_us * 1000 // 2,
            exposure_us=frame.exposure_us,
            filename=frame.filename,
        ))
    return synced


# ── Recording-level synchronization ─────────────────────────────────────


@dataclass
class _DecodedSensor:
    slots: np.ndarray
    model: ClockModel


def _max_disagreement(errors: Dict[str, Tuple[np.ndarray, np.ndarray]]) -> float:
    """Largest spread of mapped pulse times across sensors at a shared slot."""
    if len(errors) < 2:
        return 0.0
    slots = np.concatenate([s for s, _ in errors.values()])
    err = np.concatenate([e for _, e in errors.values()])
    order = np.argsort(slots, kind="stable")
    slots, err = slots[order], err[order]
    starts = np.flatnonzero(np.concatenate([[True], np.diff(slots) != 0]))
    counts = np.diff(np.concatenate([starts, [len(slots)]]))
    shared = counts > 1
    if not shared.any():
        return 0.0
    spread = np.maximum.reduceat(err, starts) - np.minimum.reduceat(err, starts)
    return float(spread[shared].max())


class SyncService:
    """Rewrites a local-clock recording onto the global clock."""

    def __init__(self, config: Optional[SyncConfig] = None, workers: int = 1):
        self.config = config or SyncConfig()
        self.workers = workers

    def pattern_for(self, rec: Recording) -> PulsePattern:
        meta = rec.metadata
        return PulsePattern.parse(
            self.config.pattern or meta.sync_pattern,
            period_ns=self.config.period_ns or meta.sync_period_ns,
            slow_ratio=self.config.slow_ratio or meta.sync_slow_ratio,
        )

    def _decode(self, sensor: str, pulses: np.ndarray, pattern: PulsePattern) -> _DecodedSensor:
        try:
            slots, _ = decode_slots(pulses, pattern)
            if sensor in SLOW_CHANNEL_SENSORS:
                slots = slots * pattern.slow_ratio
            model = fit_clock(slots * pattern.period_ns, pulses, self.config.max_residual_ns)
        except SyncError as exc:
            raise SyncError(f"{sensor}: {exc}") from exc
        logger.debug("%s: first slot %d, scale %.9f, rms %.1f ns",
                     sensor, int(slots[0]), model.scale, model.rms_residual_ns)
        return _DecodedSensor(slots=slots, model=model)

    def synchronize(self, rec: Recording) -> Tuple[Recording, SyncSolution]:
        pattern = self.pattern_for(rec)
        if rec.metadata.clock == "global":
            solution = SyncSolution(
                pattern=pattern.to_text(),
                period_ns=pattern.period_ns,
                clocks={sensor: ClockModel() for sensor in SYNCED_SENSORS},
                first_index={sensor: 0 for sensor in SYNCED_SENSORS},
            )
            return rec, solution

        for sensor in SYNCED_SENSORS:
            if sensor not in rec.triggers:
                raise SyncError(f"{sensor}: missing trigger observations (triggers_{sensor}.csv)")

        with ThreadPoolExecutor(max_workers=self.workers) as pool:
            futures = {
                sensor: pool.submit(self._decode, sensor, rec.triggers[sensor], pattern)
                for sensor in SYNCED_SENSORS
            }
            decoded = {sensor: fut.result() for sensor, fut in futures.items()}

        period = pattern.period_ns
        errors = {}
        for sensor, dec in decoded.items():
            mapped = to_global(dec.model, rec.triggers[sensor])
            errors[sensor] = (dec.slots, (mapped - dec.slots * period).astype(np.float64))

        imu_dec = decoded["imu"]
        imu = resolve_imu_times(
            rec.imu, rec.triggers["imu"], imu_dec.slots, imu_dec.model, pattern,
            self.config.elapsed_tolerance_ns,
        )

        gnss = rec.gnss.copy()
        gnss["t"] = to_global(decoded["gnss"].model, rec.gnss["t"])
        rng = rec.range.copy()
        offset = self.config.range_offset_ns
        if offset is None:
            offset = rec.metadata.sync_range_offset_ns
        rng["t"] = rng["t"] + offset

        triggers = {
            sensor: to_global(decoded[sensor].model, pulses) if sensor in decoded else pulses
            for sensor, pulses in rec.triggers.items()
        }

        solution = SyncSolution(
            pattern=pattern.to_text(),
            period_ns=period,
            clocks={sensor: dec.model for sensor, dec in decoded.items()},
            first_index={sensor: int(dec.slots[0]) for sensor, dec in decoded.items()},
            max_disagreement_ns=_max_disagreement(errors),
        )
        synced = rec.with_changes(
            metadata=rec.metadata.model_copy(update={"clock": "global"}),
            events=rec.events.map_chunks(_events_to_global(decoded["event"].model)),
            frames=_frames_to_global(rec.frames, decoded["rgb"].slots, period),
            imu=imu,
            gnss=gnss,
            range=rng,
            triggers=triggers,
        )
        logger.info("Synchronized %s: max cross-sensor disagreement %.1f ns",
                    rec.metadata.sequence, solution.max_disagreement_ns)
        return synced, solution


def synchronize_recording(
    rec: Recording,
    pattern: Optional[PulsePattern] = None,
    config: Optional[SyncConfig] = None,
    workers: int = 1,
) -> Tuple[Recording, SyncSolution]:
    config = config or SyncConfig()
    if pattern is not None:
        config = config.model_copy(update={
            "pattern": pattern.to_text(),
            "period_ns": pattern.period_ns,
            "slow_ratio": pattern.slow_ratio,
        })
    return SyncService(config, workers).synchronize(rec)


# ── Solution file ────────────────────────────────────────────────────────


def write_sync_solution(path: Path, solution: SyncSolution) -> None:
    items = [
        ("pattern", solution.pattern),
        ("period_ns", solution.period_ns),
        ("max_disagreement_ns", solution.max_disagreement_ns),
    ]
    for sensor in sorted(solution.clocks):
        model = solution.clocks[sensor]
        for key, value in model.model_dump().items():
            items.append((f"clock.{sensor}.{key}", value))
        if sensor in solution.first_index:
            items.append((f"first_index.{sensor}", solution.first_index[sensor]))
    Path(path).write_text(format_key_value_text(items))


def read_sync_solution(path: Path) -> SyncSolution:
    values = parse_key_value_text(Path(path).read_text(), source=str(path))
    clocks: Dict[str, dict] = {}
    first_index: Dict[str, int] = {}
    for key, value in values.items():
        head, _, rest = key.partition(".")
        if head == "clock":
            sensor, _, field = rest.partition(".")
            clocks.setdefault(sensor, {})[field] = value
        elif head == "first_index":
            first_index[rest] = int(value)
    return SyncSolution(
        pattern=values.get("pattern", ""),
        period_ns=int(values["period_ns"]),
        clocks={sensor: ClockModel.model_validate(fields) for sensor, fields in clocks.items()},
        first_index=first_index,
        max_disagreement_ns=float(values.get("max_disagreement_ns", 0.0)),
    )
