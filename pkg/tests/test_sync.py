"""
Time synchronization: marker decoding, clock fitting and the rewrite of every
stream onto the global clock.

The end-to-end cases run the simulator without events, so the true clock
models and pulse slots are known exactly.
"""

import numpy as np
import pytest

from app.common import SyncError
from app.models.recording import IMU_DTYPE
from app.models.schemas import ClockModel, PulsePattern, SyncConfig, SyncSolution
from app.services.simulation_service import SimulationService
from app.services.sync_service import (
    decode_slots,
    fit_clock,
    match_pattern,
    pattern_template,
    quantize_intervals,
    read_sync_solution,
    resolve_imu_times,
    synchronize_recording,
    to_global,
    to_sensor,
    write_sync_solution,
)

PATTERN = PulsePattern.parse("9:2,6:1,run")
PERIOD = PATTERN.period_ns


def _observed(slots, scale=1.0, offset=0):
    return np.rint(scale * np.asarray(slots, dtype=np.float64) * PERIOD + offset).astype(np.int64)


# ── Pattern and marker ──────────────────────────────────────────────────


def test_template_skips_the_marker_gaps():
    slots = pattern_template(PATTERN, 22)
    assert slots.tolist() == [0, 1, 2, 3, 4, 5, 6, 7, 8, 11, 12, 13, 14, 15, 16, 18, 19, 20, 21]
    assert PATTERN.marker_length == 18


def test_pattern_text_round_trip():
    assert PATTERN.to_text() == "9:2,6:1,run"
    assert PulsePattern.parse("3:1,2:0").bursts == ((3, 1), (2, 0))


@pytest.mark.parametrize("token", ["9-2,run", "a:b,run", "9:2,6:1"])
def test_bad_patterns_are_rejected(token):
    with pytest.raises(ValueError):
        PulsePattern.parse(token)


@pytest.mark.parametrize("dropped", [0, 1, 5, 9, 12])
def test_decode_recovers_slots_after_lost_prefix(dropped):
    truth = pattern_template(PATTERN, 200)[dropped:]
    pulses = _observed(truth, scale=1.00002, offset=5_000_000_000)

    slots, period = decode_slots(pulses, PATTERN)

    assert np.array_equal(slots, truth)
    assert period == pytest.approx(PERIOD * 1.00002, rel=1e-9)
    assert match_pattern(pulses, PATTERN) == truth[0]


def test_marker_missing_entirely():
    pulses = _observed(np.arange(20, 80))
    with pytest.raises(SyncError, match="marker not found"):
        decode_slots(pulses, PATTERN)


def test_noisy_interval_is_rejected_with_its_index():
    pulses = np.arange(30, dtype=np.int64) * 1000
    pulses[5] += 400
    with pytest.raises(SyncError, match=r"at index 5 \(clock too noisy\)"):
        quantize_intervals(pulses, 1000.0)


def test_single_observation_cannot_be_decoded():
    with pytest.raises(SyncError, match="at least 2"):
        decode_slots(np.array([123]), PATTERN)


@pytest.mark.parametrize("seed", range(10))
def test_match_pattern_tolerates_half_millisecond_jitter(seed):
    truth = pattern_template(PATTERN, 200)[3:]
    clean = _observed(truth, scale=1.00002, offset=5_000_000_000)
    jitter = np.random.default_rng(seed).uniform(-500_000, 500_000, clean.size)
    jittered = clean + np.rint(jitter).astype(np.int64)

    assert match_pattern(jittered, PATTERN) == match_pattern(clean, PATTERN) == truth[0]


# ── IMU placement ───────────────────────────────────────────────────────


def _imu_after(pulses, pulse_positions, elapsed_ns):
    imu = np.zeros(len(elapsed_ns), dtype=IMU_DTYPE)
    imu["qw"] = 1.0
    imu["elapsed"] = elapsed_ns
    imu["t"] = pulses[pulse_positions] + imu["elapsed"]
    return imu


def test_imu_elapsed_within_one_period_is_placed():
    slots = np.arange(20, 41)
    pulses = _observed(slots)
    imu = _imu_after(pulses, [2, 5], [5_000_000, 19_000_000])

    out = resolve_imu_times(imu, pulses, slots, ClockModel(), PATTERN)

    assert out["t"].tolist() == [22 * PERIOD + 5_000_000, 25 * PERIOD + 19_000_000]


def test_imu_elapsed_past_the_next_pulse_is_a_missed_pulse():
    assert PERIOD == 20_000_000
    slots = np.arange(20, 41)
    pulses = _observed(slots)
    imu = _imu_after(pulses, [2, 5], [5_000_000, 25_000_000])

    with pytest.raises(SyncError, match="missed pulse at sample 1"):
        resolve_imu_times(imu, pulses, slots, ClockModel(), PATTERN)


# ── Clock models ────────────────────────────────────────────────────────


def test_fit_clock_recovers_drift_and_offset():
    g = np.arange(0, 5000, 7, dtype=np.int64) * PERIOD
    s = _observed(g / PERIOD, scale=0.999999, offset=12_500_000_000)

    model = fit_clock(g, s)

    assert model.scale == pytest.approx(0.999999, abs=1e-12)
    assert model.offset_ns == pytest.approx(12_500_000_000, abs=2.0)
    assert model.max_residual_ns <= 1.0


def test_fit_clock_flags_a_misassociated_pulse():
    g = np.arange(50, dtype=np.int64) * PERIOD
    s = g.copy()
    s[20] += PERIOD
    with pytest.raises(SyncError, match="mis-associated"):
        fit_clock(g, s)


@pytest.mark.parametrize("seed", range(20))
def test_drifting_jittered_sensors_agree_after_fitting(seed):
    # A longer first burst keeps the marker visible after 30 lost pulses.
    pattern = PulsePattern.parse("40:2,6:1,run")
    truth = pattern_template(pattern, 600)
    rng = np.random.default_rng(seed)
    g_check = np.arange(0, 500) * PERIOD
    predicted = []

    for _ in range(3):
        scale = 1.0 + rng.uniform(-5e-6, 5e-6)
        offset = rng.uniform(-10e9, 10e9)
        dropped = int(rng.integers(0, 31))
        slots = truth[dropped:]
        pulses = np.rint(scale * slots * PERIOD + offset + rng.normal(0.0, 100_000.0, slots.size)).astype(np.int64)

        decoded, _ = decode_slots(pulses, pattern)
        model = fit_clock(decoded * PERIOD, pulses)

        assert np.array_equal(decoded, slots)
        assert model.rms_residual_ns <= 300_000.0
        true_sensor = ClockModel(scale=scale, offset_ns=offset)
        predicted.append(to_global(model, to_sensor(true_sensor, g_check)))

    spread = np.max(predicted, axis=0) - np.min(predicted, axis=0)
    assert spread.max() <= 300_000


def test_global_and_sensor_maps_invert_each_other():
    model = ClockModel(scale=1.000002, offset_ns=12_500_000_000.0)
    t = np.array([0, 1, 123_456_789, 600_000_000_000], dtype=np.int64)

    back = to_global(model, to_sensor(model, t))

    assert np.max(np.abs(back - t)) <= 1
    assert isinstance(to_global(model, 12_500_000_000), int)


def test_solution_file_round_trip(tmp_path):
    solution = SyncSolution(
        clocks={"event": ClockModel(scale=1.000002, offset_ns=1.5e10, pairs=10)},
        first_index={"event": 3},
        max_disagreement_ns=12.5,
    )
    write_sync_solution(tmp_path / "sync.txt", solution)
    assert read_sync_solution(tmp_path / "sync.txt") == solution


# ── Recording-level synchronization ─────────────────────────────────────


@pytest.fixture
def local_recording(streams_only_config):
    cfg = streams_only_config.model_copy(update={
        "drop_prefix": {"rgb": 3, "imu": 7, "event": 1},
        "range_offset_ns": 5_000_000,
    })
    return SimulationService(cfg).simulate()


def test_clock_models_match_the_simulated_clocks(local_recording):
    synced, solution = synchronize_recording(local_recording.recording)

    for sensor, truth in local_recording.clocks.items():
        model = solution.clocks[sensor]
        assert model.scale == pytest.approx(truth.scale, abs=1e-9), sensor
        assert model.offset_ns == pytest.approx(truth.offset_ns, abs=50.0), sensor
    assert solution.first_index["rgb"] == 3
    assert solution.first_index["imu"] == 7
    assert solution.max_disagreement_ns < 10.0
    assert synced.metadata.clock == "global"


def test_frames_land_on_their_pulse_slots(local_recording):
    synced, _ = synchronize_recording(local_recording.recording)

    assert synced.frames
    for frame in synced.frames:
        slot = int(frame.filename[4:10])
        assert frame.pulse_index == slot
        assert frame.t_ns == slot * PERIOD + frame.exposure_us * 1000 // 2


def test_imu_samples_are_placed_from_their_pulse(local_recording):
    synced, _ = synchronize_recording(local_recording.recording)

    t = synced.imu["t"]
    # Sampling started at the first observed IMU pulse (slot 7).
    assert t[0] == 7 * PERIOD
    assert np.all(np.diff(t) == 2_500_000)


def test_gnss_and_range_are_shifted_to_global_time(local_recording):
    synced, _ = synchronize_recording(local_recording.recording)

    assert np.array_equal(synced.gnss["t"], np.arange(len(synced.gnss)) * 200_000_000)
    assert np.array_equal(synced.range["t"], np.arange(len(synced.range)) * 16_666_667)


def test_jittered_triggers_stay_within_tolerance(streams_only_config):
    cfg = streams_only_config.model_copy(update={"jitter_ns": 2_000.0})
    sim = SimulationService(cfg, seed=3).simulate()

    _, solution = synchronize_recording(sim.recording)

    for sensor in ("event", "rgb", "imu"):
        assert solution.clocks[sensor].scale == pytest.approx(sim.clocks[sensor].scale, abs=1e-7)
    assert solution.max_disagreement_ns < 50_000.0


def test_missing_trigger_stream_is_named(local_recording):
    rec = local_recording.recording
    triggers = {k: v for k, v in rec.triggers.items() if k != "imu"}
    with pytest.raises(SyncError, match="imu: missing trigger observations"):
        synchronize_recording(rec.with_changes(triggers=triggers))


def test_global_recording_passes_through(make_recording):
    rec = make_recording()
    synced, solution = synchronize_recording(rec)

    assert synced is rec
    assert all(model.scale == 1.0 for model in solution.clocks.values())


def test_configured_range_offset_wins_over_the_manifest(local_recording):
    rec = local_recording.recording
    synced, _ = synchronize_recording(rec, config=SyncConfig(range_offset_ns=0))
    assert np.array_equal(synced.range["t"], rec.range["t"])
