"""
Simulator: flight planning, rendering, ideal threshold-crossing events and
the sensor streams a simulated recording carries.
"""

import numpy as np
import pytest

from app.common import ConfigError, SimulationError
from app.models.recording import EventStream
from app.models.schemas import FlightPlan, SimulationConfig, UtmPoint
from app.services.simulation_service import (
    EventGenerator,
    ScenePlane,
    SimulationService,
    ThresholdState,
    Trajectory,
    _Hover,
    _Move,
    make_texture,
    plan_flight,
    render_rgb,
    resolve_preset,
    thin_events,
    threshold_crossings,
    track_spacing,
    write_simulation,
)
from app.utils.camera import nadir_rotation
from app.utils.geodesy import latlon_to_utm_arrays

E0, N0 = 500_000.0, 4_420_000.0


def _scene(kind="checkerboard"):
    origin = UtmPoint(easting=E0 - 20.0, northing=N0 + 20.0, zone=18, hemisphere="N")
    return ScenePlane(make_texture(kind, 160, 160, 0.25, 2.0), 0.25, origin, 0.0)


def _plan(**overrides):
    values = dict(east_max=10.0, north_max=9.0, altitude_agl=40.0, speed=3.0, track_spacing=9.0,
                  start_agl=10.0, climb_rate=4.0, hover_s=1.0)
    values.update(overrides)
    return FlightPlan(**values)


# ── Flight planning ────────────────────────────────────────────────────


def test_track_spacing_for_the_catalog_overlap():
    assert track_spacing(40.0, 64.0, 0.82) == pytest.approx(9.0, abs=0.01)
    assert track_spacing(40.0, 64.0, 0.0) == pytest.approx(80.0 * np.tan(np.radians(32.0)))


def test_full_overlap_is_refused():
    with pytest.raises(SimulationError, match="overlap"):
        track_spacing(40.0, 64.0, 1.0)
    with pytest.raises(SimulationError, match="overlap must be below 1"):
        plan_flight(_plan(track_spacing=None, overlap=1.0), 64.0)


def test_lawnmower_segments():
    trajectory = plan_flight(_plan(), 64.0)

    kinds = [segment.kind for segment in trajectory.segments]
    assert kinds == ["hover", "climb", "leg", "turn", "leg", "turn", "leg", "descent", "hover"]
    start, end = trajectory.sample([0.0, trajectory.duration]).position
    np.testing.assert_allclose(start, [0.0, 0.0, 10.0], atol=1e-9)
    np.testing.assert_allclose(end, [0.0, 9.0, 10.0], atol=1e-9)


def test_quarter_turn_duration_and_peak_rate():
    trajectory = plan_flight(_plan(), 64.0)
    turns = trajectory.intervals("turn")

    for start, end in turns:
        assert end - start == pytest.approx(np.pi ** 2 / 2.4)
        mid = trajectory.sample((start + end) / 2)
        assert mid.yaw_rate[0] == pytest.approx(0.6)


def test_crosshatch_adds_perpendicular_tracks():
    lawnmower = plan_flight(_plan(), 64.0)
    crosshatch = plan_flight(_plan(pattern="crosshatch"), 64.0)

    assert len(lawnmower.intervals("leg")) == 3
    assert len(crosshatch.intervals("leg")) == 7


def test_cruise_speed_between_ramps():
    trajectory = plan_flight(_plan(), 64.0)
    leg_start, leg_end = trajectory.intervals("leg")[0]
    sample = trajectory.sample(np.linspace(leg_start + 1.6, leg_end - 1.6, 5))
    np.testing.assert_allclose(np.linalg.norm(sample.velocity, axis=1), 3.0)
    np.testing.assert_allclose(sample.agl, 40.0)


def test_unknown_preset():
    with pytest.raises(ConfigError, match="unknown simulate.preset"):
        resolve_preset("F9.X.1")
    preset, small = resolve_preset("F3.D.1-small")
    assert (preset.crosshatch, small) == (True, True)


# ── Rendering ──────────────────────────────────────────────────────────


def test_constant_scene_renders_flat(tiny_calib):
    scene = _scene("constant")
    R = nadir_rotation(np.array([0.3]))[0]

    img = render_rgb([(R, np.array([E0, N0, 10.0]))], scene, tiny_calib)

    assert img.shape == (18, 32, 3)
    assert np.all(img == 128)


def test_gain_scales_the_rendered_frame(tiny_calib):
    scene = _scene("constant")
    R = nadir_rotation(np.array([0.0]))[0]
    img = render_rgb([(R, np.array([E0, N0, 10.0]))], scene, tiny_calib, gain=0.5)
    assert np.all(img == 64)


def test_camera_under_the_ground_cannot_render(tiny_calib):
    R = nadir_rotation(np.array([0.0]))[0]
    with pytest.raises(SimulationError, match="not above the ground plane"):
        render_rgb([(R, np.array([E0, N0, -1.0]))], _scene(), tiny_calib)


# ── Threshold crossings ────────────────────────────────────────────────


def test_crossings_are_interpolated_between_samples():
    state = ThresholdState.from_frame(np.array([0.0]), 0)
    frames = np.array([[0.5], [0.0]])

    t, pix, p = threshold_crossings(state, frames, np.array([1000, 2000]), 0.2)

    assert t.tolist() == [400, 800, 1600, 2000]
    assert p.tolist() == [1, 1, 0, 0]
    assert pix.tolist() == [0, 0, 0, 0]
    assert state.t_prev == 2000


@pytest.mark.parametrize("seed", range(3))
def test_crossing_counts_track_the_log_signal(seed):
    rng = np.random.default_rng(seed)
    log = np.cumsum(rng.normal(0.0, 0.15, (40, 25)), axis=0)
    state = ThresholdState.from_frame(np.zeros(25), 0)
    times = np.arange(1, 41, dtype=np.int64) * 1_000_000

    t, pix, p = threshold_crossings(state, log, times, 0.25)

    assert np.all(np.diff(t) >= 0)
    assert t.min() >= 0 and t.max() <= times[-1]
    net = np.bincount(pix, weights=np.where(p == 1, 1.0, -1.0), minlength=25)
    # The reference level moves one contrast step per event and ends within
    # one step of the final log value.
    np.testing.assert_allclose(state.ref, 0.25 * net, atol=1e-9)
    assert np.all(np.abs(log[-1] - state.ref) < 0.25)


def test_supersample_times_must_increase():
    state = ThresholdState.from_frame(np.zeros(4), 1000)
    with pytest.raises(SimulationError, match="must increase"):
        threshold_crossings(state, np.zeros((1, 4)), np.array([1000]), 0.2)


def test_thinning_spreads_kept_events():
    assert thin_events(10, 4).tolist() == [0, 2, 5, 7]
    assert thin_events(3, 5).tolist() == [0, 1, 2]


def _generator(segments, tiny_calib, max_rate=20e6):
    trajectory = Trajectory(segments, (E0, N0, 0.0))
    return EventGenerator(trajectory, _scene(), tiny_calib, 0.2, max_rate)


def test_hovering_camera_sees_no_events(tiny_calib):
    generator = _generator([_Hover(np.array([0.0, 0.0, 10.0]), 0.0, 0.5)], tiny_calib)
    assert EventStream.from_factory(generator.slabs).count() == 0


def test_moving_camera_events_are_ordered_and_reiterable(tiny_calib):
    move = _Move(np.array([0.0, 0.0, 10.0]), np.array([2.0, 0.0, 10.0]), 2.0, 0.0, 0.0)
    generator = _generator([move], tiny_calib)
    stream = EventStream.from_factory(generator.slabs)

    first = stream.to_array()
    second = stream.to_array()

    assert len(first) > 0
    assert np.array_equal(first, second)
    assert np.all(np.diff(first["t"].astype(np.int64)) >= 0)
    assert first["t"].max() <= 1_000_000_000
    assert first["x"].max() < 32 and first["y"].max() < 18
    assert set(np.unique(first["p"])) <= {0, 1}
    assert (generator.generated, generator.dropped) == (len(first), 0)


def test_rate_cap_drops_events(tiny_calib, caplog):
    move = _Move(np.array([0.0, 0.0, 10.0]), np.array([2.0, 0.0, 10.0]), 2.0, 0.0, 0.0)
    generator = _generator([move], tiny_calib, max_rate=200.0)

    kept = EventStream.from_factory(generator.slabs).to_array()

    assert generator.dropped > 0
    assert len(kept) == generator.generated - generator.dropped
    assert len(kept) <= 200
    assert "event rate cap" in caplog.text


# ── Simulated recordings ───────────────────────────────────────────────


@pytest.fixture(scope="module")
def streams_only():
    cfg = SimulationConfig(
        event_width=64, event_height=36, rgb_width=80, rgb_height=60,
        track_length_m=10.0, n_tracks=2, climb_rate=8.0, hover_s=0.5, events=False,
    )
    return SimulationService(cfg).simulate()


def test_small_preset_flight(streams_only):
    assert streams_only.plan.track_spacing == pytest.approx(9.0, abs=0.01)
    assert streams_only.trajectory.duration == pytest.approx(33.89, abs=0.05)
    assert len(streams_only.trajectory.intervals("turn")) == 2
    assert streams_only.recording.metadata.clock == "local"


def test_gnss_fixes_during_cruise_are_0_6_m_apart(streams_only):
    gnss = streams_only.recording.gnss
    east, north, _, _ = latlon_to_utm_arrays(gnss["lat"], gnss["lon"])
    steps = np.hypot(np.diff(east), np.diff(north))

    assert steps.max() < 0.6 + 1e-3
    assert np.sum(np.abs(steps - 0.6) < 1e-3) >= 5
    assert np.all(np.diff(gnss["t"]) == 200_000_000)


def test_imu_sees_gravity_and_the_turn_rate(streams_only):
    imu = streams_only.recording.imu
    force = np.linalg.norm(np.column_stack([imu["ax"], imu["ay"], imu["az"]]), axis=1)
    rate = np.linalg.norm(np.column_stack([imu["wx"], imu["wy"], imu["wz"]]), axis=1)

    assert force[0] == pytest.approx(9.81)
    assert rate.max() == pytest.approx(0.6, abs=1e-3)
    np.testing.assert_allclose(np.linalg.norm([imu["qw"], imu["qx"], imu["qy"], imu["qz"]], axis=0), 1.0)


def test_frames_follow_every_fifth_pulse(streams_only):
    rec = streams_only.recording
    slots = [int(f.filename[4:10]) for f in rec.frames]

    assert all(slot % 5 == 0 for slot in slots)
    assert rec.frames[0].exposure_us == 5000
    img = rec.load_image(rec.frames[0])
    assert img.shape == (60, 80, 3) and img.dtype == np.uint8


def test_simulation_is_deterministic():
    cfg = SimulationConfig(
        event_width=16, event_height=9, rgb_width=20, rgb_height=15, track_length_m=6.0,
        n_tracks=2, climb_rate=8.0, hover_s=0.2, events=False, gnss_noise_m=0.05, range_noise_m=0.02,
    )
    a = SimulationService(cfg, seed=7).simulate().recording
    b = SimulationService(cfg, seed=7).simulate().recording

    for name in ("imu", "gnss", "range"):
        assert np.array_equal(getattr(a, name), getattr(b, name))
    assert a.frames == b.frames
    assert np.array_equal(a.load_image(a.frames[3]), b.load_image(b.frames[3]))


def test_write_simulation_records_the_truth(tmp_path):
    cfg = SimulationConfig(
        event_width=16, event_height=9, rgb_width=20, rgb_height=15, track_length_m=6.0,
        n_tracks=2, climb_rate=8.0, hover_s=0.2, events=False,
    )
    result = SimulationService(cfg).simulate()

    out = write_simulation(result, tmp_path / "sim")

    assert (out / "truth" / "texture.png").is_file()
    assert (out / "truth" / "texture.wld").is_file()
    clocks = (out / "truth" / "clocks.txt").read_text()
    assert "clock.event.scale = 1.000002\n" in clocks
    assert "turn.0 = " in clocks and "turn.1 = " in clocks
    assert len(list((out / "frames").glob("rgb_*.png"))) == len(result.recording.frames)
