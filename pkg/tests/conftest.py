"""
Test fixtures for evortho tests.

Tiny calibrations, hand-built recordings and desk-scale simulator
configurations. Nothing here touches the network or a real dataset.
"""

import numpy as np
import pytest

from app.config import get_settings
from app.models.recording import (
    GNSS_DTYPE,
    IMU_DTYPE,
    RANGE_DTYPE,
    EventStream,
    FrameRecord,
    Recording,
    make_events,
)
from app.models.schemas import FIX_CODES, CameraCalibration, RecordingMetadata, SimulationConfig


@pytest.fixture(autouse=True)
def clean_settings(monkeypatch):
    """Settings are lru_cached; drop the cache so EVORTHO_* monkeypatches apply."""
    for name in ("EVORTHO_THREADS", "EVORTHO_CHUNK_SIZE", "EVORTHO_LOG_LEVEL"):
        monkeypatch.delenv(name, raising=False)
    get_settings.cache_clear()
    yield
    get_settings.cache_clear()


@pytest.fixture
def tiny_calib() -> CameraCalibration:
    return CameraCalibration.from_fov(32, 18, 64.0, 39.0)


def _identity_quat(n):
    return np.ones(n), np.zeros(n), np.zeros(n), np.zeros(n)


@pytest.fixture
def make_recording(tiny_calib):
    """Factory for a small, valid, global-clock recording held in memory.

    ``n_events`` events spread over one second, 400 Hz level IMU, 5 Hz GNSS
    around Philadelphia at 60 m MSL, 60 Hz range at 40 m, gray frames at 10 Hz.
    """

    def build(n_events: int = 1000, seed: int = 0, clock: str = "global") -> Recording:
        rng = np.random.default_rng(seed)
        t = np.sort(rng.integers(0, 1_000_000_000, n_events)).astype(np.uint64)
        events = make_events(
            t,
            rng.integers(0, tiny_calib.width, n_events),
            rng.integers(0, tiny_calib.height, n_events),
            rng.integers(0, 2, n_events),
        )

        imu = np.zeros(400, dtype=IMU_DTYPE)
        imu["t"] = np.arange(400) * 2_500_000
        imu["az"] = 9.81
        imu["qw"], imu["qx"], imu["qy"], imu["qz"] = _identity_quat(400)
        imu["elapsed"] = imu["t"] % 20_000_000

        gnss = np.zeros(5, dtype=GNSS_DTYPE)
        gnss["t"] = np.arange(5) * 200_000_000
        gnss["lat"] = 39.9522 + np.arange(5) * 1e-6
        gnss["lon"] = -75.1990
        gnss["alt"] = 60.0
        gnss["fix"] = FIX_CODES["rtk"]

        rng_stream = np.zeros(60, dtype=RANGE_DTYPE)
        rng_stream["t"] = np.arange(60) * 16_666_667
        rng_stream["range"] = 40.0

        frames = [FrameRecord(5 * k, 100_000_000 * k + 2_500_000, 5000, f"rgb_{k:06d}.png") for k in range(10)]
        images = {f.filename: np.full((tiny_calib.height, tiny_calib.width, 3), 10 * i, dtype=np.uint8)
                  for i, f in enumerate(frames)}
        return Recording(
            metadata=RecordingMetadata(sequence="unit", clock=clock),
            calib_event=tiny_calib,
            calib_rgb=tiny_calib,
            events=EventStream.from_array(events),
            frames=frames,
            imu=imu,
            gnss=gnss,
            range=rng_stream,
            triggers={"rgb": np.arange(50, dtype=np.int64) * 20_000_000},
            image_loader=lambda frame: images[frame.filename],
        )

    return build


@pytest.fixture
def tiny_sim_config() -> SimulationConfig:
    """About 40 s of flight on a 64x36 event sensor: two 10 m tracks, climb and descent."""
    return SimulationConfig(
        preset="F1.D.1-small",
        event_width=64,
        event_height=36,
        rgb_width=80,
        rgb_height=60,
        track_length_m=10.0,
        n_tracks=2,
        climb_rate=8.0,
        hover_s=0.5,
        motion_blur_samples=2,
    )


@pytest.fixture
def streams_only_config(tiny_sim_config) -> SimulationConfig:
    """Same flight without the event generator (sync-only tests)."""
    return tiny_sim_config.model_copy(update={"events": False})
