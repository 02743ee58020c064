"""
Recording container: directory layout, lossless write/read, chunked event
access and the invariant checks that guard every later stage.
"""

from pathlib import Path

import numpy as np
import pytest

from app.common import RecordingFormatError
from app.models.recording import EVENT_DTYPE, EventStream, make_events, rechunk
from app.services.recording_service import (
    describe_recording,
    read_recording,
    validate_recording,
    write_events,
    write_recording,
)
from app.utils.imaging import image_size, write_image


def _events(t, x=0, y=0, p=1):
    t = np.asarray(t, dtype=np.uint64)
    n = len(t)
    return make_events(t, np.broadcast_to(x, n), np.broadcast_to(y, n), np.broadcast_to(p, n))


# ── Event records ───────────────────────────────────────────────────────


def test_event_record_layout():
    assert EVENT_DTYPE.itemsize == 16
    raw = _events([5], x=3, y=4, p=1).tobytes()
    assert raw[:8] == (5).to_bytes(8, "little")
    assert raw[8:10] == (3).to_bytes(2, "little")
    assert raw[10:12] == (4).to_bytes(2, "little")
    assert raw[12] == 1
    assert raw[13:] == b"\x00\x00\x00"


@pytest.mark.parametrize("size", [1, 3, 7, 100])
def test_chunks_cover_the_stream_in_order(size):
    events = _events(np.arange(20))
    chunks = list(EventStream.from_array(events).chunks(size))

    assert all(len(c) <= size for c in chunks)
    assert np.array_equal(np.concatenate(chunks), events)


def test_rechunk_blocks_uneven_input():
    parts = [_events(range(0, 3)), _events(range(3, 4)), _events(range(4, 11))]
    sizes = [len(c) for c in rechunk(iter(parts), 4)]
    assert sizes == [4, 4, 3]


def test_factory_stream_is_reiterable():
    calls = []

    def factory():
        calls.append(1)
        yield _events([1, 2])
        yield _events([3])

    stream = EventStream.from_factory(factory)
    assert stream.count() == 3
    assert stream.to_array()["t"].tolist() == [1, 2, 3]
    assert len(calls) == 2


def test_truncated_event_file(tmp_path: Path):
    path = tmp_path / "events.bin"
    path.write_bytes(b"\x00" * 17)
    with pytest.raises(RecordingFormatError, match="truncated record"):
        EventStream.from_file(path)


def test_empty_event_file(tmp_path: Path):
    path = tmp_path / "events.bin"
    path.write_bytes(b"")

    stream = EventStream.from_file(path)

    assert stream.count() == 0
    assert stream.known_length == 0
    events = stream.to_array()
    assert len(events) == 0
    assert events.dtype == EVENT_DTYPE
    assert list(stream.chunks(4)) == []
    assert stream.time_span() is None


def test_write_events_refuses_unsorted_input(tmp_path: Path):
    stream = EventStream.from_array(_events([1, 5, 4]))
    with pytest.raises(RecordingFormatError, match="index 2"):
        write_events(tmp_path / "events.bin", stream)
    assert not (tmp_path / "events.bin").exists()


# ── Container ──────────────────────────────────────────────────────────


def test_written_recording_reads_back_identically(tmp_path: Path, make_recording):
    rec = make_recording()
    write_recording(rec, tmp_path / "rec", chunk_size=97)
    back = read_recording(tmp_path / "rec")

    assert back.metadata == rec.metadata
    assert back.calib_event == rec.calib_event
    assert np.array_equal(back.events.to_array(), rec.events.to_array())
    assert np.array_equal(back.imu, rec.imu)
    assert np.array_equal(back.gnss, rec.gnss)
    assert np.array_equal(back.range, rec.range)
    assert back.frames == rec.frames
    assert np.array_equal(back.triggers["rgb"], rec.triggers["rgb"])
    assert np.array_equal(back.load_image(back.frames[3]), rec.load_image(rec.frames[3]))


def test_missing_file_is_named(tmp_path: Path, make_recording):
    write_recording(make_recording(), tmp_path / "rec")
    (tmp_path / "rec" / "gnss.csv").unlink()
    with pytest.raises(RecordingFormatError, match="missing file gnss.csv"):
        read_recording(tmp_path / "rec")


def test_malformed_header_is_named(tmp_path: Path, make_recording):
    write_recording(make_recording(), tmp_path / "rec")
    path = tmp_path / "rec" / "range.csv"
    path.write_text("t,range\n" + "\n".join(path.read_text().splitlines()[1:]) + "\n")
    with pytest.raises(RecordingFormatError, match="range.csv: malformed header"):
        read_recording(tmp_path / "rec")


def test_invalid_manifest_value(tmp_path: Path, make_recording):
    write_recording(make_recording(), tmp_path / "rec")
    manifest = tmp_path / "rec" / "manifest.txt"
    manifest.write_text(manifest.read_text().replace("clock = global", "clock = gps"))
    with pytest.raises(RecordingFormatError, match="manifest.txt"):
        read_recording(tmp_path / "rec")


# ── Invariants ─────────────────────────────────────────────────────────


def test_clean_recording_has_no_violations(make_recording):
    assert validate_recording(make_recording()) == []


def test_event_out_of_bounds_is_reported_with_index(make_recording):
    rec = make_recording(n_events=10)
    events = rec.events.to_array()
    events["x"][6] = rec.calib_event.width
    rec = rec.with_changes(events=EventStream.from_array(events))

    assert "events: x out of bounds at index 6" in validate_recording(rec, chunk_size=4)


def test_stream_rules(make_recording):
    rec = make_recording()
    imu = rec.imu.copy()
    imu["qw"][10] = 0.5
    gnss = rec.gnss.copy()
    gnss["lat"][2] = 91.0
    rng = rec.range.copy()
    rng["range"][4] = -1.0
    rec = rec.with_changes(imu=imu, gnss=gnss, range=rng)

    violations = validate_recording(rec)
    assert "imu: non-unit quaternion at index 10" in violations
    assert "gnss: latitude out of range at index 2" in violations
    assert "range: non-positive range at index 4" in violations


def test_frame_size_is_checked_against_the_rgb_calibration(tmp_path, make_recording):
    write_recording(make_recording(), tmp_path / "rec")
    rec = read_recording(tmp_path / "rec")
    wrong = np.zeros((rec.calib_rgb.height, rec.calib_rgb.width + 1, 3), dtype=np.uint8)
    write_image(tmp_path / "rec" / "frames" / rec.frames[3].filename, wrong)

    assert image_size(tmp_path / "rec" / "frames" / rec.frames[3].filename) == (33, 18)
    assert validate_recording(rec) == ["frames: image size differs from calibration at index 3"]
    with pytest.raises(RecordingFormatError, match="image size differs from calibration"):
        read_recording(tmp_path / "rec")


def test_frame_size_of_lazily_loaded_images(make_recording):
    rec = make_recording()
    loader = rec.image_loader

    def shrink_second(frame):
        img = loader(frame)
        return img[:-1] if frame is rec.frames[2] else img

    violations = validate_recording(rec.with_changes(image_loader=shrink_second))
    assert violations == ["frames: image size differs from calibration at index 2"]


def test_missing_frame_image_is_reported(tmp_path, make_recording):
    write_recording(make_recording(), tmp_path / "rec")
    rec = read_recording(tmp_path / "rec")
    (tmp_path / "rec" / "frames" / rec.frames[5].filename).unlink()

    assert validate_recording(rec) == ["frames: unreadable image at index 5"]


def test_nan_range_is_allowed(make_recording):
    rec = make_recording()
    rng = rec.range.copy()
    rng["range"][0] = np.nan
    assert validate_recording(rec.with_changes(range=rng)) == []


def test_describe_recording(make_recording):
    info = describe_recording(make_recording(n_events=50))
    assert info["events"] == 50
    assert info["frames"] == 10
    assert info["triggers"] == "rgb:50"
