"""
Command-line surface: exit codes, config overrides and the commands that
print to stdout.
"""

import logging

import numpy as np
import pytest

from app.main import EXIT_FAILURE, EXIT_OK, EXIT_USAGE, main, split_overrides
from app.models.schemas import REPORT_HEADER
from app.services.ortho_service import write_correspondences
from app.services.pipeline_service import PipelineService
from app.services.recording_service import write_recording
from app.utils.imaging import write_image


@pytest.fixture(autouse=True)
def restore_root_logging():
    """main() reconfigures the root logger; put it back for the next test."""
    root = logging.getLogger()
    handlers, level = root.handlers[:], root.level
    yield
    root.handlers[:] = handlers
    root.setLevel(level)


def _config_file(tmp_path, **values):
    path = tmp_path / "run.cfg"
    path.write_text("".join(f"{key} = {value}\n" for key, value in values.items()))
    return path


def test_overrides_are_split_from_the_arguments():
    rest, overrides = split_overrides(
        ["--config", "a.cfg", "--gate.omega_max", "0.5", "--fusion.method=brovey", "run"]
    )
    assert rest == ["--config", "a.cfg", "run"]
    assert overrides == {"gate.omega_max": "0.5", "fusion.method": "brovey"}


def test_version(capsys):
    with pytest.raises(SystemExit) as excinfo:
        main(["--version"])
    assert excinfo.value.code == 0
    assert capsys.readouterr().out.startswith("evortho ")


def test_missing_command_is_a_usage_error(capsys):
    assert main([]) == EXIT_USAGE
    assert "missing command" in capsys.readouterr().err


def test_missing_config_file(tmp_path, capsys):
    assert main(["--config", str(tmp_path / "nope.cfg"), "gate"]) == EXIT_USAGE
    assert "config not found" in capsys.readouterr().err


def test_unknown_override_key(tmp_path, capsys):
    assert main(["--gate.no_such_key", "1", "info", str(tmp_path)]) == EXIT_USAGE
    assert "unknown config key 'gate.no_such_key'" in capsys.readouterr().err


def test_invalid_override_value(tmp_path, capsys):
    assert main(["--gate.omega_max", "fast", "info", str(tmp_path)]) == EXIT_USAGE
    assert "gate.omega_max" in capsys.readouterr().err


def test_threads_must_be_positive(tmp_path):
    assert main(["--threads", "0", "info", str(tmp_path)]) == EXIT_USAGE


def test_stage_without_inputs_fails(tmp_path, capsys):
    (tmp_path / "rec").mkdir()
    config = _config_file(tmp_path, recording=tmp_path / "rec", output=tmp_path / "out")

    assert main(["--config", str(config), "gate"]) == EXIT_FAILURE
    assert "stage gate failed" in capsys.readouterr().err
    assert (tmp_path / "out" / ".partial").is_file()


def test_unexpected_exception_in_a_stage_is_a_processing_failure(tmp_path, monkeypatch, capsys):
    (tmp_path / "rec").mkdir()
    config = _config_file(tmp_path, recording=tmp_path / "rec", output=tmp_path / "out")

    def crash(self):
        raise RuntimeError("boom")

    monkeypatch.setattr(PipelineService, "gate", crash)

    assert main(["--config", str(config), "gate"]) == EXIT_FAILURE
    assert "stage gate failed: boom" in capsys.readouterr().err
    assert "name=gate" in (tmp_path / "out" / ".partial").read_text()


def test_standalone_evaluate_prints_a_report_row(tmp_path, capsys):
    img = np.random.default_rng(0).integers(1, 256, (40, 60, 3), dtype=np.uint8)
    write_image(tmp_path / "test.png", img)
    write_image(tmp_path / "ref.png", img)
    corners = np.array([[0.0, 0.0], [59.0, 0.0], [59.0, 39.0], [0.0, 39.0], [30.0, 20.0]])
    write_correspondences(tmp_path / "points.csv", np.column_stack([corners, corners]))

    code = main(["evaluate", "--test", str(tmp_path / "test.png"), "--ref", str(tmp_path / "ref.png"),
                 "--points", str(tmp_path / "points.csv"), "--sequence", "F1.D.1", "--type", "RGB Cropped"])

    assert code == EXIT_OK
    out = capsys.readouterr().out.splitlines()
    assert out == [REPORT_HEADER, "F1.D.1,RGB Cropped,inf,inf,1.00,0.00"]


def test_standalone_evaluate_without_points_reports_failure(tmp_path, capsys):
    code = main(["evaluate", "--test", str(tmp_path / "a.png"), "--ref", str(tmp_path / "b.png"),
                 "--sequence", "F2.N.3", "--type", "Events Only"])
    assert code == EXIT_OK
    assert capsys.readouterr().out.splitlines()[1] == "F2.N.3,Events Only,failed,failed,failed,failed"


def test_evaluate_needs_both_images(tmp_path):
    assert main(["evaluate", "--test", str(tmp_path / "a.png")]) == EXIT_USAGE


def test_info_summarizes_a_recording(tmp_path, capsys, make_recording):
    write_recording(make_recording(), tmp_path / "rec")

    assert main(["info", str(tmp_path / "rec")]) == EXIT_OK

    out = capsys.readouterr().out.splitlines()
    assert "sequence = unit" in out
    assert "events = 1000" in out
    assert "violations = 0" in out


def test_simulate_writes_a_recording(tmp_path, capsys):
    code = main([
        "simulate", str(tmp_path / "sim"),
        "--simulate.events", "false",
        "--simulate.event_width", "16", "--simulate.event_height", "9",
        "--simulate.rgb_width", "20", "--simulate.rgb_height", "15",
        "--simulate.track_length_m", "6", "--simulate.n_tracks", "2",
    ])

    assert code == EXIT_OK
    assert capsys.readouterr().out.strip() == str(tmp_path / "sim")
    assert (tmp_path / "sim" / "manifest.txt").is_file()
    assert (tmp_path / "sim" / "truth" / "clocks.txt").is_file()
