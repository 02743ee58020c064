"""
Replay against converted real recordings.

Point EVORTHO_DATASET_DIR at a directory holding one converted recording per
sub-directory (each with a manifest.txt) and, optionally, the released
ground-truth orthomap as ground_truth.png. Skipped when the variable is unset.
"""

from pathlib import Path

import numpy as np
import pytest

from app.config import Settings
from app.services.eval_service import psnr
from app.services.recording_service import describe_recording, read_recording, validate_recording
from app.utils.imaging import read_image


def _dataset_dir() -> Path:
    configured = Settings().dataset_dir
    if not configured:
        pytest.skip("EVORTHO_DATASET_DIR not set")
    root = Path(configured)
    if not root.is_dir():
        pytest.skip(f"dataset directory {root} not found")
    return root


def test_converted_recordings_are_valid():
    root = _dataset_dir()
    recordings = sorted(p for p in root.iterdir() if (p / "manifest.txt").is_file())
    if not recordings:
        pytest.skip(f"no converted recordings under {root}")

    for path in recordings:
        rec = read_recording(path, validate=False)
        assert validate_recording(rec) == [], path.name
        assert describe_recording(rec)["events"] > 0, path.name


def test_black_image_anchor_against_the_ground_truth():
    root = _dataset_dir()
    truth_path = root / "ground_truth.png"
    if not truth_path.is_file():
        pytest.skip("ground_truth.png not in the dataset directory")

    truth = read_image(truth_path)
    if truth.ndim == 2:
        truth = np.repeat(truth[..., None], 3, axis=-1)

    assert psnr(np.zeros_like(truth), truth) == pytest.approx(7.18, abs=0.05)
