"""
evortho - Models

Stream record dtypes and containers (recording.py) and pydantic schemas
(schemas.py).
"""

from .recording import (
    EVENT_DTYPE,
    GNSS_DTYPE,
    IMU_DTYPE,
    RANGE_DTYPE,
    EventStream,
    FrameRecord,
    Recording,
    make_events,
)
from .schemas import (
    CameraCalibration,
    ClockModel,
    FusionMethod,
    OrthoReport,
    PulsePattern,
    RecordingMetadata,
    SyncSolution,
    UtmPoint,
)

__all__ = [
    "EVENT_DTYPE",
    "GNSS_DTYPE",
    "IMU_DTYPE",
    "RANGE_DTYPE",
    "EventStream",
    "FrameRecord",
    "Recording",
    "make_events",
    "CameraCalibration",
    "ClockModel",
    "FusionMethod",
    "OrthoReport",
    "PulsePattern",
    "RecordingMetadata",
    "SyncSolution",
    "UtmPoint",
]
