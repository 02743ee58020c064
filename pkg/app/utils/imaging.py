"""Lossless 8-bit image files. Arrays are RGB (or single-channel) in memory."""

import struct
from pathlib import Path

import cv2
import numpy as np

from ..common import PipelineError

# Fixed so re-encoding the same pixels always yields the same bytes.
_PNG_PARAMS = [cv2.IMWRITE_PNG_COMPRESSION, 3]
_PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"


def read_image(path: Path, gray: bool = False) -> np.ndarray:
    path = Path(path)
    flag = cv2.IMREAD_GRAYSCALE if gray else cv2.IMREAD_UNCHANGED
    img = cv2.imread(str(path), flag)
    if img is None:
        raise PipelineError(f"cannot read image {path}")
    if img.dtype != np.uint8:
        raise PipelineError(f"{path.name}: expected 8-bit image, got {img.dtype}")
    if img.ndim == 3:
        if img.shape[2] == 4:
            img = img[:, :, :3]
        img = cv2.cvtColor(img, cv2.COLOR_BGR2RGB)
    return img


def image_size(path: Path) -> tuple[int, int]:
    """(width, height) from the PNG header; other formats are decoded."""
    path = Path(path)
    try:
        with path.open("rb") as fh:
            head = fh.read(24)
    except OSError as exc:
        raise PipelineError(f"cannot read image {path}: {exc.strerror}") from exc
    if head[:8] == _PNG_SIGNATURE and head[12:16] == b"IHDR":
        width, height = struct.unpack(">II", head[16:24])
        return int(width), int(height)
    img = read_image(path)
    return img.shape[1], img.shape[0]


def write_image(path: Path, img: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    img = np.ascontiguousarray(img, dtype=np.uint8)
    if img.ndim == 3:
        img = cv2.cvtColor(img, cv2.COLOR_RGB2BGR)
    if not cv2.imwrite(str(path), img, _PNG_PARAMS):
        raise PipelineError(f"cannot write image {path}")


def write_world_file(path: Path, pixel_size: float, east: float, north: float) -> None:
    """Six-line world file; east/north are the centre of the top-left pixel."""
    lines = [pixel_size, 0.0, 0.0, -pixel_size, east, north]
    Path(path).write_text("".join(f"{value!r}\n" for value in map(float, lines)))


def read_world_file(path: Path) -> tuple[float, float, float, float]:
    """Return (pixel_size_x, pixel_size_y, east, north) of the top-left pixel centre."""
    values = [float(line) for line in Path(path).read_text().split()]
    if len(values) != 6:
        raise PipelineError(f"{Path(path).name}: world file needs 6 values, got {len(values)}")
    return values[0], -values[3], values[4], values[5]
