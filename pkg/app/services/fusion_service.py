# evortho - Fusion Service

# Remaps RGB frames into event-camera geometry with the rotation-only
# (infinite) homography and fuses them with reconstructed event frames.

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import cv2
import numpy as np

from ..common import FusionError
from ..models.recording import FrameRecord, Recording
from ..models.schemas import CameraCalibration, FusionConfig, FusionMethod
from ..utils.camera import in_bounds, pixel_rays, project
from ..utils.imaging import read_image, write_image
from .recording_service import write_frame_index

logger = logging.getLogger(__name__)

# Source coordinates this close outside the image are snapped onto the border.
_EDGE_TOLERANCE_PX = 1e-6


@dataclass(frozen=True)
class RemapTable:
    """RGB source coordinates per event pixel; NaN marks rays leaving the RGB view."""

    map_x: np.ndarray
    map_y: np.ndarray
    source_width: int
    source_height: int

    @property
    def shape(self) -> Tuple[int, int]:
        return self.map_x.shape

    @property
    def valid(self) -> np.ndarray:
        return ~np.isnan(self.map_x)


def compute_remap(event_calib: CameraCalibration, rgb_calib: CameraCalibration) -> RemapTable:
    K = event_calib.K
    if not np.isfinite(K).all() or abs(np.linalg.det(K)) < 1e-12 or abs(np.linalg.det(rgb_calib.K)) < 1e-12:
        raise FusionError("non-invertible camera intrinsics")
    rays = pixel_rays(event_calib)
    # event camera -> rig -> RGB camera; translation ignored (scene at infinity)
    rel = rgb_calib.rotation.T @ event_calib.rotation
    rgb_rays = rays @ rel.T
    u, v, front = project(rgb_calib, rgb_rays)

    w, h = rgb_calib.width, rgb_calib.height
    tol = _EDGE_TOLERANCE_PX
    valid = front & (u >= -tol) & (u <= w - 1 + tol) & (v >= -tol) & (v <= h - 1 + tol)
    u = np.clip(u, 0.0, w - 1.0)
    v = np.clip(v, 0.0, h - 1.0)
    valid &= in_bounds(rgb_calib, u, v)
    map_x = np.where(valid, u, np.nan)
    map_y = np.where(valid, v, np.nan)
    logger.debug("Remap table: %d of %d event pixels see the RGB image", int(valid.sum()), valid.size)
    return RemapTable(map_x, map_y, w, h)


def remap_image(img: np.ndarray, table: RemapTable) -> np.ndarray:
    """Bilinear sample at the table coordinates; invalid entries become 0."""
    if img.shape[:2] != (table.source_height, table.source_width):
        raise FusionError(
            f"image is {img.shape[1]}x{img.shape[0]}, remap table expects "
            f"{table.source_width}x{table.source_height}"
        )
    valid = table.valid
    map_x = np.where(valid, table.map_x, -1.0).astype(np.float32)
    map_y = np.where(valid, table.map_y, -1.0).astype(np.float32)
    out = cv2.remap(img, map_x, map_y, interpolation=cv2.INTER_LINEAR,
                    borderMode=cv2.BORDER_CONSTANT, borderValue=0)
    out[~valid] = 0
    return out


def intensity(ms: np.ndarray, weights: Optional[Sequence[float]] = None) -> np.ndarray:
    """Intensity component I; weights are rescaled to sum to 1."""
    if weights is None:
        return ms.sum(axis=-1) / 3.0
    w = np.asarray(weights, dtype=np.float64)
    return (ms * (w / w.sum())).sum(axis=-1)


def pansharpen_float(
    ms: np.ndarray,
    pan: np.ndarray,
    method: FusionMethod,
    weights: Optional[Sequence[float]] = None,
) -> np.ndarray:
    """Fusion in normalized [0, 1] space, unclamped."""
    if ms.shape[:-1] != pan.shape:
        raise FusionError(f"rgb {ms.shape[:-1]} and pan {pan.shape} differ in size")
    method = FusionMethod(method)
    p = pan[..., None]
    if method is FusionMethod.MEAN:
        return (ms + p) / 2.0
    if method is FusionMethod.EVENTS_ONLY:
        return np.repeat(p, ms.shape[-1], axis=-1)
    if method is FusionMethod.RGB_CROPPED:
        return ms.copy()
    I = intensity(ms, weights)[..., None]
    if method is FusionMethod.BROVEY:
        ratio = np.divide(p, I, out=np.zeros_like(I), where=I > 0)
        return ms * ratio
    return ms + (p - I)


def quantize(img: np.ndarray) -> np.ndarray:
    """Clamp to [0, 1] and requantize to 8 bit, halves rounded up."""
    return np.floor(np.clip(img, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def pansharpen(
    rgb: np.ndarray,
    pan: np.ndarray,
    method: FusionMethod,
    weights: Optional[Sequence[float]] = None,
) -> np.ndarray:
    """Fuse an 8-bit RGB image with an 8-bit pan image of the same size."""
    if rgb.shape[:2] != pan.shape[:2]:
        raise FusionError(f"rgb {rgb.shape[:2]} and pan {pan.shape[:2]} differ in size")
    method = FusionMethod(method)
    if method is FusionMethod.RGB_CROPPED:
        return rgb.copy()
    if method is FusionMethod.EVENTS_ONLY:
        return np.repeat(pan[..., None], 3, axis=-1)
    fused = pansharpen_float(rgb / 255.0, pan / 255.0, method, weights)
    return quantize(fused)


# ── Keyframe fusion ──────────────────────────────────────────────────────


def fuse_keyframes(
    rec: Recording,
    recon_dir: Path,
    recon_frames: List[FrameRecord],
    rgb_by_pulse: Dict[int, FrameRecord],
    config: FusionConfig,
    out_dir: Path,
) -> List[FrameRecord]:
    """Remap each keyframe's RGB partner and fuse it with the reconstruction.

    Output mirrors the reconstruction index: same names, pulse indices and times.
    """
    table = compute_remap(rec.calib_event, rec.calib_rgb)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    fused_records = []
    for frame in recon_frames:
        partner = rgb_by_pulse.get(frame.pulse_index)
        if partner is None:
            raise FusionError(f"no RGB frame for keyframe {frame.filename} (pulse {frame.pulse_index})")
        pan = read_image(Path(recon_dir) / frame.filename, gray=True)
        rgb = remap_image(rec.load_image(partner), table)
        write_image(out_dir / frame.filename, pansharpen(rgb, pan, config.method, config.weights))
        fused_records.append(frame)
    write_frame_index(out_dir / "index.csv", fused_records)
    logger.info("Fused %d keyframes (%s)", len(fused_records), FusionMethod(config.method).value)
    return fused_records
