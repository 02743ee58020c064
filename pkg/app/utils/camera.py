"""Pinhole + radial-tangential (k1, k2, p1, p2) camera geometry on numpy arrays."""

from typing import Tuple

import numpy as np
from scipy.spatial.transform import Rotation

from ..models.schemas import CameraCalibration


def distort(xn: np.ndarray, yn: np.ndarray, coeffs) -> Tuple[np.ndarray, np.ndarray]:
    """Apply radial-tangential distortion to normalized image coordinates."""
    k1, k2, p1, p2 = coeffs
    if k1 == k2 == p1 == p2 == 0.0:
        return xn, yn
    r2 = xn * xn + yn * yn
    radial = 1.0 + k1 * r2 + k2 * r2 * r2
    xd = xn * radial + 2.0 * p1 * xn * yn + p2 * (r2 + 2.0 * xn * xn)
    yd = yn * radial + p1 * (r2 + 2.0 * yn * yn) + 2.0 * p2 * xn * yn
    return xd, yd


def undistort(xd: np.ndarray, yd: np.ndarray, coeffs, iterations: int = 20) -> Tuple[np.ndarray, np.ndarray]:
    """Invert ``distort`` by fixed-point iteration (the scheme OpenCV uses)."""
    k1, k2, p1, p2 = coeffs
    if k1 == k2 == p1 == p2 == 0.0:
        return xd, yd
    xn, yn = xd.copy(), yd.copy()
    for _ in range(iterations):
        r2 = xn * xn + yn * yn
        radial = 1.0 + k1 * r2 + k2 * r2 * r2
        dx = 2.0 * p1 * xn * yn + p2 * (r2 + 2.0 * xn * xn)
        dy = p1 * (r2 + 2.0 * yn * yn) + 2.0 * p2 * xn * yn
        xn = (xd - dx) / radial
        yn = (yd - dy) / radial
    return xn, yn


def pixel_grid(width: int, height: int) -> Tuple[np.ndarray, np.ndarray]:
    """(u, v) pixel-centre coordinates, each shaped (height, width)."""
    return np.meshgrid(np.arange(width, dtype=float), np.arange(height, dtype=float))


def pixel_rays(calib: CameraCalibration) -> np.ndarray:
    """Undistorted camera-frame ray (x, y, 1) for every pixel, shaped (h, w, 3)."""
    u, v = pixel_grid(calib.width, calib.height)
    xd = (u - calib.cx) / calib.fx
    yd = (v - calib.cy) / calib.fy
    xn, yn = undistort(xd, yd, calib.distortion)
    return np.stack([xn, yn, np.ones_like(xn)], axis=-1)


def project(calib: CameraCalibration, points_cam: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Camera-frame points (..., 3) -> pixel (u, v) and a mask of points in front."""
    z = points_cam[..., 2]
    front = z > 0
    safe_z = np.where(front, z, 1.0)
    xd, yd = distort(points_cam[..., 0] / safe_z, points_cam[..., 1] / safe_z, calib.distortion)
    return calib.fx * xd + calib.cx, calib.fy * yd + calib.cy, front


def in_bounds(calib: CameraCalibration, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Pixel coordinates that bilinear sampling can serve without borders."""
    return (u >= 0) & (u <= calib.width - 1) & (v >= 0) & (v <= calib.height - 1)


def quat_to_matrix(qw, qx, qy, qz) -> np.ndarray:
    """Unit quaternion(s) (scalar first) to rotation matrices (..., 3, 3)."""
    quat = np.stack(np.broadcast_arrays(qx, qy, qz, qw), axis=-1)
    return Rotation.from_quat(quat.reshape(-1, 4)).as_matrix().reshape(quat.shape[:-1] + (3, 3))


def matrix_to_quat(matrices: np.ndarray) -> np.ndarray:
    """Rotation matrices (..., 3, 3) to scalar-first quaternions with w >= 0."""
    m = np.asarray(matrices)
    xyzw = Rotation.from_matrix(m.reshape(-1, 3, 3)).as_quat()
    xyzw[xyzw[:, 3] < 0] *= -1.0
    wxyz = xyzw[:, [3, 0, 1, 2]]
    return wxyz.reshape(m.shape[:-2] + (4,))


def nadir_rotation(heading_rad) -> np.ndarray:
    """Rig-to-world (ENU) rotation of a level, downward-looking rig.

    Optical axis points down, image "up" (-y) points along the heading
    (radians counter-clockwise from east), x completes the right-handed frame.
    """
    h = np.asarray(heading_rad, dtype=float)
    c, s = np.cos(h), np.sin(h)
    zero = np.zeros_like(c)
    x_axis = np.stack([s, -c, zero], axis=-1)
    y_axis = np.stack([-c, -s, zero], axis=-1)
    z_axis = np.stack([zero, zero, zero - 1.0], axis=-1)
    return np.stack([x_axis, y_axis, z_axis], axis=-1)
