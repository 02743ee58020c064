"""
evortho - Evaluation Service

Aligns a test orthomosaic to a reference through manual correspondences
(normalized DLT homography, no RANSAC) and reports PSNR colour/gray, SSIM
and the non-zero pixel count as one results-table row.
"""

import logging
from itertools import combinations
from pathlib import Path
from typing import Literal, Optional, Tuple

import cv2
import numpy as np
from scipy.ndimage import correlate1d

from ..common import EvaluationError
from ..models.schemas import OrthoReport
from ..utils.csvio import parse_column, read_csv_columns
from ..utils.imaging import read_image

logger = logging.getLogger(__name__)

POINTS_HEADER = ("x_test", "y_test", "x_ref", "y_ref")

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
DATA_RANGE = 255.0
LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])

# Singular-value ratio below which the DLT system is treated as rank deficient.
_RANK_TOLERANCE = 1e-10


# ── Homography ───────────────────────────────────────────────────────────


def _normalizer(pts: np.ndarray) -> np.ndarray:
    """Similarity moving the centroid to 0 and the mean distance to sqrt(2)."""
    centroid = pts.mean(axis=0)
    dist = np.sqrt(((pts - centroid) ** 2).sum(axis=1)).mean()
    if dist == 0:
        raise EvaluationError("degenerate correspondences: all points coincide")
    s = np.sqrt(2.0) / dist
    return np.array([[s, 0.0, -s * centroid[0]], [0.0, s, -s * centroid[1]], [0.0, 0.0, 1.0]])


def _collinear(a, b, c, tol: float) -> bool:
    return abs((b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])) <= tol


def estimate_homography(points: np.ndarray) -> np.ndarray:
    """3x3 H with ref ~ H * test, from rows ``(x_test, y_test, x_ref, y_ref)``."""
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != 4:
        raise EvaluationError("correspondences must be rows of (x_test, y_test, x_ref, y_ref)")
    n = len(points)
    if n < 4:
        raise EvaluationError(f"need at least 4 correspondences, got {n}")
    src, dst = points[:, :2], points[:, 2:]
    if len(np.unique(src, axis=0)) != n:
        raise EvaluationError("duplicate test points in correspondences")

    T_src, T_dst = _normalizer(src), _normalizer(dst)
    hs = np.column_stack([src, np.ones(n)]) @ T_src.T
    hd = np.column_stack([dst, np.ones(n)]) @ T_dst.T

    if n == 4:
        for pts in (hs, hd):
            for a, b, c in combinations(pts[:, :2], 3):
                if _collinear(a, b, c, 1e-9):
                    raise EvaluationError("degenerate correspondences: three points are collinear")

    x, y = hs[:, 0], hs[:, 1]
    u, v = hd[:, 0], hd[:, 1]
    zero, one = np.zeros(n), np.ones(n)
    A = np.empty((2 * n, 9))
    A[0::2] = np.column_stack([-x, -y, -one, zero, zero, zero, u * x, u * y, u])
    A[1::2] = np.column_stack([zero, zero, zero, -x, -y, -one, v * x, v * y, v])
    _, s, vt = np.linalg.svd(A)
    if s[7] <= _RANK_TOLERANCE * s[0]:
        raise EvaluationError("degenerate correspondences: rank-deficient DLT system")

    H = np.linalg.inv(T_dst) @ vt[-1].reshape(3, 3) @ T_src
    if abs(H[2, 2]) > 1e-15:
        H = H / H[2, 2]
    return H


def warp_to_reference(img: np.ndarray, H: np.ndarray, ref_shape: Tuple[int, int]) -> np.ndarray:
    """Inverse-mapped bilinear warp into a ``ref_shape`` (rows, cols) canvas; outside -> 0."""
    H = np.asarray(H, dtype=np.float64)
    if H.shape != (3, 3) or not np.isfinite(H).all() or abs(np.linalg.det(H)) < 1e-12:
        raise EvaluationError("singular homography")
    rows, cols = ref_shape[:2]
    return cv2.warpPerspective(img, H, (cols, rows), flags=cv2.INTER_LINEAR,
                               borderMode=cv2.BORDER_CONSTANT, borderValue=0)


# ── Metrics ──────────────────────────────────────────────────────────────


def to_gray(img: np.ndarray) -> np.ndarray:
    """BT.601 luma in float64 (no rounding); 2-D input passes through as float."""
    img = np.asarray(img, dtype=np.float64)
    return img if img.ndim == 2 else img[..., :3] @ LUMA_WEIGHTS


def psnr(
    test: np.ndarray,
    ref: np.ndarray,
    mode: Literal["color", "gray"] = "color",
    mask: Optional[np.ndarray] = None,
) -> float:
    """Peak SNR in dB with MSE pooled over all samples; +inf for identical inputs."""
    if test.shape != ref.shape:
        raise EvaluationError(f"image sizes differ: {test.shape} vs {ref.shape}")
    if mode == "gray":
        a, b = to_gray(test), to_gray(ref)
    else:
        a, b = np.asarray(test, dtype=np.float64), np.asarray(ref, dtype=np.float64)
    sq = (a - b) ** 2
    if mask is not None:
        if not mask.any():
            raise EvaluationError("empty evaluation mask")
        sq = sq[mask]
    mse = float(sq.mean())
    if mse == 0.0:
        return float("inf")
    return float(10.0 * np.log10(DATA_RANGE ** 2 / mse))


def _gaussian_window() -> np.ndarray:
    r = np.arange(SSIM_WINDOW) - SSIM_WINDOW // 2
    g = np.exp(-(r ** 2) / (2.0 * SSIM_SIGMA ** 2))
    return g / g.sum()


def _filter(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    return correlate1d(correlate1d(img, g, axis=0, mode="reflect"), g, axis=1, mode="reflect")


def ssim_map(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """SSIM at every window position fully inside the image."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise EvaluationError(f"image sizes differ: {a.shape} vs {b.shape}")
    if a.ndim != 2 or min(a.shape) < SSIM_WINDOW:
        raise EvaluationError(f"SSIM needs 2-D images of at least {SSIM_WINDOW}x{SSIM_WINDOW}")
    g = _gaussian_window()
    c1 = (SSIM_K1 * DATA_RANGE) ** 2
    c2 = (SSIM_K2 * DATA_RANGE) ** 2
    mu_a, mu_b = _filter(a, g), _filter(b, g)
    var_a = _filter(a * a, g) - mu_a * mu_a
    var_b = _filter(b * b, g) - mu_b * mu_b
    cov = _filter(a * b, g) - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    r = SSIM_WINDOW // 2
    return (num / den)[r:-r, r:-r]


def ssim(test_gray: np.ndarray, ref_gray: np.ndarray, mask: Optional[np.ndarray] = None) -> float:
    """Mean SSIM (Gaussian 11x11, sigma 1.5) over valid window positions."""
    values = ssim_map(test_gray, ref_gray)
    if mask is not None:
        r = SSIM_WINDOW // 2
        values = values[mask[r:-r, r:-r]]
        if values.size == 0:
            raise EvaluationError("empty evaluation mask")
    return float(values.mean())


def nonzero_pixels(img: np.ndarray) -> int:
    return int(np.count_nonzero(img.reshape(img.shape[0], img.shape[1], -1).max(axis=-1)))


# ── Report ───────────────────────────────────────────────────────────────


def read_correspondences(path: Path) -> np.ndarray:
    cols = read_csv_columns(path, POINTS_HEADER)
    return np.column_stack([parse_column(cols[name], np.float64, path, name) for name in POINTS_HEADER])


def _as_color(img: np.ndarray) -> np.ndarray:
    return np.repeat(img[..., None], 3, axis=-1) if img.ndim == 2 else img


def compare_images(
    test: np.ndarray,
    ref: np.ndarray,
    sequence: str = "",
    row_type: str = "",
    masked: bool = False,
) -> OrthoReport:
    """Metrics of an already aligned test image against the reference."""
    test, ref = _as_color(test), _as_color(ref)
    mask = test.max(axis=-1) > 0 if masked else None
    return OrthoReport(
        sequence=sequence,
        type=row_type,
        psnr_color_db=psnr(test, ref, "color", mask),
        psnr_gray_db=psnr(test, ref, "gray", mask),
        ssim=ssim(to_gray(test), to_gray(ref), mask),
        nonzero_pixels=nonzero_pixels(test),
        aligned_width=ref.shape[1],
        aligned_height=ref.shape[0],
        masked=masked,
    )


def evaluate_orthomap(
    test_path: Path,
    ref_path: Path,
    correspondences_path: Optional[Path],
    sequence: str = "",
    row_type: str = "",
    masked: bool = False,
) -> OrthoReport:
    """Homography -> warp -> metrics. Missing correspondences give a failed row."""
    if correspondences_path is None or not Path(correspondences_path).is_file():
        logger.warning("no correspondences for %s; reporting reconstruction failure", test_path)
        return OrthoReport(sequence=sequence, type=row_type, status="failed", masked=masked)
    points = read_correspondences(correspondences_path)
    if len(points) == 0:
        logger.warning("empty correspondences for %s; reporting reconstruction failure", test_path)
        return OrthoReport(sequence=sequence, type=row_type, status="failed", masked=masked)

    test = _as_color(read_image(test_path))
    ref = _as_color(read_image(ref_path))
    H = estimate_homography(points)
    aligned = warp_to_reference(test, H, ref.shape[:2])
    report = compare_images(aligned, ref, sequence, row_type, masked)
    logger.info("Evaluated %s: PSNR %.2f dB, SSIM %.3f", test_path, report.psnr_color_db, report.ssim)
    return report
