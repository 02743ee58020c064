# evortho - Orthoexport Service

# Packages fused keyframes with geotags for external orthomosaic tools
# (geo.csv, ODM geo.txt, odm_params.txt) and composites a flat-ground
# orthomosaic so the pipeline closes the loop without external software.

import logging
import shutil
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import cv2
import numpy as np

from ..common import ExportError, format_key_value_text
from ..models.recording import FrameRecord, Recording
from ..models.schemas import FIX_CODES, CameraCalibration, GeotaggedImage, UtmPoint
from ..utils.camera import in_bounds, pixel_rays, project, quat_to_matrix
from ..utils.csvio import write_csv_columns
from ..utils.geodesy import latlon_to_utm_arrays
from ..utils.imaging import read_image, read_world_file, write_image, write_world_file

logger = logging.getLogger(__name__)

GEO_HEADER = ("filename", "lat_deg", "lon_deg", "alt_m")
POINTS_HEADER = ("x_test", "y_test", "x_ref", "y_ref")
ODM_PARAMS = {"mesh-octree-depth": 13, "min-num-features": 12000}

# Rows of ortho cells projected per pass, bounds temporary memory.
_TILE_ROWS = 256


def _valid_fixes(gnss: np.ndarray) -> np.ndarray:
    fixes = gnss[gnss["fix"] != FIX_CODES["none"]]
    if len(fixes) == 0:
        raise ExportError("no valid GNSS fixes")
    return fixes


def interpolate_fixes(gnss: np.ndarray, t_ns: Sequence[int]) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Linear (lat, lon, alt) at each time; times outside the fix span are rejected."""
    fixes = _valid_fixes(gnss)
    t = np.asarray(t_ns, dtype=np.int64)
    lo, hi = int(fixes["t"][0]), int(fixes["t"][-1])
    outside = np.flatnonzero((t < lo) | (t > hi))
    if outside.size:
        raise ExportError(
            f"keyframe at t={int(t[outside[0]])} ns outside the GNSS span [{lo}, {hi}]"
        )
    ft = fixes["t"].astype(np.float64)
    tf = t.astype(np.float64)
    return (np.interp(tf, ft, fixes["lat"]), np.interp(tf, ft, fixes["lon"]),
            np.interp(tf, ft, fixes["alt"]))


# ── Geotagged export ─────────────────────────────────────────────────────


def export_geotagged(
    frames: List[FrameRecord],
    image_dir: Path,
    gnss: np.ndarray,
    out_dir: Path,
    resolution_m: float = 0.01,
) -> List[GeotaggedImage]:
    """Write images, ``geo.csv``, ODM ``geo.txt`` and ``odm_params.txt``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lat, lon, alt = interpolate_fixes(gnss, [f.t_ns for f in frames])

    tagged = []
    for i, frame in enumerate(frames):
        src = Path(image_dir) / frame.filename
        dst = out_dir / frame.filename
        if not src.is_file():
            raise ExportError(f"missing image {src}")
        if src.resolve() != dst.resolve():
            shutil.copyfile(src, dst)
        tagged.append(GeotaggedImage(
            filename=frame.filename, lat_deg=float(lat[i]), lon_deg=float(lon[i]),
            alt_m=float(alt[i]), t_ns=frame.t_ns, keyframe_index=i,
        ))

    write_csv_columns(out_dir / "geo.csv", GEO_HEADER, [
        np.array([g.filename for g in tagged], dtype=str), lat, lon, alt,
    ])
    rows = ["EPSG:4326\n"] + [f"{g.filename} {g.lon_deg!r} {g.lat_deg!r} {g.alt_m!r}\n" for g in tagged]
    (out_dir / "geo.txt").write_text("".join(rows))
    params = {"orthophoto-resolution": f"{resolution_m * 100:g}", **ODM_PARAMS}
    (out_dir / "odm_params.txt").write_text(format_key_value_text(params))
    logger.info("Exported %d geotagged images to %s", len(tagged), out_dir)
    return tagged


# ── Planar orthoprojection ──────────────────────────────────────────────


@dataclass(frozen=True)
class CameraPose:
    """Camera centre in UTM metres (altitude MSL) and camera-to-world (ENU) rotation."""

    east: float
    north: float
    alt: float
    rotation: np.ndarray


@dataclass
class OrthoRaster:
    """Weighted accumulation on a north-up grid.

    ``origin`` is the centre of the top-left cell; cell (i, j) is at
    (origin.easting + j * res, origin.northing - i * res).
    """

    accum: np.ndarray
    weight: np.ndarray
    origin: UtmPoint
    resolution_m: float

    @property
    def shape(self) -> Tuple[int, int]:
        return self.weight.shape

    def image(self) -> np.ndarray:
        """8-bit mosaic; zero-weight cells are exactly 0."""
        covered = self.weight > 0
        out = np.zeros(self.accum.shape, dtype=np.float64)
        out[covered] = self.accum[covered] / self.weight[covered, None]
        img = np.rint(np.clip(out, 0.0, 255.0)).astype(np.uint8)
        return img[..., 0] if img.shape[2] == 1 else img

    def write(self, path: Path) -> None:
        path = Path(path)
        write_image(path, self.image())
        write_world_file(path.with_suffix(".wld"), self.resolution_m,
                         self.origin.easting, self.origin.northing)


def coverage_mask(raster: OrthoRaster) -> Tuple[np.ndarray, int]:
    mask = raster.weight > 0
    return mask, int(mask.sum())


def _footprint(pose: CameraPose, calib: CameraCalibration, ground_alt: float) -> Optional[np.ndarray]:
    """Ground (east, north) of the border pixels, or None if a border ray misses the ground."""
    rays = pixel_rays(calib)
    border = np.concatenate([rays[0], rays[-1], rays[:, 0], rays[:, -1]])
    world = border @ pose.rotation.T
    if np.any(world[:, 2] >= 0):
        return None
    scale = (ground_alt - pose.alt) / world[:, 2]
    return np.column_stack([pose.east + scale * world[:, 0], pose.north + scale * world[:, 1]])


def _project_image(img, pose, calib, ground_alt, grid, rows, cols):
    """Bilinear samples and cos^4 nadir weights for the grid cells of one image."""
    origin_e, origin_n, res = grid
    east = origin_e + np.arange(cols[0], cols[1]) * res
    samples = []
    for r0 in range(rows[0], rows[1], _TILE_ROWS):
        r1 = min(r0 + _TILE_ROWS, rows[1])
        north = origin_n - np.arange(r0, r1) * res
        E, N = np.meshgrid(east, north)
        rel = np.stack([E - pose.east, N - pose.north, np.full_like(E, ground_alt - pose.alt)], axis=-1)
        cam = rel @ pose.rotation
        u, v, front = project(calib, cam)
        ok = front & in_bounds(calib, u, v)
        map_x = np.where(ok, u, -1.0).astype(np.float32)
        map_y = np.where(ok, v, -1.0).astype(np.float32)
        sample = cv2.remap(img, map_x, map_y, interpolation=cv2.INTER_LINEAR,
                           borderMode=cv2.BORDER_CONSTANT, borderValue=0)
        if sample.ndim == 2:
            sample = sample[..., None]
        cos = np.abs(rel[..., 2]) / np.linalg.norm(rel, axis=-1)
        weight = np.where(ok, cos ** 4, 0.0)
        samples.append((r0, r1, sample.astype(np.float64), weight))
    return samples


def planar_orthoproject(
    images: Sequence[Tuple[str, int, np.ndarray, CameraPose]],
    calib: CameraCalibration,
    ground_alt: float,
    resolution_m: float = 0.01,
    zone: int = 18,
    southern: bool = False,
    extent: Optional[Tuple[float, float, float, float]] = None,
    workers: int = 1,
) -> OrthoRaster:
    """Composite ``(filename, t_ns, image, pose)`` onto the plane z = ground_alt.

    Images are accumulated in (t_ns, filename) order in float64, so any input
    permutation gives a bit-identical raster. ``extent`` is (e_min, n_min,
    e_max, n_max); by default the union of all footprints.
    """
    images = sorted(images, key=lambda item: (item[1], item[0]))
    footprints = []
    for name, _, img, pose in images:
        if img.shape[:2] != (calib.height, calib.width):
            raise ExportError(f"{name}: image size {img.shape[1]}x{img.shape[0]} does not match calibration")
        if pose.alt <= ground_alt:
            raise ExportError(f"{name}: camera at or below the ground plane")
        footprints.append(_footprint(pose, calib, ground_alt))

    hits = [fp for fp in footprints if fp is not None]
    if extent is None:
        if not hits:
            raise ExportError("no image intersects the ground plane")
        pts = np.vstack(hits)
        extent = (pts[:, 0].min(), pts[:, 1].min(), pts[:, 0].max(), pts[:, 1].max())
    e_min, n_min, e_max, n_max = extent
    res = resolution_m
    origin_e = np.floor(e_min / res) * res
    origin_n = np.ceil(n_max / res) * res
    width = int(np.floor((e_max - origin_e) / res)) + 1
    height = int(np.floor((origin_n - n_min) / res)) + 1
    channels = images[0][2].shape[2] if images and images[0][2].ndim == 3 else 1

    accum = np.zeros((height, width, channels), dtype=np.float64)
    weight = np.zeros((height, width), dtype=np.float64)
    grid = (origin_e, origin_n, res)

    jobs = []
    for (name, _, img, pose), fp in zip(images, footprints):
        if fp is None:
            continue
        cols = (max(0, int(np.floor((fp[:, 0].min() - origin_e) / res))),
                min(width, int(np.ceil((fp[:, 0].max() - origin_e) / res)) + 1))
        rows = (max(0, int(np.floor((origin_n - fp[:, 1].max()) / res))),
                min(height, int(np.ceil((origin_n - fp[:, 1].min()) / res)) + 1))
        if cols[0] < cols[1] and rows[0] < rows[1]:
            jobs.append((img, pose, rows, cols))
    if not jobs:
        raise ExportError("no image intersects the requested extent")

    def run(job):
        img, pose, rows, cols = job
        return cols, _project_image(img, pose, calib, ground_alt, grid, rows, cols)

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        for start in range(0, len(jobs), max(1, workers)):
            # map keeps job order, so accumulation order is fixed
            for cols, tiles in pool.map(run, jobs[start:start + max(1, workers)]):
                for r0, r1, sample, w in tiles:
                    accum[r0:r1, cols[0]:cols[1]] += sample * w[..., None]
                    weight[r0:r1, cols[0]:cols[1]] += w

    origin = UtmPoint(easting=float(origin_e), northing=float(origin_n), zone=zone,
                      hemisphere="S" if southern else "N", altitude=float(ground_alt))
    raster = OrthoRaster(accum, weight, origin, res)
    logger.info("Orthoprojected %d images onto %dx%d cells at %.3f m", len(jobs), width, height, res)
    return raster


# ── Poses and ground ────────────────────────────────────────────────────


def estimate_ground_altitude(gnss: np.ndarray, rng: np.ndarray) -> float:
    """median(GNSS altitude - range) with range interpolated at the fix times."""
    fixes = _valid_fixes(gnss)
    ok = ~np.isnan(rng["range"])
    if not ok.any():
        raise ExportError("no valid range samples to estimate the ground altitude")
    rt = rng["t"][ok]
    inside = (fixes["t"] >= rt[0]) & (fixes["t"] <= rt[-1])
    if not inside.any():
        raise ExportError("GNSS and range streams do not overlap in time")
    fixes = fixes[inside]
    r = np.interp(fixes["t"].astype(np.float64), rt.astype(np.float64), rng["range"][ok])
    return float(np.median(fixes["alt"] - r))


def camera_poses(rec: Recording, t_ns: Sequence[int], calib: CameraCalibration) -> Tuple[List[CameraPose], int, bool]:
    """Poses from interpolated GNSS and the nearest IMU attitude; plus the UTM zone used."""
    if len(rec.imu) == 0:
        raise ExportError("no IMU samples for camera attitude")
    lat, lon, alt = interpolate_fixes(rec.gnss, t_ns)
    fixes = _valid_fixes(rec.gnss)
    _, _, zone, southern = latlon_to_utm_arrays(fixes["lat"][:1], fixes["lon"][:1])
    east, north, _, _ = latlon_to_utm_arrays(lat, lon, zone, southern)
    imu_t = rec.imu["t"]
    t = np.asarray(t_ns, dtype=np.int64)
    idx = np.searchsorted(imu_t, t)
    left = np.clip(idx - 1, 0, len(imu_t) - 1)
    right = np.clip(idx, 0, len(imu_t) - 1)
    nearest = np.where(np.abs(imu_t[left] - t) <= np.abs(imu_t[right] - t), left, right)
    q = rec.imu[nearest]
    R_wb = quat_to_matrix(q["qw"], q["qx"], q["qy"], q["qz"])
    R_bc = calib.rotation
    poses = [CameraPose(float(east[i]), float(north[i]), float(alt[i]), R_wb[i] @ R_bc)
             for i in range(len(east))]
    return poses, zone, southern


def orthoproject_frames(
    rec: Recording,
    frames: List[FrameRecord],
    image_dir: Path,
    resolution_m: float,
    ground_alt: Optional[float] = None,
    workers: int = 1,
) -> OrthoRaster:
    if ground_alt is None:
        ground_alt = estimate_ground_altitude(rec.gnss, rec.range)
    poses, zone, southern = camera_poses(rec, [f.t_ns for f in frames], rec.calib_event)
    images = [
        (f.filename, f.t_ns, read_image(Path(image_dir) / f.filename), pose)
        for f, pose in zip(frames, poses)
    ]
    return planar_orthoproject(images, rec.calib_event, ground_alt, resolution_m,
                               zone=zone, southern=southern, workers=workers)


# ── Ground-truth correspondences ────────────────────────────────────────


def truth_correspondences(
    ortho_wld: Path,
    mask: np.ndarray,
    truth_wld: Path,
    truth_shape: Tuple[int, int],
) -> np.ndarray:
    """Five reference points (4 inner corners + centre of the covered area)
    as ``x_test, y_test, x_ref, y_ref`` rows, mapped through both world files."""
    rows, cols = np.nonzero(mask)
    if rows.size == 0:
        raise ExportError("orthomosaic has no covered pixels")
    r0, r1 = np.percentile(rows, [15, 85])
    c0, c1 = np.percentile(cols, [15, 85])
    test = np.array([[c0, r0], [c1, r0], [c1, r1], [c0, r1], [(c0 + 3 * c1) / 4, (r0 + r1) / 2]])

    px, py, e0, n0 = read_world_file(ortho_wld)
    east = e0 + test[:, 0] * px
    north = n0 - test[:, 1] * py
    tx, ty, te, tn = read_world_file(truth_wld)
    ref = np.column_stack([(east - te) / tx, (tn - north) / ty])
    h, w = truth_shape
    if np.any((ref[:, 0] < 0) | (ref[:, 0] > w - 1) | (ref[:, 1] < 0) | (ref[:, 1] > h - 1)):
        raise ExportError("covered area extends beyond the truth texture")
    return np.column_stack([test, ref])


def write_correspondences(path: Path, points: np.ndarray) -> None:
    write_csv_columns(path, POINTS_HEADER, [points[:, i] for i in range(4)])
