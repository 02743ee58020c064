"""
UTM projection and camera geometry helpers.

The Transverse Mercator series is checked against pyproj when it is
installed; the remaining cases use closed-form expectations.
"""

import numpy as np
import pytest

from app.common import PipelineError
from app.utils.camera import matrix_to_quat, nadir_rotation, pixel_rays, project, quat_to_matrix
from app.utils.geodesy import (
    OutOfRangeError,
    latlon_to_utm,
    latlon_to_utm_arrays,
    utm_to_latlon,
    utm_to_latlon_arrays,
)


# ── UTM ────────────────────────────────────────────────────────────────


def test_central_meridian_on_the_equator():
    point = latlon_to_utm(0.0, 3.0)
    assert point.zone == 31
    assert point.hemisphere == "N"
    assert point.easting == pytest.approx(500_000.0, abs=1e-6)
    assert point.northing == pytest.approx(0.0, abs=1e-6)


def test_matches_pyproj():
    pyproj = pytest.importorskip("pyproj")
    transformer = pyproj.Transformer.from_crs("EPSG:4326", "EPSG:32618", always_xy=True)
    expected_e, expected_n = transformer.transform(-75.1990, 39.9522)

    point = latlon_to_utm(39.9522, -75.1990)

    assert point.zone == 18
    assert point.easting == pytest.approx(expected_e, abs=0.01)
    assert point.northing == pytest.approx(expected_n, abs=0.01)


def test_southern_hemisphere_uses_false_northing():
    pyproj = pytest.importorskip("pyproj")
    transformer = pyproj.Transformer.from_crs("EPSG:4326", "EPSG:32756", always_xy=True)
    expected_e, expected_n = transformer.transform(151.2093, -33.8688)

    point = latlon_to_utm(-33.8688, 151.2093)

    assert (point.zone, point.hemisphere) == (56, "S")
    assert point.easting == pytest.approx(expected_e, abs=0.01)
    assert point.northing == pytest.approx(expected_n, abs=0.01)


def test_random_points_match_pyproj_to_a_centimetre():
    pyproj = pytest.importorskip("pyproj")
    rng = np.random.default_rng(11)
    lat = rng.uniform(-60.0, 60.0, 100)
    lon = rng.uniform(-180.0, 180.0, 100)

    for la, lo in zip(lat, lon):
        point = latlon_to_utm(float(la), float(lo))
        code = (32600 if point.hemisphere == "N" else 32700) + point.zone
        transformer = pyproj.Transformer.from_crs("EPSG:4326", f"EPSG:{code}", always_xy=True)
        expected_e, expected_n = transformer.transform(lo, la)
        assert abs(point.easting - expected_e) <= 0.01
        assert abs(point.northing - expected_n) <= 0.01


def test_meridian_arc_of_a_thousandth_degree():
    e, n, _, _ = latlon_to_utm_arrays([40.0, 40.001], [-75.0, -75.0])
    assert n[1] - n[0] == pytest.approx(111.0, abs=0.2)


def test_scale_near_the_central_meridian():
    # 0.01 deg of longitude on the equator is 1113.19 m on the ellipsoid.
    e, _, _, _ = latlon_to_utm_arrays([0.0, 0.0], [2.995, 3.005])
    assert (e[1] - e[0]) / 1113.1949 == pytest.approx(0.9996, abs=4e-4)


def test_inverse_round_trip_is_submillimetre():
    rng = np.random.default_rng(4)
    lat = rng.uniform(-80.0, 80.0, 200)
    lon = rng.uniform(-2.9, 2.9, 200) + 9.0  # zone 32
    for southern in (False, True):
        sel = (lat < 0) == southern
        e, n, zone, _ = latlon_to_utm_arrays(lat[sel], lon[sel], zone=32, southern=southern)
        back_lat, back_lon = utm_to_latlon_arrays(e, n, zone, southern)
        assert np.max(np.abs(back_lat - lat[sel])) < 1e-8
        assert np.max(np.abs(back_lon - lon[sel])) < 1e-8


def test_single_point_round_trip():
    point = latlon_to_utm(39.9522, -75.1990, altitude=60.0)
    lat, lon = utm_to_latlon(point)
    assert (lat, lon) == (pytest.approx(39.9522, abs=1e-9), pytest.approx(-75.1990, abs=1e-9))
    assert point.altitude == 60.0


def test_track_stays_in_the_first_zone():
    _, _, zone, _ = latlon_to_utm_arrays([45.0, 45.0], [5.999, 6.001])
    assert zone == 31


@pytest.mark.parametrize("lat", [84.5, -85.0])
def test_polar_latitude_is_rejected(lat):
    with pytest.raises(OutOfRangeError, match="outside the UTM domain"):
        latlon_to_utm(lat, 0.0)


def test_out_of_range_is_a_pipeline_error():
    assert issubclass(OutOfRangeError, PipelineError)
    with pytest.raises(PipelineError):
        latlon_to_utm_arrays([0.0], [181.0])


# ── Camera geometry ────────────────────────────────────────────────────


def test_nadir_camera_looks_down_with_image_up_along_heading():
    R = nadir_rotation(np.array([0.0]))[0]
    # Optical axis (camera +z) points at the ground.
    assert np.allclose(R @ [0.0, 0.0, 1.0], [0.0, 0.0, -1.0])
    # Image up (camera -y) points along the heading (east at heading 0).
    assert np.allclose(R @ [0.0, -1.0, 0.0], [1.0, 0.0, 0.0])
    assert np.linalg.det(R) == pytest.approx(1.0)


def test_quaternion_round_trip():
    R = nadir_rotation(np.linspace(-3.0, 3.0, 7))
    q = matrix_to_quat(R)
    back = quat_to_matrix(q[:, 0], q[:, 1], q[:, 2], q[:, 3])
    assert np.allclose(back, R, atol=1e-12)
    assert np.allclose(np.linalg.norm(q, axis=1), 1.0)
    assert np.all(q[:, 0] >= 0)


def test_rays_project_back_to_their_pixels(tiny_calib):
    rays = pixel_rays(tiny_calib)
    u, v, front = project(tiny_calib, rays.reshape(-1, 3) * 7.5)

    assert front.all()
    rows, cols = np.mgrid[0:tiny_calib.height, 0:tiny_calib.width]
    assert np.allclose(u, cols.ravel())
    assert np.allclose(v, rows.ravel())
