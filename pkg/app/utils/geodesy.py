"""
WGS-84 <-> UTM conversion.

Krüger's series for the transverse Mercator projection, carried to sixth
order in the third flattening n, which keeps the error well under a
millimetre anywhere in a UTM zone. Functions accept scalars or numpy arrays.

Zone numbers use the regular 6° grid; the Norway/Svalbard exceptions are
not applied.
"""

from typing import Optional, Tuple

import numpy as np

from ..common import PipelineError
from ..models.schemas import UtmPoint

WGS84_A = 6_378_137.0
WGS84_F = 1.0 / 298.257223563

K0 = 0.9996
FALSE_EASTING = 500_000.0
FALSE_NORTHING_SOUTH = 10_000_000.0
MAX_LATITUDE = 84.0


class OutOfRangeError(PipelineError):
    pass


_n = WGS84_F / (2.0 - WGS84_F)
_E = 2.0 * np.sqrt(_n) / (1.0 + _n)  # first eccentricity
_A = WGS84_A / (1.0 + _n) * (1.0 + _n**2 / 4.0 + _n**4 / 64.0 + _n**6 / 256.0)

_ALPHA = np.array([
    _n / 2 - 2 * _n**2 / 3 + 5 * _n**3 / 16 + 41 * _n**4 / 180 - 127 * _n**5 / 288
    + 7891 * _n**6 / 37800,
    13 * _n**2 / 48 - 3 * _n**3 / 5 + 557 * _n**4 / 1440 + 281 * _n**5 / 630
    - 1983433 * _n**6 / 1935360,
    61 * _n**3 / 240 - 103 * _n**4 / 140 + 15061 * _n**5 / 26880 + 167603 * _n**6 / 181440,
    49561 * _n**4 / 161280 - 179 * _n**5 / 168 + 6601661 * _n**6 / 7257600,
    34729 * _n**5 / 80640 - 3418889 * _n**6 / 1995840,
    212378941 * _n**6 / 319334400,
])

_BETA = np.array([
    _n / 2 - 2 * _n**2 / 3 + 37 * _n**3 / 96 - _n**4 / 360 - 81 * _n**5 / 512
    + 96199 * _n**6 / 604800,
    _n**2 / 48 + _n**3 / 15 - 437 * _n**4 / 1440 + 46 * _n**5 / 105 - 1118711 * _n**6 / 3870720,
    17 * _n**3 / 480 - 37 * _n**4 / 840 - 209 * _n**5 / 4480 + 5569 * _n**6 / 90720,
    4397 * _n**4 / 161280 - 11 * _n**5 / 504 - 830251 * _n**6 / 7257600,
    4583 * _n**5 / 161280 - 108847 * _n**6 / 3991680,
    20648693 * _n**6 / 638668800,
])

_J2 = 2.0 * np.arange(1, 7)


def zone_for_longitude(lon) -> np.ndarray:
    zone = np.floor((np.asarray(lon, dtype=float) + 180.0) / 6.0).astype(int) + 1
    return np.clip(zone, 1, 60)


def central_meridian(zone: int) -> float:
    return (zone - 1) * 6.0 - 180.0 + 3.0


def latlon_to_utm_arrays(
    lat,
    lon,
    zone: Optional[int] = None,
    southern: Optional[bool] = None,
) -> Tuple[np.ndarray, np.ndarray, int, bool]:
    """Project arrays of WGS-84 coordinates into one UTM zone.

    ``zone`` and ``southern`` default to those of the first point, so a
    track crossing a zone boundary stays in one metric frame.
    """
    lat = np.atleast_1d(np.asarray(lat, dtype=float))
    lon = np.atleast_1d(np.asarray(lon, dtype=float))
    if np.any(np.abs(lat) > MAX_LATITUDE):
        bad = float(lat[np.argmax(np.abs(lat))])
        raise OutOfRangeError(f"latitude {bad} outside the UTM domain (|lat| <= {MAX_LATITUDE})")
    if np.any(np.abs(lon) > 180.0):
        raise OutOfRangeError("longitude outside [-180, 180]")
    if zone is None:
        zone = int(zone_for_longitude(lon[0]))
    if southern is None:
        southern = bool(lat[0] < 0)

    phi = np.radians(lat)
    dlam = np.radians(lon - central_meridian(zone))
    dlam = (dlam + np.pi) % (2 * np.pi) - np.pi

    sin_phi = np.sin(phi)
    t = np.sinh(np.arctanh(sin_phi) - _E * np.arctanh(_E * sin_phi))
    xi = np.arctan2(t, np.cos(dlam))
    eta = np.arctanh(np.sin(dlam) / np.sqrt(1.0 + t * t))

    jx = _J2[:, None] * xi[None, :]
    je = _J2[:, None] * eta[None, :]
    easting = FALSE_EASTING + K0 * _A * (eta + (_ALPHA[:, None] * np.cos(jx) * np.sinh(je)).sum(0))
    northing = K0 * _A * (xi + (_ALPHA[:, None] * np.sin(jx) * np.cosh(je)).sum(0))
    if southern:
        northing = northing + FALSE_NORTHING_SOUTH
    return easting, northing, zone, southern


def utm_to_latlon_arrays(easting, northing, zone: int, southern: bool = False) -> Tuple[np.ndarray, np.ndarray]:
    """Inverse projection; returns (lat_deg, lon_deg) arrays."""
    easting = np.atleast_1d(np.asarray(easting, dtype=float))
    northing = np.atleast_1d(np.asarray(northing, dtype=float))
    if southern:
        northing = northing - FALSE_NORTHING_SOUTH

    xi = northing / (K0 * _A)
    eta = (easting - FALSE_EASTING) / (K0 * _A)
    jx = _J2[:, None] * xi[None, :]
    je = _J2[:, None] * eta[None, :]
    xi_p = xi - (_BETA[:, None] * np.sin(jx) * np.cosh(je)).sum(0)
    eta_p = eta - (_BETA[:, None] * np.cos(jx) * np.sinh(je)).sum(0)

    chi = np.arcsin(np.sin(xi_p) / np.cosh(eta_p))
    # Conformal -> geodetic latitude; contracts by ~e^2 per pass.
    psi = np.arctanh(np.sin(chi))
    phi = chi
    for _ in range(8):
        phi = np.arcsin(np.tanh(psi + _E * np.arctanh(_E * np.sin(phi))))

    lam = np.arctan2(np.sinh(eta_p), np.cos(xi_p))
    return np.degrees(phi), central_meridian(zone) + np.degrees(lam)


def latlon_to_utm(lat: float, lon: float, altitude: float = 0.0) -> UtmPoint:
    """Single point in its own zone."""
    e, n, zone, southern = latlon_to_utm_arrays(lat, lon)
    return UtmPoint(
        easting=float(e[0]),
        northing=float(n[0]),
        zone=zone,
        hemisphere="S" if southern else "N",
        altitude=altitude,
    )


def utm_to_latlon(point: UtmPoint) -> Tuple[float, float]:
    lat, lon = utm_to_latlon_arrays(point.easting, point.northing, point.zone, point.hemisphere == "S")
    return float(lat[0]), float(lon[0])
