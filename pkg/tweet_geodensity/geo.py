"""
Geodesic distance on the WGS-84 ellipsoid

Vincenty's inverse formula; near-antipodal pairs where the lambda
iteration does not settle fall back to the spherical haversine distance and
are flagged.
"""

from math import atan, atan2, cos, radians, sin, sqrt, tan, asin
from typing import NamedTuple

from .data_models import GeoPoint

WGS84_A_KM = 6378.137
WGS84_F = 1.0 / 298.257223563
WGS84_B_KM = (1.0 - WGS84_F) * WGS84_A_KM
MEAN_EARTH_RADIUS_KM = 6371.0088

LAMBDA_TOLERANCE = 1e-12  # radians, roughly 0.06 mm
MAX_ITERATIONS = 200


class GeodesicResult(NamedTuple):
    distance_km: float
    converged: bool  # False -> haversine fallback was used


def haversine_distance(a: GeoPoint, b: GeoPoint) -> float:
    """Great-circle distance on a sphere of mean Earth radius"""
    phi1, phi2 = radians(a.lat), radians(b.lat)
    dphi = phi2 - phi1
    dlmb = radians(b.lon - a.lon)
    h = sin(dphi / 2.0) ** 2 + cos(phi1) * cos(phi2) * sin(dlmb / 2.0) ** 2
    return 2.0 * MEAN_EARTH_RADIUS_KM * asin(min(1.0, sqrt(h)))


def vincenty_inverse(a: GeoPoint, b: GeoPoint) -> GeodesicResult:
    """Ellipsoidal distance between two points, symmetric by construction"""
    if not isinstance(a, GeoPoint) or not isinstance(b, GeoPoint):
        a, b = GeoPoint(*a), GeoPoint(*b)
    if a == b:
        return GeodesicResult(0.0, True)
    # Canonical argument order makes d(a, b) and d(b, a) bitwise equal
    if a.as_tuple() > b.as_tuple():
        a, b = b, a

    f = WGS84_F
    u1 = atan((1.0 - f) * tan(radians(a.lat)))
    u2 = atan((1.0 - f) * tan(radians(b.lat)))
    big_l = radians(b.lon - a.lon)
    sin_u1, cos_u1 = sin(u1), cos(u1)
    sin_u2, cos_u2 = sin(u2), cos(u2)

    lmbda = big_l
    converged = False
    for _ in range(MAX_ITERATIONS):
        sin_l, cos_l = sin(lmbda), cos(lmbda)
        sin_sigma = sqrt((cos_u2 * sin_l) ** 2 + (cos_u1 * sin_u2 - sin_u1 * cos_u2 * cos_l) ** 2)
        if sin_sigma == 0.0:
            return GeodesicResult(0.0, True)  # coincident after reduction
        cos_sigma = sin_u1 * sin_u2 + cos_u1 * cos_u2 * cos_l
        sigma = atan2(sin_sigma, cos_sigma)
        sin_alpha = cos_u1 * cos_u2 * sin_l / sin_sigma
        cossq_alpha = 1.0 - sin_alpha ** 2
        # Equatorial line: cos^2(alpha) = 0
        cos2sigma_m = cos_sigma - 2.0 * sin_u1 * sin_u2 / cossq_alpha if cossq_alpha != 0.0 else 0.0
        c = f / 16.0 * cossq_alpha * (4.0 + f * (4.0 - 3.0 * cossq_alpha))
        previous = lmbda
        lmbda = big_l + (1.0 - c) * f * sin_alpha * (
            sigma + c * sin_sigma * (cos2sigma_m + c * cos_sigma * (-1.0 + 2.0 * cos2sigma_m ** 2)))
        if abs(lmbda - previous) < LAMBDA_TOLERANCE:
            converged = True
            break

    if not converged:
        return GeodesicResult(haversine_distance(a, b), False)

    usq = cossq_alpha * (WGS84_A_KM ** 2 - WGS84_B_KM ** 2) / WGS84_B_KM ** 2
    big_a = 1.0 + usq / 16384.0 * (4096.0 + usq * (-768.0 + usq * (320.0 - 175.0 * usq)))
    big_b = usq / 1024.0 * (256.0 + usq * (-128.0 + usq * (74.0 - 47.0 * usq)))
    delta_sigma = big_b * sin_sigma * (cos2sigma_m + 0.25 * big_b * (
        cos_sigma * (-1.0 + 2.0 * cos2sigma_m ** 2)
        - big_b / 6.0 * cos2sigma_m * (-3.0 + 4.0 * sin_sigma ** 2) * (-3.0 + 4.0 * cos2sigma_m ** 2)))
    return GeodesicResult(WGS84_B_KM * big_a * (sigma - delta_sigma), True)


def vincenty_distance(a: GeoPoint, b: GeoPoint) -> float:
    """Distance in kilometres (haversine when Vincenty does not converge)"""
    return vincenty_inverse(a, b).distance_km
