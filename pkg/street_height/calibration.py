"""
Street Height Estimation - Camera calibration
Analytical camera position from two matched building corners, the GPS fallback
rule and multi-sample aggregation
"""

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DegenerateGeometryError, EmptyInputError
from .geometry import CameraPose, Point2D, WorldPoint, camera_coordinates

DEGENERACY_TOLERANCE = 1e-9
DEFAULT_ACCEPTANCE_RADIUS_M = 3.0


@dataclass(frozen=True)
class CornerObservation:
    """A footprint corner and the signed bearing of its sight-line (left negative)"""
    world: Point2D
    bearing: float

    def __post_init__(self):
        if not abs(self.bearing) < math.pi / 2:
            raise ValueError(f"bearing must lie in the frontal hemisphere, got {self.bearing}")


@dataclass(frozen=True)
class CalibrationResult:
    position: Point2D
    displacement: float
    accepted: bool


def bearing_from_pixel(pose: CameraPose, u: float) -> float:
    return math.atan(u / pose.focal_length)


def bearing_to(pose: CameraPose, corner: Point2D) -> float:
    """Bearing of a ground point seen from pose, independent of pitch"""
    x_c, _, depth = camera_coordinates(pose.leveled(), WorldPoint(corner[0], corner[1], 0.0))
    return math.atan2(x_c, depth)


def calibrate_two_corners(c1: CornerObservation, c2: CornerObservation, heading: float) -> Point2D:
    """Recover the camera position from two corners with known bearings.

    Works in a frame with corner 1 at the origin and the camera heading as +y.
    With corner 2 at (x, y) in that frame, the camera sits y' behind corner 1
    and -y'*tan(theta1) to its right, where
    y' = (x - y*tan(theta2)) / (tan(theta2) - tan(theta1)).

    Raises:
        DegenerateGeometryError: the two sight-lines are parallel or the
            corners coincide.
    """
    right = (math.cos(heading), -math.sin(heading))
    forward = (math.sin(heading), math.cos(heading))
    rel_x = c2.world[0] - c1.world[0]
    rel_y = c2.world[1] - c1.world[1]
    if rel_x == 0.0 and rel_y == 0.0:
        raise DegenerateGeometryError("reference corners coincide")

    x = rel_x * right[0] + rel_y * right[1]
    y = rel_x * forward[0] + rel_y * forward[1]
    tan1, tan2 = math.tan(c1.bearing), math.tan(c2.bearing)
    denominator = tan2 - tan1
    if abs(denominator) < DEGENERACY_TOLERANCE:
        raise DegenerateGeometryError(
            f"sight-lines are parallel (bearings {c1.bearing:.6g}, {c2.bearing:.6g})"
        )

    depth = (x - y * tan2) / denominator
    lateral = -depth * tan1
    return (
        c1.world[0] + lateral * right[0] - depth * forward[0],
        c1.world[1] + lateral * right[1] - depth * forward[1],
    )


def _shifted(c: CornerObservation, pixels: float, focal_length: float) -> CornerObservation:
    return CornerObservation(c.world, math.atan(math.tan(c.bearing) + pixels / focal_length))


def calibration_resolution(c1: CornerObservation, c2: CornerObservation, heading: float,
                           focal_length: float, pixels: float = 0.5) -> float:
    """Largest position change from moving either corner's pixel by up to `pixels`.

    Corners are observed at whole-pixel positions, so a computed position
    closer than this to another one cannot be told apart from it.

    Raises:
        DegenerateGeometryError: the unperturbed corners are degenerate.
    """
    base = calibrate_two_corners(c1, c2, heading)
    spread = 0.0
    for s1 in (-pixels, pixels):
        for s2 in (-pixels, pixels):
            try:
                moved = calibrate_two_corners(_shifted(c1, s1, focal_length), _shifted(c2, s2, focal_length), heading)
            except DegenerateGeometryError:
                return math.inf
            spread = max(spread, math.hypot(moved[0] - base[0], moved[1] - base[1]))
    return spread


def accept_calibration(computed: Point2D, gps_prior: Point2D,
                       threshold: float = DEFAULT_ACCEPTANCE_RADIUS_M) -> CalibrationResult:
    """Keep the computed position only when it lies within threshold of the GPS prior"""
    displacement = math.hypot(computed[0] - gps_prior[0], computed[1] - gps_prior[1])
    if displacement < threshold:
        return CalibrationResult((float(computed[0]), float(computed[1])), displacement, True)
    return CalibrationResult((float(gps_prior[0]), float(gps_prior[1])), displacement, False)


def multi_sample_height(estimates: Sequence[float]) -> float:
    if len(estimates) == 0:
        raise EmptyInputError("no height estimates to aggregate")
    return float(np.median(np.asarray(estimates, dtype=float)))
