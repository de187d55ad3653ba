"""
Street Height Estimation - Geometry
Pinhole camera model: world/image projection, height formulas and per-building
corner roles
"""

import math
from dataclasses import dataclass, replace
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from shapely.geometry import Polygon

from .errors import (
    FootprintValidationError,
    NonHorizontalPoseError,
    NonPositiveDistanceError,
    NoVisibleCornerError,
    PointBehindCameraError,
)

Point2D = Tuple[float, float]


@dataclass(frozen=True)
class CameraPose:
    """Street-level camera: planar position, heading, pitch and intrinsics.

    heading is measured clockwise from north in radians; pitch is positive when
    the camera looks up. The optical center sits mount_height above the ground.
    """
    position: Point2D
    heading: float
    pitch: float = 0.0
    focal_length: float = 320.0
    image_width: int = 640
    image_height: int = 640
    mount_height: float = 2.5

    def __post_init__(self):
        if not self.focal_length > 0:
            raise ValueError(f"focal_length must be positive, got {self.focal_length}")
        if self.image_width <= 0 or self.image_height <= 0:
            raise ValueError("image dimensions must be positive")
        if not abs(self.pitch) < math.pi / 2:
            raise ValueError(f"|pitch| must be below pi/2, got {self.pitch}")
        if self.mount_height < 0:
            raise ValueError("mount_height must be nonnegative")

    @property
    def forward(self) -> Point2D:
        return (math.sin(self.heading), math.cos(self.heading))

    @property
    def right(self) -> Point2D:
        return (math.cos(self.heading), -math.sin(self.heading))

    def leveled(self) -> "CameraPose":
        return replace(self, pitch=0.0)

    def moved_to(self, position: Point2D) -> "CameraPose":
        return replace(self, position=(float(position[0]), float(position[1])))


@dataclass(frozen=True)
class WorldPoint:
    """Map-plane point with z above the camera-axis plane.

    The ground lies at z = -mount_height; roof_point converts a height above
    ground.
    """
    x: float
    y: float
    z: float = 0.0


@dataclass(frozen=True)
class ImagePoint:
    """Image point relative to the image center, v pointing up"""
    u: float
    v: float


class CornerRole(Enum):
    CN = "Cn"
    CX = "Cx"
    CZ = "Cz"


@dataclass(frozen=True)
class BuildingFootprint:
    """Counter-clockwise footprint polygon with optional ground-truth height"""
    id: str
    corners: Tuple[Point2D, ...]
    true_height: Optional[float] = None

    def __post_init__(self):
        corners = tuple((float(x), float(y)) for x, y in self.corners)
        object.__setattr__(self, "corners", corners)
        if len(corners) < 3:
            raise FootprintValidationError(self.id, f"needs at least 3 corners, got {len(corners)}")
        polygon = Polygon(corners)
        if not polygon.is_valid or polygon.area <= 0:
            raise FootprintValidationError(self.id, "polygon is not simple")
        if not polygon.exterior.is_ccw:
            raise FootprintValidationError(self.id, "corners must be counter-clockwise")

    def __len__(self) -> int:
        return len(self.corners)

    def edges(self) -> List[Tuple[int, int]]:
        n = len(self.corners)
        return [(i, (i + 1) % n) for i in range(n)]


def roof_point(corner: Point2D, height: float, pose: CameraPose) -> WorldPoint:
    """World point at a building height measured from the ground"""
    return WorldPoint(corner[0], corner[1], height - pose.mount_height)


def camera_coordinates(pose: CameraPose, p: WorldPoint) -> Tuple[float, float, float]:
    """(right, up, depth) of p in the camera frame"""
    dx = p.x - pose.position[0]
    dy = p.y - pose.position[1]
    sin_h, cos_h = math.sin(pose.heading), math.cos(pose.heading)
    x_c = dx * cos_h - dy * sin_h
    ahead = dx * sin_h + dy * cos_h
    if pose.pitch == 0.0:
        return x_c, p.z, ahead
    sin_p, cos_p = math.sin(pose.pitch), math.cos(pose.pitch)
    z_c = ahead * cos_p + p.z * sin_p
    y_c = -ahead * sin_p + p.z * cos_p
    return x_c, y_c, z_c


def project_point(pose: CameraPose, p: WorldPoint) -> ImagePoint:
    """Project a world point into the image.

    Raises:
        PointBehindCameraError: depth along the optical axis is not positive.
    """
    x_c, y_c, z_c = camera_coordinates(pose, p)
    if z_c <= 0:
        raise PointBehindCameraError(f"point ({p.x}, {p.y}, {p.z}) has depth {z_c:.6g}")
    return ImagePoint(pose.focal_length * x_c / z_c, pose.focal_length * y_c / z_c)


def distance_along_axis(pose: CameraPose, p: WorldPoint) -> float:
    return camera_coordinates(pose, p)[2]


def height_from_roofline(h_r: float, d_hat: float, pose: CameraPose) -> float:
    """Building height from the roofline's pixel height above the center line"""
    if pose.pitch != 0.0:
        raise NonHorizontalPoseError(f"pitch is {pose.pitch}, rectify the view first")
    if not d_hat > 0:
        raise NonPositiveDistanceError(f"d_hat must be positive, got {d_hat}")
    return h_r * d_hat / pose.focal_length + pose.mount_height


def max_visible_height(d_hat: float, pose: CameraPose) -> float:
    if not d_hat > 0:
        raise NonPositiveDistanceError(f"d_hat must be positive, got {d_hat}")
    return d_hat * pose.image_height / (2 * pose.focal_length)


def corner_depths(fp: BuildingFootprint, pose: CameraPose) -> List[float]:
    return [distance_along_axis(pose, WorldPoint(x, y, 0.0)) for x, y in fp.corners]


def classify_corner_roles(fp: BuildingFootprint, pose: CameraPose) -> Dict[CornerRole, int]:
    """Resolve Cn (nearest), Cx (largest |u|) and Cz (smallest |u|) to corner indices.

    Ties go to the lowest corner index. Only corners in front of the camera are
    eligible for Cx and Cz.

    Raises:
        NoVisibleCornerError: every corner is behind the camera.
    """
    visible = [i for i, d in enumerate(corner_depths(fp, pose)) if d > 0]
    if not visible:
        raise NoVisibleCornerError(f"building '{fp.id}' lies entirely behind the camera")

    corners = np.asarray(fp.corners, dtype=float)
    distances = np.hypot(corners[:, 0] - pose.position[0], corners[:, 1] - pose.position[1])
    cn = int(np.argmin(distances))

    abs_u = {i: abs(project_point(pose, WorldPoint(*fp.corners[i], 0.0)).u) for i in visible}
    cx = cz = visible[0]
    for i in visible[1:]:
        if abs_u[i] > abs_u[cx]:
            cx = i
        if abs_u[i] < abs_u[cz]:
            cz = i
    return {CornerRole.CN: cn, CornerRole.CX: cx, CornerRole.CZ: cz}


def is_front_facing(fp: BuildingFootprint, edge: Tuple[int, int], pose: CameraPose) -> bool:
    """Whether the facade over a footprint edge faces the camera"""
    (ax, ay), (bx, by) = fp.corners[edge[0]], fp.corners[edge[1]]
    nx, ny = by - ay, -(bx - ax)
    mx, my = (ax + bx) / 2, (ay + by) / 2
    return (pose.position[0] - mx) * nx + (pose.position[1] - my) * ny > 0


def front_faces(fp: BuildingFootprint, pose: CameraPose) -> List[Tuple[int, int]]:
    return [e for e in fp.edges() if is_front_facing(fp, e, pose)]


def building_side(fp: BuildingFootprint, pose: CameraPose, corner: int) -> str:
    """'left' or 'right' of the optical axis for a footprint corner"""
    x_c, _, _ = camera_coordinates(pose, WorldPoint(*fp.corners[corner], 0.0))
    return "left" if x_c < 0 else "right"


def image_to_raster(pose: CameraPose, p: ImagePoint) -> Point2D:
    """Image coordinates to raster (column, row); row 0 is the top"""
    return (p.u + pose.image_width / 2, pose.image_height / 2 - p.v)


def raster_to_image(pose: CameraPose, col: float, row: float) -> ImagePoint:
    return ImagePoint(col - pose.image_width / 2, pose.image_height / 2 - row)


def project_to_raster(pose: CameraPose, p: WorldPoint) -> Point2D:
    return image_to_raster(pose, project_point(pose, p))


def nearest_distance(fp: BuildingFootprint, pose: CameraPose) -> float:
    corners = np.asarray(fp.corners, dtype=float)
    return float(np.min(np.hypot(corners[:, 0] - pose.position[0],
                                 corners[:, 1] - pose.position[1])))


def in_front(pose: CameraPose, points: Sequence[WorldPoint]) -> bool:
    return all(distance_along_axis(pose, p) > 0 for p in points)
