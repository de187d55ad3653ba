"""
Street Height Estimation - Rectification
Homography estimation by the direct linear transform and upward-view
rectification for tall buildings
"""

import math
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np
from scipy import ndimage

from .edgemap import EdgeMap
from .errors import DegenerateConfigurationError, SingularHomographyError, TooFewPointsError
from .geometry import CameraPose, WorldPoint, project_to_raster

RANK_TOLERANCE = 1e-9


@dataclass(frozen=True)
class PointCorrespondence:
    """source (X, Y) in the upward-looking image, target (x, y) in the level one"""
    source: Tuple[float, float]
    target: Tuple[float, float]


@dataclass(frozen=True, eq=False)
class Homography:
    """3x3 projective map with unit Frobenius norm and h33 >= 0"""
    matrix: np.ndarray

    def __post_init__(self):
        h = np.asarray(self.matrix, dtype=float).reshape(3, 3)
        norm = np.linalg.norm(h)
        if norm == 0:
            raise SingularHomographyError("zero homography")
        h = h / norm
        if h[2, 2] < 0:
            h = -h
        object.__setattr__(self, "matrix", h)

    @classmethod
    def identity(cls) -> "Homography":
        return cls(np.eye(3))

    def is_identity(self, tolerance: float = 1e-12) -> bool:
        if self.matrix[2, 2] == 0:
            return False
        return bool(np.allclose(self.matrix / self.matrix[2, 2], np.eye(3), rtol=0.0, atol=tolerance))

    @property
    def vector(self) -> np.ndarray:
        return self.matrix.reshape(9)

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Map (N, 2) points"""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        homogeneous = np.hstack([pts, np.ones((len(pts), 1))]) @ self.matrix.T
        return homogeneous[:, :2] / homogeneous[:, 2:3]

    def inverse(self) -> "Homography":
        if abs(np.linalg.det(self.matrix)) < 1e-15:
            raise SingularHomographyError("homography is not invertible")
        return Homography(np.linalg.inv(self.matrix))

    def compose(self, other: "Homography") -> "Homography":
        """self after other"""
        return Homography(self.matrix @ other.matrix)


def normalize_points(points: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Translate to zero mean and scale to RMS distance sqrt(2).

    Returns:
        (normalized points, 3x3 similarity that produced them)
    """
    mean = points.mean(axis=0)
    rms = math.sqrt(float(np.mean(np.sum((points - mean) ** 2, axis=1))))
    if rms == 0:
        raise DegenerateConfigurationError("all points coincide")
    scale = math.sqrt(2) / rms
    transform = np.array([
        [scale, 0.0, -scale * mean[0]],
        [0.0, scale, -scale * mean[1]],
        [0.0, 0.0, 1.0],
    ])
    return (points - mean) * scale, transform


def build_dlt_system(pairs: Sequence[PointCorrespondence]) -> np.ndarray:
    """Stack two rows per correspondence so that A @ vec(H) = 0"""
    if len(pairs) < 4:
        raise TooFewPointsError(f"need at least 4 correspondences, got {len(pairs)}")
    rows: List[List[float]] = []
    for pair in pairs:
        X, Y = pair.source
        x, y = pair.target
        rows.append([X, Y, 1.0, 0.0, 0.0, 0.0, -x * X, -x * Y, -x])
        rows.append([0.0, 0.0, 0.0, X, Y, 1.0, -y * X, -y * Y, -y])
    return np.asarray(rows, dtype=float)


def solve_homography(A: np.ndarray) -> Homography:
    """Unit vector minimizing |A h|: the last right-singular vector.

    Raises:
        DegenerateConfigurationError: the null space has more than one dimension.
    """
    A = np.asarray(A, dtype=float)
    _, singular, vt = np.linalg.svd(A)
    full = np.zeros(9)
    full[:len(singular)] = singular
    if full[7] <= RANK_TOLERANCE * max(full[0], 1e-300):
        raise DegenerateConfigurationError("correspondences do not determine a unique homography")
    return Homography(vt[-1])


def estimate_homography(pairs: Sequence[PointCorrespondence], normalize: bool = True) -> Homography:
    """Homography from correspondences, with Hartley normalization by default"""
    if not normalize:
        return solve_homography(build_dlt_system(pairs))
    if len(pairs) < 4:
        raise TooFewPointsError(f"need at least 4 correspondences, got {len(pairs)}")
    source = np.array([p.source for p in pairs], dtype=float)
    target = np.array([p.target for p in pairs], dtype=float)
    source_n, t_source = normalize_points(source)
    target_n, t_target = normalize_points(target)
    normalized_pairs = [PointCorrespondence(tuple(s), tuple(t)) for s, t in zip(source_n, target_n)]
    h_normalized = solve_homography(build_dlt_system(normalized_pairs))
    return Homography(np.linalg.inv(t_target) @ h_normalized.matrix @ t_source)


def rectify_image(edge_map: EdgeMap, h: Homography) -> EdgeMap:
    """Warp so that output pixel q takes the source value at h^-1(q), bilinear, zero outside"""
    if h.is_identity():
        return EdgeMap(edge_map.pixels)
    inverse = h.inverse()
    rows, cols = np.indices(edge_map.shape, dtype=float)
    target = np.stack([cols.ravel(), rows.ravel()], axis=1)
    source = inverse.apply(target)
    sampled = ndimage.map_coordinates(
        edge_map.pixels.astype(float),
        [source[:, 1].reshape(edge_map.shape), source[:, 0].reshape(edge_map.shape)],
        order=1, mode="constant", cval=0.0,
    )
    return EdgeMap(np.floor(sampled + 0.5))


def rectify_mask(mask: np.ndarray, h: Homography) -> np.ndarray:
    warped = rectify_image(EdgeMap(np.where(mask, 255, 0)), h)
    return warped.pixels >= 128


def pitch_homography(pose: CameraPose) -> Homography:
    """Homography from the pitched view's raster to the level view's raster.

    Correspondences come from projecting a facade quad ahead of the camera
    through both cameras.
    """
    if pose.pitch == 0.0:
        return Homography.identity()
    level = pose.leveled()
    sin_h, cos_h = math.sin(pose.heading), math.cos(pose.heading)
    depth = 50.0
    quad = []
    for lateral in (-10.0, 10.0):
        for z in (0.0, 10.0):
            quad.append(WorldPoint(
                pose.position[0] + lateral * cos_h + depth * sin_h,
                pose.position[1] - lateral * sin_h + depth * cos_h,
                z,
            ))
    pairs = [PointCorrespondence(project_to_raster(pose, p), project_to_raster(level, p)) for p in quad]
    return estimate_homography(pairs)
