"""
Street Height Estimation - Edge maps
Edge-map raster container, PGM/PPM I/O and the weighted Hough transform that
scores line segments by summed edge intensity
"""

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from PIL import Image

from .errors import InputError, OutOfBoundsError

Pixel = Tuple[int, int]
SegmentGate = Callable[[Pixel, Pixel], bool]

DEFAULT_ANGLE_STEP = math.radians(0.5)


@dataclass(frozen=True, eq=False)
class EdgeMap:
    """Read-only single-channel 0-255 raster indexed [row, col]"""
    pixels: np.ndarray

    def __post_init__(self):
        pixels = np.asarray(self.pixels)
        if pixels.ndim != 2:
            raise InputError(f"edge map must be 2-D, got shape {pixels.shape}")
        pixels = np.clip(pixels, 0, 255).astype(np.uint8, copy=True)
        pixels.setflags(write=False)
        object.__setattr__(self, "pixels", pixels)

    @classmethod
    def blank(cls, width: int, height: int) -> "EdgeMap":
        return cls(np.zeros((height, width), dtype=np.uint8))

    @property
    def width(self) -> int:
        return int(self.pixels.shape[1])

    @property
    def height(self) -> int:
        return int(self.pixels.shape[0])

    @property
    def shape(self) -> Tuple[int, int]:
        return self.pixels.shape

    def contains(self, p: Sequence[float]) -> bool:
        return 0 <= p[0] < self.width and 0 <= p[1] < self.height

    def __eq__(self, other: object) -> bool:
        return isinstance(other, EdgeMap) and np.array_equal(self.pixels, other.pixels)

    @classmethod
    def read_pgm(cls, path: Union[str, Path]) -> "EdgeMap":
        return cls(read_gray(path))

    def write_pgm(self, path: Union[str, Path]) -> None:
        write_gray(path, self.pixels)


@dataclass(frozen=True)
class LineSegment:
    """Raster segment with its pixel count (lambda) and edgeness (omega)"""
    p0: Pixel
    p1: Pixel
    length: int
    edgeness: float

    @property
    def angle(self) -> float:
        """Direction counter-clockwise from the image's +u axis"""
        return math.atan2(-(self.p1[1] - self.p0[1]), self.p1[0] - self.p0[0])


def read_gray(path: Union[str, Path]) -> np.ndarray:
    try:
        with Image.open(path) as image:
            return np.array(image.convert("L"), dtype=np.uint8)
    except FileNotFoundError:
        raise
    except OSError as e:
        raise InputError(f"cannot read image {path}: {e}") from e


def write_gray(path: Union[str, Path], pixels: np.ndarray) -> None:
    Image.fromarray(np.ascontiguousarray(pixels, dtype=np.uint8)).save(path, format="PPM")


def write_rgb(path: Union[str, Path], pixels: np.ndarray) -> None:
    Image.fromarray(np.ascontiguousarray(pixels, dtype=np.uint8)).save(path, format="PPM")


def read_mask(path: Union[str, Path]) -> np.ndarray:
    return read_gray(path) > 0


def write_mask(path: Union[str, Path], mask: np.ndarray) -> None:
    write_gray(path, np.where(np.asarray(mask, dtype=bool), 255, 0))


def _check_bounds(p: Pixel, bounds: Optional[Tuple[int, int]]) -> None:
    if bounds is None:
        return
    height, width = bounds
    if not (0 <= p[0] < width and 0 <= p[1] < height):
        raise OutOfBoundsError(f"pixel {tuple(p)} outside {width}x{height} raster")


def line_pixels(p0: Sequence[int], p1: Sequence[int],
                bounds: Optional[Tuple[int, int]] = None) -> np.ndarray:
    """8-connected raster line from p0 to p1 inclusive.

    Each step along the major axis takes the grid point nearest the ideal line,
    with halves rounded toward the lexicographically larger endpoint so the
    pixel set does not depend on endpoint order.

    Args:
        p0, p1: (col, row) integer endpoints.
        bounds: optional (height, width) raster shape to check against.

    Returns:
        (N, 2) int array of (col, row) ordered from p0 to p1.
    """
    a = (int(p0[0]), int(p0[1]))
    b = (int(p1[0]), int(p1[1]))
    _check_bounds(a, bounds)
    _check_bounds(b, bounds)

    swapped = b < a
    if swapped:
        a, b = b, a
    dc, dr = b[0] - a[0], b[1] - a[1]
    n = max(abs(dc), abs(dr))
    if n == 0:
        return np.array([a], dtype=np.int64)

    t = np.arange(n + 1, dtype=np.int64)
    # nearest grid point: floor(d*t/n + 1/2) in exact integer arithmetic
    cols = a[0] + np.floor_divide(2 * dc * t + n, 2 * n)
    rows = a[1] + np.floor_divide(2 * dr * t + n, 2 * n)
    pixels = np.stack([cols, rows], axis=1)
    return pixels[::-1].copy() if swapped else pixels


def sum_along(edge_map: EdgeMap, pixels: np.ndarray) -> float:
    if len(pixels) == 0:
        return 0.0
    return float(edge_map.pixels[pixels[:, 1], pixels[:, 0]].astype(np.int64).sum())


def edgeness(edge_map: EdgeMap, p0: Sequence[int], p1: Sequence[int]) -> Tuple[int, float]:
    """(lambda, omega): rasterized pixel count and summed intensity along p0-p1"""
    pixels = line_pixels(p0, p1, edge_map.shape)
    return len(pixels), sum_along(edge_map, pixels)


def _round(value: float) -> int:
    return int(math.floor(value + 0.5))


def round_pixel(point: Sequence[float]) -> Pixel:
    """Nearest raster pixel, halves rounded up"""
    return (_round(point[0]), _round(point[1]))


def _ray_to_last_edge(edge_map: EdgeMap, anchor: Pixel, theta: float) -> Optional[Pixel]:
    """Farthest in-bounds point along theta, trimmed back to the last nonzero pixel"""
    dc, dr = math.cos(theta), -math.sin(theta)
    reach = []
    for span, step, limit in ((anchor[0], dc, edge_map.width - 1), (anchor[1], dr, edge_map.height - 1)):
        if step > 1e-12:
            reach.append((limit - span) / step)
        elif step < -1e-12:
            reach.append(-span / step)
    distance = min(reach) if reach else 0.0
    end = (_round(anchor[0] + distance * dc), _round(anchor[1] + distance * dr))
    end = (min(max(end[0], 0), edge_map.width - 1), min(max(end[1], 0), edge_map.height - 1))
    if end == anchor:
        return None
    pixels = line_pixels(anchor, end)
    nonzero = np.flatnonzero(edge_map.pixels[pixels[:, 1], pixels[:, 0]])
    if len(nonzero) == 0 or nonzero[-1] == 0:
        return None
    return (int(pixels[nonzero[-1], 0]), int(pixels[nonzero[-1], 1]))


def sweep_angles(angle: float, angle_tol: float, angle_step: float = DEFAULT_ANGLE_STEP) -> List[float]:
    steps = int(math.floor(angle_tol / angle_step + 1e-9))
    return [angle + k * angle_step for k in range(-steps, steps + 1)]


def weighted_hough(edge_map: EdgeMap, angle: float, angle_tol: float,
                   gate: Optional[SegmentGate] = None,
                   anchors: Optional[Iterable[Pixel]] = None,
                   length: Optional[float] = None,
                   angle_step: float = DEFAULT_ANGLE_STEP) -> List[LineSegment]:
    """Score segments by edgeness instead of voting in a (rho, theta) accumulator.

    Segments start at each anchor and are swept over angle +/- angle_tol in
    angle_step increments. With a fixed length the far endpoint is the rounded
    point at that distance; without one, the ray is followed to the raster
    border and trimmed back to its last edge pixel.

    Args:
        edge_map: Raster to score against.
        angle: Expected direction, counter-clockwise from +u (v up).
        angle_tol: Half-width of the swept angle window.
        gate: Optional predicate on (p0, p1) applied before scoring.
        anchors: Start pixels; defaults to every nonzero pixel.
        length: Segment length in pixels.
        angle_step: Sweep increment.

    Returns:
        Segments with positive edgeness sorted by edgeness descending.
    """
    if angle_tol < 0:
        raise ValueError("angle_tol must be nonnegative")
    if anchors is None:
        rows, cols = np.nonzero(edge_map.pixels)
        anchors = list(zip(cols.tolist(), rows.tolist()))

    angles = sweep_angles(angle, angle_tol, angle_step)
    seen = set()
    segments: List[LineSegment] = []
    for anchor in anchors:
        p0 = (int(anchor[0]), int(anchor[1]))
        if not edge_map.contains(p0):
            continue
        for theta in angles:
            if length is None:
                p1 = _ray_to_last_edge(edge_map, p0, theta)
                if p1 is None:
                    continue
            else:
                p1 = (_round(p0[0] + length * math.cos(theta)), _round(p0[1] - length * math.sin(theta)))
                if p1 == p0 or not edge_map.contains(p1):
                    continue
            if (p0, p1) in seen:
                continue
            seen.add((p0, p1))
            if gate is not None and not gate(p0, p1):
                continue
            lam, omega = edgeness(edge_map, p0, p1)
            if omega > 0:
                segments.append(LineSegment(p0, p1, lam, omega))

    segments.sort(key=lambda s: (-s.edgeness, s.p0, s.p1))
    return segments
