"""
Street Height Estimation - Candidate generation
Corner and roofline candidates from an assumed-height sweep over projected
footprint corners, and the fixed-size patches fed to the classifiers
"""

import math
from dataclasses import dataclass
from enum import Enum
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage
from skimage.transform import resize

from .config import PipelineConfig
from .edgemap import EdgeMap, LineSegment, Pixel, line_pixels, round_pixel, weighted_hough
from .errors import OutOfBoundsError
from .geometry import (
    BuildingFootprint,
    CameraPose,
    CornerRole,
    WorldPoint,
    building_side,
    classify_corner_roles,
    distance_along_axis,
    is_front_facing,
    max_visible_height,
    project_to_raster,
)
from .ranking import CandidateFeatures

CORNER_CLASSES = ("cn-left", "cz-left", "cn-right", "cz-right")
ROOFLINE_CLASSES = ("cn-cx", "cn-cz-left", "cn-cz-right")
DEFAULT_CONFIG = PipelineConfig()


class CornerFormation(Enum):
    """How a roof corner shows up in an edge map"""
    BOTH_FACES = "both-faces"
    LEFT_FACE = "left-face"
    RIGHT_FACE = "right-face"
    HIDDEN = "hidden"


@dataclass(frozen=True, eq=False)
class CornerCandidate:
    building_id: str
    role: CornerRole
    corner_index: int
    assumed_height: float
    rung: int
    window: Tuple[float, float]
    located: Pixel
    patch: np.ndarray
    corner_type: str
    formation: CornerFormation
    features: CandidateFeatures


@dataclass(frozen=True, eq=False)
class RooflineCandidate:
    building_id: str
    kind: str
    corners: Tuple[int, int]
    assumed_height: float
    rung: int
    segment: LineSegment
    projected: Tuple[Tuple[float, float], Tuple[float, float]]
    gate_px: float
    patch: np.ndarray
    features: CandidateFeatures


def sweep_heights(d_hat: float, pose: CameraPose, step: float = 0.5) -> List[float]:
    """Assumed heights from the highest visible one down to 0 in fixed steps.

    Heights are measured from the camera-axis plane (WorldPoint.z), not from
    the ground: 0 projects onto the image's center row and the top rung onto
    its first row. A roof of building height H sits at H - mount_height.
    """
    top = max_visible_height(d_hat, pose)
    count = int(math.floor(top / step + 1e-9))
    heights = [top - k * step for k in range(count + 1)]
    if heights[-1] > 1e-9:
        heights.append(0.0)
    else:
        heights[-1] = 0.0
    return heights


def ladder_step_px(d_hat: float, pose: CameraPose, step: float) -> float:
    return step * pose.focal_length / d_hat


def roofline_step(d_hat: float, pose: CameraPose, config: PipelineConfig = DEFAULT_CONFIG) -> float:
    """Height step shortened until consecutive rungs lie at most two gates apart in the image"""
    return min(config.height_step, 2 * config.gate_px * d_hat / pose.focal_length)


def gate_anchors(edge_map: EdgeMap, center: Pixel, reach: int) -> List[Pixel]:
    """Segment start pixels: the column through center, then every edge pixel
    within reach of it in both directions"""
    col, row = center
    anchors = [(col, row + k) for k in range(-reach, reach + 1)]
    r0, r1 = max(row - reach, 0), min(row + reach + 1, edge_map.height)
    c0, c1 = max(col - reach, 0), min(col + reach + 1, edge_map.width)
    if r0 < r1 and c0 < c1:
        rows, cols = np.nonzero(edge_map.pixels[r0:r1, c0:c1])
        anchors.extend((c0 + int(c), r0 + int(r)) for r, c in zip(rows, cols) if c0 + int(c) != col)
    return anchors


def crop_patch(edge_map: EdgeMap, center: Sequence[float], size: int = 28) -> np.ndarray:
    """size x size crop around center, zero outside the raster"""
    col, row = round_pixel(center)
    half = size // 2
    patch = np.zeros((size, size), dtype=float)
    r0, c0 = row - half, col - half
    rs, cs = max(r0, 0), max(c0, 0)
    re, ce = min(r0 + size, edge_map.height), min(c0 + size, edge_map.width)
    if rs < re and cs < ce:
        patch[rs - r0:re - r0, cs - c0:ce - c0] = edge_map.pixels[rs:re, cs:ce]
    return patch


def extract_roofline_patch(edge_map: EdgeMap, segment: LineSegment,
                           half_height: int = 10, size: int = 28) -> np.ndarray:
    """Sample the strip around a segment, level it, and resize to size x size.

    The strip is (2*half_height + 1) rows tall and one column per pixel of
    segment length, read left to right with the upper side on top. Pixels
    outside the raster read as 0.
    """
    for p in (segment.p0, segment.p1):
        if not edge_map.contains(p):
            raise OutOfBoundsError(f"segment endpoint {p} outside the raster")
    p0 = np.asarray(segment.p0, dtype=float)
    p1 = np.asarray(segment.p1, dtype=float)
    if p1[0] < p0[0] or (p1[0] == p0[0] and p1[1] > p0[1]):
        p0, p1 = p1, p0
    delta = p1 - p0
    length = float(np.hypot(*delta))
    samples = max(int(round(length)), 1) + 1
    direction = delta / length if length > 0 else np.array([1.0, 0.0])
    up = np.array([direction[1], -direction[0]])

    t = np.linspace(0.0, length, samples)
    k = np.arange(half_height, -half_height - 1, -1, dtype=float)
    cols = p0[0] + t[None, :] * direction[0] + k[:, None] * up[0]
    rows = p0[1] + t[None, :] * direction[1] + k[:, None] * up[1]
    strip = ndimage.map_coordinates(edge_map.pixels.astype(float), [rows, cols],
                                    order=1, mode="constant", cval=0.0)
    return resize(strip, (size, size), order=1, anti_aliasing=False, preserve_range=True)


def _roof_raster(fp: BuildingFootprint, pose: CameraPose, index: int, z: float) -> Optional[Tuple[float, float]]:
    point = WorldPoint(*fp.corners[index], z)
    if distance_along_axis(pose, point) <= 0:
        return None
    return project_to_raster(pose, point)


def _arm(origin: Tuple[float, float], target: Tuple[float, float], arm_px: int) -> Optional[Pixel]:
    dc, dr = target[0] - origin[0], target[1] - origin[1]
    norm = math.hypot(dc, dr)
    if norm < 1e-9:
        return None
    reach = min(float(arm_px), norm)
    return round_pixel((dc / norm * reach, dr / norm * reach))


def corner_formation(fp: BuildingFootprint, pose: CameraPose, index: int, z: float,
                     arm_px: int) -> Tuple[CornerFormation, np.ndarray]:
    """Formation type and kernel offsets (col, row) of a roof corner.

    Arms run along each front-facing roof edge meeting the corner and down
    the corner line.
    """
    n = len(fp)
    center = _roof_raster(fp, pose, index, z)
    offsets = [np.zeros((1, 2), dtype=np.int64)]
    faces = []
    if center is not None:
        for neighbour, edge in (((index - 1) % n, ((index - 1) % n, index)),
                                ((index + 1) % n, (index, (index + 1) % n))):
            if not is_front_facing(fp, edge, pose):
                continue
            target = _roof_raster(fp, pose, neighbour, z)
            if target is None:
                continue
            end = _arm(center, target, arm_px)
            if end is not None:
                faces.append(end[0])
                offsets.append(line_pixels((0, 0), end))
        ground = _roof_raster(fp, pose, index, -pose.mount_height)
        down = _arm(center, ground, arm_px) if ground is not None else None
        offsets.append(line_pixels((0, 0), down if down is not None else (0, arm_px)))

    if len(faces) == 2:
        formation = CornerFormation.BOTH_FACES
    elif len(faces) == 1:
        formation = CornerFormation.LEFT_FACE if faces[0] < 0 else CornerFormation.RIGHT_FACE
    else:
        formation = CornerFormation.HIDDEN
    return formation, np.unique(np.concatenate(offsets), axis=0)


class PaddedEdges:
    """Zero-padded copy of an edge map for window correlation"""

    def __init__(self, edge_map: EdgeMap, pad: int):
        self.edge_map = edge_map
        self.pad = pad
        self.pixels = np.pad(edge_map.pixels.astype(np.int64), pad)


def localize_corner(padded: PaddedEdges, center: Tuple[float, float], kernel: np.ndarray,
                    half_width: int, band: int) -> Tuple[Pixel, int, float]:
    """Best kernel placement in a band around center.

    Returns:
        (pixel, lambda, omega): location, kernel pixels with edges there, and
        their summed intensity. Falls back to the center when nothing responds.
    """
    col, row = round_pixel(center)
    pad = padded.pad
    shape = (2 * band + 1, 2 * half_width)
    response = np.zeros(shape, dtype=np.int64)
    hits = np.zeros(shape, dtype=np.int64)
    for dc, dr in kernel:
        r0 = row - band + dr + pad
        c0 = col - half_width + dc + pad
        if r0 < 0 or c0 < 0 or r0 + shape[0] > padded.pixels.shape[0] or c0 + shape[1] > padded.pixels.shape[1]:
            continue
        window = padded.pixels[r0:r0 + shape[0], c0:c0 + shape[1]]
        response += window
        hits += window > 0

    ys = row - band + np.arange(shape[0])
    xs = col - half_width + np.arange(shape[1])
    inside = ((ys >= 0) & (ys < padded.edge_map.height))[:, None] & ((xs >= 0) & (xs < padded.edge_map.width))[None, :]
    response = np.where(inside, response, -1)

    best = int(response.max())
    if best <= 0:
        return (col, row), 0, 0.0
    ys, xs = np.nonzero(response == best)
    dist = (ys - band) ** 2 + (xs - half_width) ** 2
    pick = int(np.lexsort((xs, ys, dist))[0])
    y, x = int(ys[pick]), int(xs[pick])
    return (col - half_width + x, row - band + y), int(hits[y, x]), float(best)


def corner_type_for(role: CornerRole, side: str) -> str:
    if role is CornerRole.CN:
        return f"cn-{side}"
    if role is CornerRole.CZ:
        return f"cz-{side}"
    # the outermost corner shows the inner-corner shape of the opposite side
    return f"cz-{'right' if side == 'left' else 'left'}"


def quarter_distance(col: float, width: int) -> float:
    return float(min(abs(col - width / 4), abs(col - 3 * width / 4)))


def _window_visible(center: Tuple[float, float], half: int, edge_map: EdgeMap) -> bool:
    return (center[0] + half > 0 and center[0] - half < edge_map.width
            and center[1] + half > 0 and center[1] - half < edge_map.height)


def corner_candidates(fp: BuildingFootprint, pose: CameraPose, edge_map: EdgeMap,
                      config: PipelineConfig = DEFAULT_CONFIG,
                      roles: Sequence[CornerRole] = (CornerRole.CN, CornerRole.CZ)) -> List[CornerCandidate]:
    """Corner candidates for each role and swept height.

    Each candidate's window is centred on the projected roof corner; the
    corner is localized inside the window and the patch is cropped there.

    Raises:
        NoVisibleCornerError: every footprint corner is behind the camera.
    """
    role_map = classify_corner_roles(fp, pose)
    side = building_side(fp, pose, role_map[CornerRole.CN])
    half = config.window_px // 2
    found: List[CornerCandidate] = []
    plans = []
    for role in roles:
        index = role_map[role]
        base = WorldPoint(*fp.corners[index], 0.0)
        d_hat = distance_along_axis(pose, base)
        if d_hat > 0:
            band = max(1, math.ceil(ladder_step_px(d_hat, pose, config.height_step) / 2))
            plans.append((role, index, base, d_hat, band))
    if not plans:
        return found

    padded = PaddedEdges(edge_map, 2 * half + config.arm_px + max(p[4] for p in plans) + 2)
    for role, index, base, d_hat, band in plans:
        distance = math.hypot(base.x - pose.position[0], base.y - pose.position[1])
        for rung, height in enumerate(sweep_heights(d_hat, pose, config.height_step)):
            center = project_to_raster(pose, WorldPoint(base.x, base.y, height))
            if not _window_visible(center, half, edge_map):
                continue
            formation, kernel = corner_formation(fp, pose, index, height, config.arm_px)
            located, lam, omega = localize_corner(padded, center, kernel, half, band)
            found.append(CornerCandidate(
                building_id=fp.id,
                role=role,
                corner_index=index,
                assumed_height=height,
                rung=rung,
                window=center,
                located=located,
                patch=crop_patch(edge_map, located, config.patch_px),
                corner_type=corner_type_for(role, side),
                formation=formation,
                features=CandidateFeatures(
                    lam=float(lam), omega=omega, tau=0,
                    rho=quarter_distance(located[0], edge_map.width), distance=distance,
                ),
            ))
    return found


def roofline_kinds(fp: BuildingFootprint, pose: CameraPose) -> List[Tuple[str, int, int]]:
    """(kind, Cn index, neighbour index) for Cn's outward and inward roof edges"""
    role_map = classify_corner_roles(fp, pose)
    cn = role_map[CornerRole.CN]
    if distance_along_axis(pose, WorldPoint(*fp.corners[cn], 0.0)) <= 0:
        return []
    n = len(fp)
    neighbours = []
    for j in ((cn + 1) % n, (cn - 1) % n):
        point = WorldPoint(*fp.corners[j], 0.0)
        if distance_along_axis(pose, point) > 0 and fp.corners[j] != fp.corners[cn]:
            neighbours.append(j)
    if not neighbours:
        return []

    def abs_u(j: int) -> float:
        col, _ = project_to_raster(pose, WorldPoint(*fp.corners[j], 0.0))
        return abs(col - pose.image_width / 2)

    side = building_side(fp, pose, cn)
    kinds = []
    outward = max(neighbours, key=abs_u)
    kinds.append(("cn-cx", cn, outward))
    inward = [j for j in neighbours if j != outward]
    if inward:
        kinds.append((f"cn-cz-{side}", cn, inward[0]))
    return kinds


def roofline_candidates(fp: BuildingFootprint, pose: CameraPose, edge_map: EdgeMap,
                        config: PipelineConfig = DEFAULT_CONFIG) -> List[RooflineCandidate]:
    """Roofline candidates per kind and swept height.

    For each assumed height the corner pair is projected and the weighted
    Hough sweep runs from anchors around the Cn projection; segments must end
    within the gate of both projections. Near buildings are swept on a finer
    ladder (roofline_step) so every image row lies within the gate of a rung.

    Raises:
        NoVisibleCornerError: every footprint corner is behind the camera.
    """
    kinds = roofline_kinds(fp, pose)
    found: List[RooflineCandidate] = []
    if not kinds:
        return found
    cn = kinds[0][1]
    d_hat = distance_along_axis(pose, WorldPoint(*fp.corners[cn], 0.0))
    gate = float(config.gate_px)
    reach = int(math.floor(gate))
    angle_step = math.radians(config.angle_step_deg)
    heights = sweep_heights(d_hat, pose, roofline_step(d_hat, pose, config))

    for kind, i, j in kinds:
        for rung, height in enumerate(heights):
            a = _roof_raster(fp, pose, i, height)
            b = _roof_raster(fp, pose, j, height)
            if a is None or b is None:
                continue
            length = math.hypot(b[0] - a[0], b[1] - a[1])
            if length < 1.0:
                continue
            angle = math.atan2(-(b[1] - a[1]), b[0] - a[0])
            tolerance = math.atan2(2 * gate, length) + angle_step
            anchors = gate_anchors(edge_map, round_pixel(a), reach)

            def endpoint_gate(p0: Pixel, p1: Pixel, a=a, b=b) -> bool:
                return (max(abs(p0[0] - a[0]), abs(p0[1] - a[1])) <= gate
                        and max(abs(p1[0] - b[0]), abs(p1[1] - b[1])) <= gate)

            segments = weighted_hough(edge_map, angle, tolerance, gate=endpoint_gate,
                                      anchors=anchors, length=length, angle_step=angle_step)
            for segment in segments[:config.segments_per_height]:
                pixels = line_pixels(segment.p0, segment.p1)
                detected = int(np.count_nonzero(edge_map.pixels[pixels[:, 1], pixels[:, 0]]))
                found.append(RooflineCandidate(
                    building_id=fp.id,
                    kind=kind,
                    corners=(i, j),
                    assumed_height=height,
                    rung=rung,
                    segment=segment,
                    projected=(a, b),
                    gate_px=gate,
                    patch=extract_roofline_patch(edge_map, segment, config.strip_half_height, config.patch_px),
                    features=CandidateFeatures(lam=float(detected), omega=segment.edgeness),
                ))
    return found


def heights_agree(a: float, b: float, step: float) -> bool:
    """Two assumed heights fall on the same ladder rung"""
    return abs(a - b) <= step / 2 + 1e-9
