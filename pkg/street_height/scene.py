"""
Street Height Estimation - Synthetic scenes
Wireframe city-block renderer with exact ground truth, GPS perturbation,
footprint file ingestion and labeled patch dataset generation
"""

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import jsonschema
import numpy as np
import pandas as pd
from shapely.geometry import Polygon
from skimage.draw import disk, polygon

from .candidates import corner_type_for, crop_patch, extract_roofline_patch, roofline_kinds
from .config import PipelineConfig
from .edgemap import (
    EdgeMap,
    LineSegment,
    Pixel,
    edgeness,
    line_pixels,
    read_gray,
    read_mask,
    round_pixel,
    write_gray,
    write_mask,
)
from .errors import (
    EmptyInputError,
    FootprintParseError,
    FootprintValidationError,
    GeometryError,
    InputError,
)
from .geometry import (
    BuildingFootprint,
    CameraPose,
    CornerRole,
    ImagePoint,
    Point2D,
    WorldPoint,
    building_side,
    classify_corner_roles,
    distance_along_axis,
    front_faces,
    image_to_raster,
    nearest_distance,
    project_point,
    roof_point,
)
from .logging_config import get_logger

logger = get_logger(__name__)

CORNER_NEGATIVE = "corner-unknown"
ROOFLINE_NEGATIVE = "roofline-unknown"
NEGATIVE_EXCLUSION_PX = 5.0
MANIFEST_NAME = "manifest.tsv"

FOOTPRINT_SCHEMA: Dict[str, Any] = {
    "type": "object",
    "required": ["buildings"],
    "properties": {
        "buildings": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["id", "corners"],
                "properties": {
                    "id": {"type": "string", "minLength": 1},
                    "height_m": {"type": "number", "exclusiveMinimum": 0},
                    "corners": {
                        "type": "array",
                        "minItems": 3,
                        "items": {
                            "type": "array",
                            "minItems": 2,
                            "maxItems": 2,
                            "items": {"type": "number"},
                        },
                    },
                },
            },
        },
        "camera": {
            "type": "object",
            "required": ["position", "heading_deg"],
            "properties": {
                "position": {"type": "array", "minItems": 2, "maxItems": 2, "items": {"type": "number"}},
                "heading_deg": {"type": "number"},
                "pitch_deg": {"type": "number", "exclusiveMinimum": -90, "exclusiveMaximum": 90},
                "focal_px": {"type": "number", "exclusiveMinimum": 0},
                "image": {"type": "array", "minItems": 2, "maxItems": 2,
                          "items": {"type": "integer", "minimum": 1}},
                "mount_m": {"type": "number", "minimum": 0},
            },
        },
    },
}


@dataclass(frozen=True)
class Tree:
    """Disk of foliage in raster coordinates (col, row)"""
    center: Point2D
    radius: float


@dataclass(frozen=True)
class EdgeNoise:
    """Salt probability per pixel and +/- intensity jitter on edge pixels"""
    salt: float = 0.0
    jitter: int = 0

    def __post_init__(self):
        if not 0.0 <= self.salt <= 1.0:
            raise ValueError(f"salt probability must lie in [0, 1], got {self.salt}")
        if self.jitter < 0:
            raise ValueError("jitter must be nonnegative")


@dataclass(frozen=True)
class SceneSpec:
    seed: int
    buildings: Tuple[BuildingFootprint, ...]
    camera: CameraPose
    gps_noise_sigma: float = 0.0
    trees: Tuple[Tree, ...] = ()
    edge_noise: EdgeNoise = field(default_factory=EdgeNoise)

    def __post_init__(self):
        if self.gps_noise_sigma < 0:
            raise ValueError(f"gps_noise_sigma must be nonnegative, got {self.gps_noise_sigma}")
        object.__setattr__(self, "buildings", tuple(self.buildings))
        object.__setattr__(self, "trees", tuple(self.trees))


@dataclass(frozen=True)
class CornerTruth:
    building_id: str
    index: int
    image: Optional[ImagePoint]
    visible: bool


@dataclass(frozen=True)
class RooflineTruth:
    building_id: str
    corners: Tuple[int, int]
    p0: Pixel
    p1: Pixel
    visible_fraction: float


@dataclass(frozen=True, eq=False)
class SceneTruth:
    """Ground truth on the true pose; corner visibility accounts for trees, roofline visibility does not"""
    pose: CameraPose
    heights: Dict[str, float]
    corners: Tuple[CornerTruth, ...]
    rooflines: Tuple[RooflineTruth, ...]
    owner: np.ndarray
    fully_occluded: Dict[str, bool]

    def corner(self, building_id: str, index: int) -> Optional[CornerTruth]:
        for c in self.corners:
            if c.building_id == building_id and c.index == index:
                return c
        return None

    def corner_raster(self, building_id: str, index: int) -> Optional[Point2D]:
        c = self.corner(building_id, index)
        if c is None or c.image is None:
            return None
        return image_to_raster(self.pose, c.image)

    def roofline(self, building_id: str, i: int, j: int) -> Optional[RooflineTruth]:
        for r in self.rooflines:
            if r.building_id == building_id and set(r.corners) == {i, j}:
                return r
        return None


@dataclass(frozen=True, eq=False)
class RenderedScene:
    spec: SceneSpec
    edge_map: EdgeMap
    tree_mask: np.ndarray
    truth: SceneTruth
    noisy_pose: CameraPose


def gps_offset(sigma: float, rng: np.random.Generator) -> np.ndarray:
    """Isotropic Gaussian planar offset, radially clipped to 2 sigma"""
    offset = rng.normal(0.0, sigma, size=2)
    norm = float(np.hypot(*offset))
    limit = 2.0 * sigma
    if norm > limit:
        offset = offset * (limit / norm)
    return offset


def perturb_gps(pose: CameraPose, sigma: float, seed: int) -> CameraPose:
    """Pose with a seeded GPS position error; heading and intrinsics unchanged"""
    if sigma < 0:
        raise ValueError(f"sigma must be nonnegative, got {sigma}")
    if sigma == 0:
        return pose
    dx, dy = gps_offset(sigma, np.random.default_rng(seed))
    return pose.moved_to((pose.position[0] + dx, pose.position[1] + dy))


def _clip_to_raster(a: Point2D, b: Point2D, width: int, height: int) -> Optional[Tuple[Point2D, Point2D]]:
    """Liang-Barsky clip of a-b to the raster's pixel area"""
    lo = (-0.5, -0.5)
    hi = (width - 0.5, height - 0.5)
    t0, t1 = 0.0, 1.0
    d = (b[0] - a[0], b[1] - a[1])
    for axis in (0, 1):
        for p, q in ((-d[axis], a[axis] - lo[axis]), (d[axis], hi[axis] - a[axis])):
            if p == 0:
                if q < 0:
                    return None
                continue
            t = q / p
            if p < 0:
                t0 = max(t0, t)
            else:
                t1 = min(t1, t)
    if t0 > t1:
        return None
    return ((a[0] + t0 * d[0], a[1] + t0 * d[1]), (a[0] + t1 * d[0], a[1] + t1 * d[1]))


def raster_segment(a: Point2D, b: Point2D, shape: Tuple[int, int]) -> np.ndarray:
    """In-bounds pixels of the rasterized segment between two float raster points"""
    height, width = shape
    inside = all(-0.5 <= p[0] < width - 0.5 and -0.5 <= p[1] < height - 0.5 for p in (a, b))
    if not inside:
        clipped = _clip_to_raster(a, b, width, height)
        if clipped is None:
            return np.zeros((0, 2), dtype=np.int64)
        a, b = clipped
    pixels = line_pixels(round_pixel(a), round_pixel(b))
    keep = (pixels[:, 0] >= 0) & (pixels[:, 0] < width) & (pixels[:, 1] >= 0) & (pixels[:, 1] < height)
    return pixels[keep]


def _project_raster(pose: CameraPose, p: WorldPoint) -> Optional[Point2D]:
    if distance_along_axis(pose, p) <= 0:
        return None
    return image_to_raster(pose, project_point(pose, p))


def _draw_building(canvas: np.ndarray, owner: np.ndarray, fp: BuildingFootprint,
                   index: int, pose: CameraPose) -> List[Tuple[Tuple[int, int], np.ndarray]]:
    """Paint one building's facades and edges; returns its roof-edge pixel runs"""
    shape = canvas.shape
    height = fp.true_height
    faces = []
    for i, j in front_faces(fp, pose):
        corners = [
            _project_raster(pose, roof_point(fp.corners[i], height, pose)),
            _project_raster(pose, roof_point(fp.corners[j], height, pose)),
            _project_raster(pose, roof_point(fp.corners[j], 0.0, pose)),
            _project_raster(pose, roof_point(fp.corners[i], 0.0, pose)),
        ]
        if any(c is None for c in corners):
            continue
        faces.append(((i, j), corners))

    for _, quad in faces:
        rr, cc = polygon([c[1] for c in quad], [c[0] for c in quad], shape=shape)
        canvas[rr, cc] = 0
        owner[rr, cc] = index

    roof_runs = []
    drawn_corners = set()
    for (i, j), quad in faces:
        run = raster_segment(quad[0], quad[1], shape)
        roof_runs.append(((i, j), run))
        strokes = [run]
        for corner, top, bottom in ((i, quad[0], quad[3]), (j, quad[1], quad[2])):
            if corner not in drawn_corners:
                drawn_corners.add(corner)
                strokes.append(raster_segment(top, bottom, shape))
        for stroke in strokes:
            canvas[stroke[:, 1], stroke[:, 0]] = 255
            owner[stroke[:, 1], stroke[:, 0]] = index
    return roof_runs


def render(spec: SceneSpec) -> RenderedScene:
    """Render a wireframe edge map, nearer buildings painted over farther ones.

    Raises:
        InputError: a building has no true height.
    """
    pose = spec.camera
    shape = (pose.image_height, pose.image_width)
    for fp in spec.buildings:
        if fp.true_height is None:
            raise InputError(f"building '{fp.id}' has no true height to render")

    canvas = np.zeros(shape, dtype=np.int64)
    owner = np.full(shape, -1, dtype=np.int64)
    order = sorted(range(len(spec.buildings)),
                   key=lambda k: (-nearest_distance(spec.buildings[k], pose), k))
    runs: Dict[int, List[Tuple[Tuple[int, int], np.ndarray]]] = {}
    for k in order:
        runs[k] = _draw_building(canvas, owner, spec.buildings[k], k, pose)

    tree_mask = np.zeros(shape, dtype=bool)
    for tree in spec.trees:
        rr, cc = disk((tree.center[1], tree.center[0]), tree.radius, shape=shape)
        tree_mask[rr, cc] = True
    canvas[tree_mask] = 0

    corners: List[CornerTruth] = []
    rooflines: List[RooflineTruth] = []
    fully_occluded: Dict[str, bool] = {}
    for k, fp in enumerate(spec.buildings):
        for index, corner in enumerate(fp.corners):
            point = roof_point(corner, fp.true_height, pose)
            if distance_along_axis(pose, point) <= 0:
                corners.append(CornerTruth(fp.id, index, None, False))
                continue
            image = project_point(pose, point)
            col, row = round_pixel(image_to_raster(pose, image))
            visible = (0 <= col < shape[1] and 0 <= row < shape[0]
                       and owner[row, col] == k and canvas[row, col] > 0)
            corners.append(CornerTruth(fp.id, index, image, bool(visible)))

        any_visible = False
        for (i, j), run in runs[k]:
            a = _project_raster(pose, roof_point(fp.corners[i], fp.true_height, pose))
            b = _project_raster(pose, roof_point(fp.corners[j], fp.true_height, pose))
            fraction = float(np.mean(owner[run[:, 1], run[:, 0]] == k)) if len(run) else 0.0
            any_visible = any_visible or fraction > 0
            rooflines.append(RooflineTruth(fp.id, (i, j), round_pixel(a), round_pixel(b), fraction))
        fully_occluded[fp.id] = not any_visible

    if spec.buildings and all(fully_occluded.values()):
        logger.warning("no building visible in scene", seed=spec.seed)

    pixels = _apply_noise(canvas, tree_mask, spec)
    truth = SceneTruth(
        pose=pose,
        heights={fp.id: float(fp.true_height) for fp in spec.buildings},
        corners=tuple(corners),
        rooflines=tuple(rooflines),
        owner=owner,
        fully_occluded=fully_occluded,
    )
    return RenderedScene(
        spec=spec,
        edge_map=EdgeMap(pixels),
        tree_mask=tree_mask,
        truth=truth,
        noisy_pose=perturb_gps(pose, spec.gps_noise_sigma, spec.seed),
    )


def _apply_noise(canvas: np.ndarray, tree_mask: np.ndarray, spec: SceneSpec) -> np.ndarray:
    noise = spec.edge_noise
    if noise.salt == 0 and noise.jitter == 0:
        return canvas
    rng = np.random.default_rng([spec.seed, 2])
    out = canvas.copy()
    if noise.jitter > 0:
        delta = rng.integers(-noise.jitter, noise.jitter + 1, size=canvas.shape)
        out = np.where(canvas > 0, np.clip(canvas + delta, 1, 255), out)
    if noise.salt > 0:
        hits = (rng.random(canvas.shape) < noise.salt) & ~tree_mask
        values = rng.integers(1, 256, size=canvas.shape)
        out = np.where(hits, values, out)
    return out


def _box(x_inner: float, x_outer: float, y0: float, length: float) -> Tuple[Point2D, ...]:
    """Counter-clockwise rectangle spanning x_inner..x_outer across and y0..y0+length ahead"""
    left, right = min(x_inner, x_outer), max(x_inner, x_outer)
    return ((left, y0), (right, y0), (right, y0 + length), (left, y0 + length))


def random_scene_spec(seed: int, n_buildings: Optional[int] = None,
                      height_range: Tuple[float, float] = (5.0, 40.0),
                      gps_noise_sigma: float = 0.0, n_trees: int = 0,
                      edge_noise: Optional[EdgeNoise] = None,
                      camera: Optional[CameraPose] = None,
                      max_depth: float = 140.0) -> SceneSpec:
    """Random street block: rectangular buildings on both sides of the camera's street.

    Every building is placed far enough ahead that its whole footprint and
    roof fall inside the field of view.
    """
    rng = np.random.default_rng(seed)
    pose = camera or CameraPose(position=(0.0, 0.0), heading=0.0)
    if n_buildings is None:
        n_buildings = int(rng.integers(3, 9))
    cursors = {1: float(rng.uniform(5.0, 15.0)), -1: float(rng.uniform(5.0, 15.0))}
    tan_half = pose.image_width / (2 * pose.focal_length)

    buildings: List[BuildingFootprint] = []
    for k in range(n_buildings):
        side = 1 if k % 2 == 0 else -1
        height = float(rng.uniform(*height_range))
        offset = float(rng.uniform(8.0, 12.0))
        depth = float(rng.uniform(8.0, 14.0))
        length = float(rng.uniform(8.0, 16.0))
        gap = float(rng.uniform(2.0, 6.0))
        y0 = max(cursors[side],
                 (height - pose.mount_height) * 2 * pose.focal_length / pose.image_height + 2.0,
                 (offset + depth) / tan_half + 2.0)
        if y0 + length > max_depth:
            continue
        cursors[side] = y0 + length + gap
        corners = _box(side * offset, side * (offset + depth), y0, length)
        local = [_to_world(pose, c) for c in corners]
        buildings.append(BuildingFootprint(f"b{k:02d}", tuple(local), true_height=round(height, 3)))

    trees = _random_trees(rng, buildings, pose, n_trees)
    return SceneSpec(
        seed=seed,
        buildings=tuple(buildings),
        camera=pose,
        gps_noise_sigma=gps_noise_sigma,
        trees=trees,
        edge_noise=edge_noise or EdgeNoise(),
    )


def _to_world(pose: CameraPose, local: Point2D) -> Point2D:
    """Camera-aligned (right, ahead) offset to map coordinates"""
    right, forward = pose.right, pose.forward
    return (pose.position[0] + local[0] * right[0] + local[1] * forward[0],
            pose.position[1] + local[0] * right[1] + local[1] * forward[1])


def _random_trees(rng: np.random.Generator, buildings: Sequence[BuildingFootprint],
                  pose: CameraPose, count: int) -> Tuple[Tree, ...]:
    """Trees centred on the middle of a random building's nearest roof edge"""
    trees = []
    for _ in range(count):
        if not buildings:
            break
        fp = buildings[int(rng.integers(len(buildings)))]
        kinds = roofline_kinds(fp, pose)
        if not kinds:
            continue
        _, i, j = kinds[int(rng.integers(len(kinds)))]
        a = _project_raster(pose, roof_point(fp.corners[i], fp.true_height, pose))
        b = _project_raster(pose, roof_point(fp.corners[j], fp.true_height, pose))
        if a is None or b is None:
            continue
        t = float(rng.uniform(0.35, 0.65))
        center = (a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1]))
        trees.append(Tree(center=center, radius=float(rng.uniform(3.0, 8.0))))
    return tuple(trees)


def tall_building_spec(seed: int = 0, height: float = 120.0, distance: float = 250.0,
                       pitch_deg: float = 25.0, yaw_deg: float = 20.0) -> SceneSpec:
    """Single tower seen from an upward-looking camera.

    The footprint is a 30 m square rotated by yaw_deg, its nearest corner
    distance metres ahead and slightly right of the optical axis.
    """
    pose = CameraPose(position=(0.0, 0.0), heading=0.0, pitch=math.radians(pitch_deg))
    yaw = math.radians(yaw_deg)
    base = (12.0, distance)
    square = [(0.0, 0.0), (30.0, 0.0), (30.0, 30.0), (0.0, 30.0)]
    corners = tuple(
        (base[0] + x * math.cos(yaw) - y * math.sin(yaw), base[1] + x * math.sin(yaw) + y * math.cos(yaw))
        for x, y in square
    )
    tower = BuildingFootprint("tower", corners, true_height=height)
    return SceneSpec(seed=seed, buildings=(tower,), camera=pose)


def step_back(spec: SceneSpec, metres: float) -> SceneSpec:
    """Same block with the camera moved back along its heading"""
    pose = spec.camera
    forward = pose.forward
    moved = pose.moved_to((pose.position[0] - metres * forward[0], pose.position[1] - metres * forward[1]))
    return replace(spec, camera=moved)


def unoccluded_buildings(rendered: RenderedScene, min_fraction: float = 0.99) -> List[str]:
    """Ids of buildings with a roofline at their nearest corner drawn in full"""
    truth = rendered.truth
    found = []
    for fp in rendered.spec.buildings:
        if truth.fully_occluded.get(fp.id, False):
            continue
        try:
            kinds = roofline_kinds(fp, truth.pose)
        except GeometryError:
            continue
        for _, i, j in kinds:
            line = truth.roofline(fp.id, i, j)
            if line is not None and line.visible_fraction >= min_fraction:
                found.append(fp.id)
                break
    return found


# Footprint files

def _parse_document(text: str, source: str) -> Dict[str, Any]:
    try:
        document = json.loads(text)
    except json.JSONDecodeError as e:
        raise FootprintParseError(f"{source}: invalid JSON: {e.msg}", line=e.lineno) from e
    try:
        jsonschema.validate(document, FOOTPRINT_SCHEMA)
    except jsonschema.ValidationError as e:
        where = ".".join(str(p) for p in e.absolute_path) or "<root>"
        raise FootprintParseError(f"{source}: {e.message}", line=_line_of(text, e.absolute_path),
                                  field=where) from e
    return document


def _line_of(text: str, path: Sequence[Any]) -> Optional[int]:
    """Best-effort line of the innermost named key on a schema error path"""
    names = [p for p in path if isinstance(p, str)]
    if not names:
        return None
    needle = f'"{names[-1]}"'
    for number, line in enumerate(text.splitlines(), start=1):
        if needle in line:
            return number
    return None


def _footprint(entry: Dict[str, Any]) -> BuildingFootprint:
    corners = [tuple(c) for c in entry["corners"]]
    ring = Polygon(corners)
    if ring.is_valid and ring.area > 0 and not ring.exterior.is_ccw:
        corners = corners[::-1]
    return BuildingFootprint(entry["id"], tuple(corners), entry.get("height_m"))


def _camera(entry: Dict[str, Any]) -> CameraPose:
    width, height = entry.get("image", [640, 640])
    return CameraPose(
        position=(float(entry["position"][0]), float(entry["position"][1])),
        heading=math.radians(entry["heading_deg"]),
        pitch=math.radians(entry.get("pitch_deg", 0.0)),
        focal_length=float(entry.get("focal_px", 320.0)),
        image_width=int(width),
        image_height=int(height),
        mount_height=float(entry.get("mount_m", 2.5)),
    )


def read_footprint_file(path: Union[str, Path]) -> Tuple[List[BuildingFootprint], Optional[CameraPose], Dict[str, Any]]:
    """Parse a footprint file into footprints, the optional camera and the raw document.

    Raises:
        FootprintParseError: malformed JSON or schema violation.
        FootprintValidationError: a polygon is not simple or an id repeats.
    """
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    document = _parse_document(text, str(path))
    buildings = [_footprint(entry) for entry in document["buildings"]]
    seen = set()
    for fp in buildings:
        if fp.id in seen:
            raise FootprintValidationError(fp.id, "duplicate building id")
        seen.add(fp.id)
    camera = _camera(document["camera"]) if "camera" in document else None
    return buildings, camera, document


def load_footprints(path: Union[str, Path]) -> List[BuildingFootprint]:
    """Counter-clockwise footprints from a footprint file; clockwise rings are reversed"""
    return read_footprint_file(path)[0]


def footprint_document(buildings: Sequence[BuildingFootprint], camera: Optional[CameraPose]) -> Dict[str, Any]:
    document: Dict[str, Any] = {"buildings": []}
    for fp in buildings:
        entry: Dict[str, Any] = {"id": fp.id}
        if fp.true_height is not None:
            entry["height_m"] = fp.true_height
        entry["corners"] = [list(c) for c in fp.corners]
        document["buildings"].append(entry)
    if camera is not None:
        document["camera"] = {
            "position": list(camera.position),
            "heading_deg": math.degrees(camera.heading),
            "pitch_deg": math.degrees(camera.pitch),
            "focal_px": camera.focal_length,
            "image": [camera.image_width, camera.image_height],
            "mount_m": camera.mount_height,
        }
    return document


def save_scene(rendered: RenderedScene, out_dir: Union[str, Path]) -> Path:
    """Write scene.json, edge_map.pgm and tree_mask.pgm into out_dir"""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    spec = rendered.spec
    document = footprint_document(spec.buildings, spec.camera)
    document["seed"] = spec.seed
    document["gps_noise_sigma"] = spec.gps_noise_sigma
    document["trees"] = [{"center": list(t.center), "radius": t.radius} for t in spec.trees]
    document["edge_noise"] = {"salt": spec.edge_noise.salt, "jitter": spec.edge_noise.jitter}
    document["gps_position"] = list(rendered.noisy_pose.position)
    with open(out_dir / "scene.json", "w", encoding="utf-8") as f:
        json.dump(document, f, indent=2, sort_keys=True)
        f.write("\n")
    rendered.edge_map.write_pgm(out_dir / "edge_map.pgm")
    write_mask(out_dir / "tree_mask.pgm", rendered.tree_mask)
    return out_dir


def load_scene_spec(path: Union[str, Path]) -> SceneSpec:
    """SceneSpec from a scene.json written by save_scene"""
    buildings, camera, document = read_footprint_file(path)
    if camera is None:
        raise FootprintParseError(f"{path}: scene file needs a camera", field="camera")
    noise = document.get("edge_noise", {})
    return SceneSpec(
        seed=int(document.get("seed", 0)),
        buildings=tuple(buildings),
        camera=camera,
        gps_noise_sigma=float(document.get("gps_noise_sigma", 0.0)),
        trees=tuple(Tree(tuple(t["center"]), float(t["radius"])) for t in document.get("trees", [])),
        edge_noise=EdgeNoise(float(noise.get("salt", 0.0)), int(noise.get("jitter", 0))),
    )


def load_scene(scene_dir: Union[str, Path]) -> RenderedScene:
    """Re-render a saved scene for its ground truth, keeping the stored rasters"""
    scene_dir = Path(scene_dir)
    rendered = render(load_scene_spec(scene_dir / "scene.json"))
    edge_path = scene_dir / "edge_map.pgm"
    tree_path = scene_dir / "tree_mask.pgm"
    edge_map = EdgeMap(read_gray(edge_path)) if edge_path.exists() else rendered.edge_map
    tree_mask = read_mask(tree_path) if tree_path.exists() else rendered.tree_mask
    return replace(rendered, edge_map=edge_map, tree_mask=tree_mask)


# Patch datasets

@dataclass(frozen=True)
class DatasetSummary:
    root: Path
    counts: Dict[str, Dict[str, int]]


def _truth_corner_rasters(rendered: RenderedScene) -> np.ndarray:
    truth = rendered.truth
    points = [truth.corner_raster(c.building_id, c.index) for c in truth.corners]
    points = [p for p in points if p is not None]
    return np.asarray(points, dtype=float).reshape(-1, 2)


def _far_from(points: np.ndarray, p: Sequence[float], radius: float) -> bool:
    if len(points) == 0:
        return True
    return bool(np.min(np.hypot(points[:, 0] - p[0], points[:, 1] - p[1])) > radius)


def scene_patches(rendered: RenderedScene, config: PipelineConfig,
                  rng: np.random.Generator) -> List[Tuple[np.ndarray, str]]:
    """Labeled corner and roofline patches of one rendered scene, negatives included"""
    edge_map = rendered.edge_map
    truth = rendered.truth
    pose = truth.pose
    out: List[Tuple[np.ndarray, str]] = []
    positives_corner: List[Point2D] = []
    positives_roofline: List[LineSegment] = []

    for fp in rendered.spec.buildings:
        try:
            roles = classify_corner_roles(fp, pose)
            kinds = roofline_kinds(fp, pose)
        except GeometryError:
            continue
        side = building_side(fp, pose, roles[CornerRole.CN])
        for role in (CornerRole.CN, CornerRole.CZ):
            corner = truth.corner(fp.id, roles[role])
            position = truth.corner_raster(fp.id, roles[role])
            if corner is None or not corner.visible or position is None:
                continue
            out.append((crop_patch(edge_map, position, config.patch_px), corner_type_for(role, side)))
            positives_corner.append(position)
        for kind, i, j in kinds:
            line = truth.roofline(fp.id, i, j)
            a = truth.corner_raster(fp.id, i)
            b = truth.corner_raster(fp.id, j)
            if line is None or line.visible_fraction < 0.5 or a is None or b is None:
                continue
            p0, p1 = round_pixel(a), round_pixel(b)
            if not (edge_map.contains(p0) and edge_map.contains(p1)) or p0 == p1:
                continue
            lam, omega = edgeness(edge_map, p0, p1)
            segment = LineSegment(p0, p1, lam, omega)
            out.append((extract_roofline_patch(edge_map, segment, config.strip_half_height, config.patch_px), kind))
            positives_roofline.append(segment)

    corners = _truth_corner_rasters(rendered)
    for center in _corner_negatives(rng, positives_corner, corners, edge_map):
        out.append((crop_patch(edge_map, center, config.patch_px), CORNER_NEGATIVE))
    for segment in _roofline_negatives(rng, positives_roofline, edge_map):
        out.append((extract_roofline_patch(edge_map, segment, config.strip_half_height, config.patch_px),
                    ROOFLINE_NEGATIVE))
    return out


def _corner_negatives(rng: np.random.Generator, positives: Sequence[Point2D], corners: np.ndarray,
                      edge_map: EdgeMap) -> List[Pixel]:
    """Near misses above/below true corners plus random raster positions"""
    wanted = max(2, 2 * len(positives))
    found: List[Pixel] = []
    for p in positives:
        shift = int(rng.integers(6, 21)) * (1 if rng.random() < 0.5 else -1)
        candidate = round_pixel((p[0], p[1] + shift))
        if edge_map.contains(candidate) and _far_from(corners, candidate, NEGATIVE_EXCLUSION_PX):
            found.append(candidate)
    attempts = 0
    while len(found) < wanted and attempts < 50 * wanted:
        attempts += 1
        candidate = (int(rng.integers(edge_map.width)), int(rng.integers(edge_map.height)))
        if _far_from(corners, candidate, NEGATIVE_EXCLUSION_PX):
            found.append(candidate)
    return found


def _roofline_negatives(rng: np.random.Generator, positives: Sequence[LineSegment],
                        edge_map: EdgeMap) -> List[LineSegment]:
    """Vertically shifted copies of true rooflines plus random segments"""
    wanted = max(2, 2 * len(positives))
    found: List[LineSegment] = []
    for s in positives:
        shift = int(rng.integers(4, 13)) * (1 if rng.random() < 0.5 else -1)
        p0, p1 = (s.p0[0], s.p0[1] + shift), (s.p1[0], s.p1[1] + shift)
        if edge_map.contains(p0) and edge_map.contains(p1):
            found.append(LineSegment(p0, p1, *edgeness(edge_map, p0, p1)))
    attempts = 0
    while len(found) < wanted and attempts < 50 * wanted:
        attempts += 1
        p0 = (int(rng.integers(edge_map.width)), int(rng.integers(edge_map.height)))
        theta = float(rng.uniform(-math.pi, math.pi))
        length = float(rng.uniform(20.0, 120.0))
        p1 = round_pixel((p0[0] + length * math.cos(theta), p0[1] - length * math.sin(theta)))
        if edge_map.contains(p1) and p1 != p0:
            found.append(LineSegment(p0, p1, *edgeness(edge_map, p0, p1)))
    return found


def generate_patch_dataset(specs: Sequence[SceneSpec], out_dir: Union[str, Path],
                           config: Optional[PipelineConfig] = None,
                           train_fraction: float = 0.8) -> DatasetSummary:
    """Render scenes and write train/ and test/ patch directories.

    Scenes are split in order: the first round(train_fraction * n) go to
    train, the rest to test, so the two splits never share a block.
    Each split holds patches/*.pgm and a manifest.tsv of path<TAB>label.
    """
    if not specs:
        raise EmptyInputError("no scenes to generate patches from")
    config = config or PipelineConfig()
    root = Path(out_dir)
    n_train = max(1, int(round(train_fraction * len(specs)))) if len(specs) > 1 else 1
    rows: Dict[str, List[Tuple[str, str]]] = {"train": [], "test": []}
    for number, spec in enumerate(specs):
        split = "train" if number < n_train else "test"
        patch_dir = root / split / "patches"
        patch_dir.mkdir(parents=True, exist_ok=True)
        rendered = render(spec)
        rng = np.random.default_rng([spec.seed, 3])
        for serial, (patch, label) in enumerate(scene_patches(rendered, config, rng)):
            name = f"s{number:04d}_{serial:04d}.pgm"
            write_gray(patch_dir / name, np.clip(np.floor(patch + 0.5), 0, 255))
            rows[split].append((f"patches/{name}", label))

    counts: Dict[str, Dict[str, int]] = {}
    for split, entries in rows.items():
        split_dir = root / split
        split_dir.mkdir(parents=True, exist_ok=True)
        frame = pd.DataFrame(entries, columns=["path", "label"])
        frame.to_csv(split_dir / MANIFEST_NAME, sep="\t", header=False, index=False, lineterminator="\n")
        counts[split] = {str(k): int(v) for k, v in frame["label"].value_counts().sort_index().items()}
    logger.info("patch dataset written", root=str(root), scenes=len(specs), counts=counts)
    return DatasetSummary(root=root, counts=counts)


def read_manifest(split_dir: Union[str, Path]) -> pd.DataFrame:
    split_dir = Path(split_dir)
    path = split_dir / MANIFEST_NAME
    if not path.exists():
        raise InputError(f"no {MANIFEST_NAME} in {split_dir}")
    return pd.read_csv(path, sep="\t", header=None, names=["path", "label"], dtype=str,
                       keep_default_na=False)


def read_patch_set(split_dir: Union[str, Path]) -> Tuple[np.ndarray, List[str]]:
    """(N, size, size) float patches in 0..255 and their labels"""
    split_dir = Path(split_dir)
    manifest = read_manifest(split_dir)
    if manifest.empty:
        raise EmptyInputError(f"manifest in {split_dir} lists no patches")
    patches = np.stack([read_gray(split_dir / p).astype(float) for p in manifest["path"]])
    return patches, manifest["label"].tolist()
