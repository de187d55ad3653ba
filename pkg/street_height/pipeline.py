"""
Street Height Estimation - Pipeline
Camera calibration from classified corners, occlusion-aware roofline selection
and per-building height reports, plus the tall-building and multi-sample runs
"""

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Protocol, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from skimage.draw import polygon

from .calibration import (
    CornerObservation,
    accept_calibration,
    bearing_from_pixel,
    calibrate_two_corners,
    calibration_resolution,
    multi_sample_height,
)
from .candidates import (
    CornerCandidate,
    RooflineCandidate,
    corner_candidates,
    heights_agree,
    roofline_candidates,
)
from .config import PipelineConfig
from .edgemap import EdgeMap, LineSegment, line_pixels, write_rgb
from .embedding import REJECT, ModelBundle
from .errors import (
    ErrorCategorizer,
    GeometryError,
    InputError,
    NonHorizontalPoseError,
    StreetHeightError,
)
from .geometry import (
    BuildingFootprint,
    CameraPose,
    CornerRole,
    WorldPoint,
    classify_corner_roles,
    distance_along_axis,
    front_faces,
    height_from_roofline,
    nearest_distance,
    project_to_raster,
    raster_to_image,
    roof_point,
)
from .logging_config import RunContext, get_logger
from .ranking import (
    BuildingScope,
    OcclusionMask,
    ScoredCandidate,
    order_buildings,
    refine_roofline,
    score_corner_candidates,
    score_roofline_candidates,
    update_mask,
)
from .rectify import pitch_homography, rectify_image, rectify_mask
from .scene import RenderedScene, SceneSpec, SceneTruth, raster_segment, render, step_back

logger = get_logger(__name__)

REPORT_SCHEMA = 1
CALIBRATION_ROLES = (CornerRole.CN, CornerRole.CZ, CornerRole.CX)
STATUS_OK = "ok"
STATUS_NO_CORNER = "no-corner"
STATUS_OCCLUDED = "fully-occluded"
STATUS_WITHIN_RESOLUTION = "within-resolution"
SUBPIXEL_ROWS = 2
SUBPIXEL_END_TRIM = 3


@dataclass(frozen=True, eq=False)
class SceneInputs:
    """Everything the pipeline reads: rasters, footprints and the GPS pose"""
    edge_map: EdgeMap
    tree_mask: np.ndarray
    buildings: Tuple[BuildingFootprint, ...]
    pose: CameraPose
    truth: Optional[SceneTruth] = None

    def __post_init__(self):
        object.__setattr__(self, "buildings", tuple(self.buildings))
        if self.tree_mask.shape != self.edge_map.shape:
            raise InputError("tree mask and edge map dimensions differ")
        if self.edge_map.shape != (self.pose.image_height, self.pose.image_width):
            raise InputError(
                f"edge map is {self.edge_map.width}x{self.edge_map.height}, camera expects "
                f"{self.pose.image_width}x{self.pose.image_height}"
            )

    @classmethod
    def from_rendered(cls, rendered: RenderedScene) -> "SceneInputs":
        return cls(
            edge_map=rendered.edge_map,
            tree_mask=rendered.tree_mask,
            buildings=rendered.spec.buildings,
            pose=rendered.noisy_pose,
            truth=rendered.truth,
        )

    def building(self, building_id: str) -> BuildingFootprint:
        for fp in self.buildings:
            if fp.id == building_id:
                return fp
        raise InputError(f"unknown building '{building_id}'")


class CandidateClassifier(Protocol):
    def corner_labels(self, candidates: Sequence[CornerCandidate]) -> List[str]:
        ...

    def roofline_labels(self, candidates: Sequence[RooflineCandidate]) -> List[str]:
        ...


class OracleClassifier:
    """Labels candidates from rendered ground truth instead of a learned model.

    A corner candidate keeps its expected type when its truth corner is
    visible and the localized pixel lies within tolerance of the truth
    projection. A roofline keeps its kind when both endpoints lie within
    tolerance of the truth roof edge and that edge is at least partly visible.
    Truth is projected through the level version of the true pose.
    """

    def __init__(self, truth: SceneTruth, buildings: Sequence[BuildingFootprint], tolerance_px: float = 2.0):
        self.truth = truth
        self.pose = truth.pose.leveled()
        self.footprints = {fp.id: fp for fp in buildings}
        self.tolerance_px = tolerance_px

    def _truth_raster(self, building_id: str, index: int) -> Optional[Tuple[float, float]]:
        fp = self.footprints.get(building_id)
        height = self.truth.heights.get(building_id)
        if fp is None or height is None:
            return None
        point = roof_point(fp.corners[index], height, self.pose)
        if distance_along_axis(self.pose, point) <= 0:
            return None
        return project_to_raster(self.pose, point)

    def _near(self, pixel: Sequence[float], target: Optional[Tuple[float, float]]) -> bool:
        return target is not None and math.hypot(pixel[0] - target[0], pixel[1] - target[1]) <= self.tolerance_px

    def corner_labels(self, candidates: Sequence[CornerCandidate]) -> List[str]:
        labels = []
        for c in candidates:
            corner = self.truth.corner(c.building_id, c.corner_index)
            valid = (corner is not None and corner.visible
                     and self._near(c.located, self._truth_raster(c.building_id, c.corner_index)))
            labels.append(c.corner_type if valid else REJECT)
        return labels

    def roofline_labels(self, candidates: Sequence[RooflineCandidate]) -> List[str]:
        labels = []
        for c in candidates:
            i, j = c.corners
            line = self.truth.roofline(c.building_id, i, j)
            valid = (line is not None and line.visible_fraction > 0
                     and self._near(c.segment.p0, self._truth_raster(c.building_id, i))
                     and self._near(c.segment.p1, self._truth_raster(c.building_id, j)))
            labels.append(c.kind if valid else REJECT)
        return labels


class LearnedClassifier:
    """Open-set classification of candidate patches with trained models"""

    def __init__(self, bundle: ModelBundle):
        self.bundle = bundle

    @classmethod
    def from_directory(cls, directory: Union[str, Path]) -> "LearnedClassifier":
        return cls(ModelBundle.load(directory))

    def corner_labels(self, candidates: Sequence[CornerCandidate]) -> List[str]:
        if not candidates:
            return []
        return self.bundle.corner.classify(np.stack([c.patch for c in candidates]))

    def roofline_labels(self, candidates: Sequence[RooflineCandidate]) -> List[str]:
        if not candidates:
            return []
        return self.bundle.roofline.classify(np.stack([c.patch for c in candidates]))


def make_classifier(config: PipelineConfig, inputs: SceneInputs) -> CandidateClassifier:
    if config.uses_oracle:
        if inputs.truth is None:
            raise InputError("oracle classifier needs a rendered scene with ground truth")
        logger.debug("using oracle classifier", tolerance_px=config.oracle_tolerance_px)
        return OracleClassifier(inputs.truth, inputs.buildings, config.oracle_tolerance_px)
    return LearnedClassifier.from_directory(config.classifier)


# Reports

@dataclass
class BuildingEstimate:
    building_id: str
    height: Optional[float] = None
    truth: Optional[float] = None
    status: List[str] = field(default_factory=list)
    roofline: Optional[Dict[str, Any]] = None
    samples: int = 1

    @property
    def abs_error(self) -> Optional[float]:
        if self.height is None or self.truth is None:
            return None
        return abs(self.height - self.truth)

    @property
    def rel_error(self) -> Optional[float]:
        error = self.abs_error
        if error is None or not self.truth:
            return None
        return error / self.truth

    def to_dict(self) -> Dict[str, Any]:
        return {
            "id": self.building_id,
            "height_m": self.height,
            "truth_m": self.truth,
            "abs_err_m": self.abs_error,
            "rel_err": self.rel_error,
            "status": list(self.status),
            "roofline": self.roofline,
            "samples": self.samples,
        }


@dataclass
class CalibrationReport:
    gps_position: Tuple[float, float]
    position: Tuple[float, float]
    computed_position: Optional[Tuple[float, float]] = None
    displacement: Optional[float] = None
    resolution: Optional[float] = None
    accepted: bool = False
    reference_corners: List[Dict[str, Any]] = field(default_factory=list)
    status: str = STATUS_OK

    def to_dict(self) -> Dict[str, Any]:
        return {
            "gps_position": list(self.gps_position),
            "position": list(self.position),
            "computed_position": list(self.computed_position) if self.computed_position else None,
            "displacement_m": self.displacement,
            "resolution_m": self.resolution,
            "accepted": self.accepted,
            "reference_corners": self.reference_corners,
            "status": self.status,
        }


def error_bands(frame: pd.DataFrame) -> Dict[str, Any]:
    """Shares of buildings over fixed absolute/relative error limits, plus medians"""
    scored = frame.dropna(subset=["abs_err_m"])
    summary: Dict[str, Any] = {"evaluated": int(len(scored))}
    if scored.empty:
        return summary
    for limit in (2, 3, 4):
        summary[f"share_abs_over_{limit}m"] = float((scored["abs_err_m"] > limit).mean())
    summary["median_abs_err_m"] = float(scored["abs_err_m"].median())
    summary["median_rel_err"] = float(scored["rel_err"].median())
    tall = scored[scored["truth_m"] > 50]
    summary["tall_evaluated"] = int(len(tall))
    if not tall.empty:
        for limit in (5, 10):
            summary[f"tall_share_abs_over_{limit}m"] = float((tall["abs_err_m"] > limit).mean())
            summary[f"tall_share_rel_over_{limit}pct"] = float((tall["rel_err"] > limit / 100).mean())
    return summary


def _rounded(value: Any, digits: int = 6) -> Any:
    if isinstance(value, float):
        if not math.isfinite(value):
            return None
        rounded = round(value, digits)
        return 0.0 if rounded == 0 else rounded
    if isinstance(value, dict):
        return {k: _rounded(v, digits) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_rounded(v, digits) for v in value]
    if isinstance(value, np.generic):
        return _rounded(value.item(), digits)
    return value


@dataclass
class HeightReport:
    buildings: List[BuildingEstimate]
    calibration: CalibrationReport
    method: str = "corner"

    def estimate(self, building_id: str) -> Optional[BuildingEstimate]:
        for b in self.buildings:
            if b.building_id == building_id:
                return b
        return None

    def to_frame(self) -> pd.DataFrame:
        rows = [b.to_dict() for b in sorted(self.buildings, key=lambda b: b.building_id)]
        frame = pd.DataFrame(rows, columns=["id", "height_m", "truth_m", "abs_err_m", "rel_err",
                                            "status", "roofline", "samples"])
        return frame.astype({"height_m": float, "truth_m": float, "abs_err_m": float, "rel_err": float})

    def summary(self) -> Dict[str, Any]:
        return error_bands(self.to_frame())

    def to_dict(self) -> Dict[str, Any]:
        return _rounded({
            "schema": REPORT_SCHEMA,
            "method": self.method,
            "buildings": [b.to_dict() for b in sorted(self.buildings, key=lambda b: b.building_id)],
            "calibration": self.calibration.to_dict(),
            "summary": self.summary(),
        })

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def write(self, path: Union[str, Path]) -> None:
        with open(path, "w", encoding="utf-8") as f:
            f.write(self.to_json())


# Stage 2: corners and calibration

def _with_tau(candidates: List[CornerCandidate], step: float) -> List[CornerCandidate]:
    """Attach tau: validated corners of the same building agreeing on assumed height, capped at 3"""
    out = []
    for c in candidates:
        agreeing = {
            other.corner_index for other in candidates
            if other.building_id == c.building_id and other.corner_index != c.corner_index
            and heights_agree(other.assumed_height, c.assumed_height, step)
        }
        out.append(replace(c, features=replace(c.features, tau=min(len(agreeing), 3))))
    return out


def validated_corners(inputs: SceneInputs, pose: CameraPose, classifier: CandidateClassifier,
                      config: PipelineConfig, context: Optional[RunContext] = None) -> List[CornerCandidate]:
    """Corner candidates of every building that the classifier accepts as their expected type"""
    candidates: List[CornerCandidate] = []
    for fp in inputs.buildings:
        try:
            candidates.extend(corner_candidates(fp, pose, inputs.edge_map, config, roles=CALIBRATION_ROLES))
        except GeometryError as e:
            if context is not None:
                context.log_debug("no corner candidates", building=fp.id, reason=str(e))
    labels = classifier.corner_labels(candidates)
    kept = [c for c, label in zip(candidates, labels) if label == c.corner_type]
    if context is not None:
        context.log_info("corner candidates classified", total=len(candidates), validated=len(kept),
                         rejected=len(candidates) - len(kept))
    return _with_tau(kept, config.height_step)


def top_distinct_corners(ranked: Sequence[ScoredCandidate], count: int = 2) -> List[CornerCandidate]:
    chosen: List[CornerCandidate] = []
    seen = set()
    for scored in ranked:
        c = scored.candidate
        key = (c.building_id, c.corner_index)
        if key in seen:
            continue
        seen.add(key)
        chosen.append(c)
        if len(chosen) == count:
            break
    return chosen


def calibrate_camera(inputs: SceneInputs, corners: Sequence[CornerCandidate], config: PipelineConfig,
                     context: Optional[RunContext] = None) -> Tuple[CameraPose, CalibrationReport]:
    """Reposition the camera from the two top-ranked validated corners.

    The computed position replaces the GPS position only when it lies within
    the acceptance radius; otherwise the GPS pose is kept. An accepted position
    closer to the GPS one than the corner pixels can resolve also keeps the
    GPS pose, with status "within-resolution".
    """
    gps = inputs.pose
    report = CalibrationReport(gps_position=gps.position, position=gps.position)
    if len(corners) < 2:
        report.status = STATUS_NO_CORNER
        return gps, report
    ranked = score_corner_candidates(list(corners))
    reference = top_distinct_corners(ranked)
    if len(reference) < 2:
        report.status = STATUS_NO_CORNER
        return gps, report

    observations = []
    for c in reference:
        u = raster_to_image(gps, c.located[0], c.located[1]).u
        fp = inputs.building(c.building_id)
        observations.append(CornerObservation(fp.corners[c.corner_index], bearing_from_pixel(gps, u)))
        report.reference_corners.append({
            "building": c.building_id, "corner": c.corner_index, "pixel": list(c.located), "type": c.corner_type,
        })
    try:
        computed = calibrate_two_corners(observations[0], observations[1], gps.heading)
        resolution = calibration_resolution(observations[0], observations[1], gps.heading,
                                            gps.focal_length, config.calibration_resolution_px)
    except GeometryError as e:
        report.status = _error_status(e)
        if context is not None:
            context.log_warning("calibration degenerate, keeping GPS pose", reason=str(e))
        return gps, report

    result = accept_calibration(computed, gps.position, config.calibration_threshold_m)
    report.computed_position = (float(computed[0]), float(computed[1]))
    report.displacement = result.displacement
    report.resolution = resolution
    report.accepted = result.accepted
    report.position = result.position
    if result.accepted and result.displacement <= resolution:
        report.status = STATUS_WITHIN_RESOLUTION
        report.position = gps.position
    if context is not None:
        context.log_info("camera calibrated", displacement_m=round(result.displacement, 4),
                         resolution_m=round(resolution, 4), accepted=result.accepted, status=report.status)
    return gps.moved_to(report.position), report


# Stage 3: rooflines and heights

def facade_raster(fp: BuildingFootprint, pose: CameraPose, height: float, shape: Tuple[int, int]) -> np.ndarray:
    """Pixels covered by the building's camera-facing facades up to height"""
    mask = np.zeros(shape, dtype=bool)
    for i, j in front_faces(fp, pose):
        quad = []
        for corner, z in ((i, height), (j, height), (j, 0.0), (i, 0.0)):
            point = roof_point(fp.corners[corner], z, pose)
            if distance_along_axis(pose, point) <= 0:
                break
            quad.append(project_to_raster(pose, point))
        if len(quad) < 4:
            continue
        rr, cc = polygon([q[1] for q in quad], [q[0] for q in quad], shape=shape)
        mask[rr, cc] = True
        for k in range(4):
            edge = raster_segment(quad[k], quad[(k + 1) % 4], shape)
            mask[edge[:, 1], edge[:, 0]] = True
    return mask


def segment_raster(segment: LineSegment, shape: Tuple[int, int]) -> np.ndarray:
    mask = np.zeros(shape, dtype=bool)
    pixels = line_pixels(segment.p0, segment.p1, shape)
    mask[pixels[:, 1], pixels[:, 0]] = True
    return mask


def subpixel_row(edge_map: EdgeMap, occlusion: np.ndarray, segment: LineSegment, col: float) -> float:
    """Row of the roofline at col from a weighted line fit to nearby edge pixels.

    Uses edge pixels within SUBPIXEL_ROWS rows of the segment, skipping its
    end pixels where corner lines join. Falls back to the segment's own row.
    """
    pixels = line_pixels(segment.p0, segment.p1, edge_map.shape)
    fallback = float(segment.p0[1])
    if len(pixels) <= 2 * SUBPIXEL_END_TRIM + 2:
        return fallback
    core = pixels[SUBPIXEL_END_TRIM:len(pixels) - SUBPIXEL_END_TRIM]
    cols, rows, weights = [], [], []
    for offset in range(-SUBPIXEL_ROWS, SUBPIXEL_ROWS + 1):
        r = core[:, 1] + offset
        inside = (r >= 0) & (r < edge_map.height)
        c = core[inside, 0]
        r = r[inside]
        w = edge_map.pixels[r, c].astype(float) * ~occlusion[r, c]
        cols.append(c)
        rows.append(r)
        weights.append(w)
    cols = np.concatenate(cols).astype(float)
    rows = np.concatenate(rows).astype(float)
    weights = np.concatenate(weights)
    used = weights > 0
    if used.sum() < 2 or np.ptp(cols[used]) < 1:
        return fallback
    slope, intercept = np.polyfit(cols[used], rows[used], 1, w=np.sqrt(weights[used]))
    return float(slope * col + intercept)


def _roofline_tau(candidate: RooflineCandidate, roles: Dict[CornerRole, int],
                  corner_heights: Dict[int, List[float]], step: float) -> int:
    agreeing = {
        index for index in set(roles.values())
        if any(heights_agree(h, candidate.assumed_height, step) for h in corner_heights.get(index, []))
    }
    return min(len(agreeing), 3)


def _select_roofline(ranked_by_kind: Dict[str, List[ScoredCandidate]], kinds: Sequence[str]) -> RooflineCandidate:
    """Top candidate of the kind whose top candidate spans the most pixels"""
    best = None
    for kind in kinds:
        if kind not in ranked_by_kind:
            continue
        top = ranked_by_kind[kind][0].candidate
        if best is None or (top.features.lam, top.features.omega) > (best.features.lam, best.features.omega):
            best = top
    return best


def _roofline_summary(c: RooflineCandidate, row: float) -> Dict[str, Any]:
    return {
        "kind": c.kind,
        "corners": list(c.corners),
        "p0": list(c.segment.p0),
        "p1": list(c.segment.p1),
        "row": row,
        "assumed_height_m": c.assumed_height,
        "lambda": c.features.lam,
        "omega": c.features.omega,
        "tau": c.features.tau,
    }


def estimate_building(fp: BuildingFootprint, inputs: SceneInputs, pose: CameraPose,
                      classifier: CandidateClassifier, config: PipelineConfig, mask: OcclusionMask,
                      corner_heights: Dict[int, List[float]]) -> Tuple[BuildingEstimate, Optional[BuildingScope]]:
    """Height of one building from its best classified roofline, and its scope for the mask"""
    estimate = BuildingEstimate(fp.id, truth=fp.true_height)
    if not corner_heights:
        estimate.status.append(STATUS_NO_CORNER)
    roles = classify_corner_roles(fp, pose)
    distance = nearest_distance(fp, pose)
    occlusion = mask.raster_for(distance)

    refined: List[RooflineCandidate] = []
    for c in roofline_candidates(fp, pose, inputs.edge_map, config):
        features = refine_roofline(c, occlusion, inputs.tree_mask, inputs.edge_map, config.edgeness_variant)
        if features.lam == 0:
            continue
        refined.append(replace(c, features=replace(c.features, lam=float(features.lam), omega=features.omega)))
    labels = classifier.roofline_labels(refined)
    validated = [
        replace(c, features=replace(c.features, tau=_roofline_tau(c, roles, corner_heights, config.height_step)))
        for c, label in zip(refined, labels) if label == c.kind
    ]
    if not validated:
        estimate.status.append(STATUS_OCCLUDED)
        return estimate, None

    kinds: List[str] = []
    by_kind: Dict[str, List[RooflineCandidate]] = {}
    for c in validated:
        if c.kind not in by_kind:
            kinds.append(c.kind)
        by_kind.setdefault(c.kind, []).append(c)
    ranked = {kind: score_roofline_candidates(group) for kind, group in by_kind.items()}
    chosen = _select_roofline(ranked, kinds)
    return _finish(fp, estimate, chosen, inputs, pose, config, occlusion, distance)


def _finish(fp: BuildingFootprint, estimate: BuildingEstimate, chosen: RooflineCandidate, inputs: SceneInputs,
            pose: CameraPose, config: PipelineConfig, occlusion: np.ndarray,
            distance: float) -> Tuple[BuildingEstimate, BuildingScope]:
    cn = chosen.corners[0]
    if config.subpixel_refine:
        row = subpixel_row(inputs.edge_map, occlusion, chosen.segment, float(chosen.segment.p0[0]))
    else:
        row = float(chosen.segment.p0[1])
    h_r = pose.image_height / 2 - row
    d_hat = distance_along_axis(pose, WorldPoint(*fp.corners[cn], 0.0))
    estimate.height = height_from_roofline(h_r, d_hat, pose)
    estimate.roofline = _roofline_summary(chosen, row)
    estimate.status.insert(0, STATUS_OK)
    shape = inputs.edge_map.shape
    scope = BuildingScope(
        building_id=fp.id,
        distance=distance,
        quad=facade_raster(fp, pose, estimate.height, shape),
        roofline=segment_raster(chosen.segment, shape),
    )
    return estimate, scope


def _error_status(error: Exception) -> str:
    return f"error:{ErrorCategorizer.categorize_error(error).split('_')[0].lower()}"


def estimate_heights(inputs: SceneInputs, pose: CameraPose, classifier: CandidateClassifier,
                     config: PipelineConfig, corners: Sequence[CornerCandidate],
                     context: Optional[RunContext] = None) -> List[BuildingEstimate]:
    """Process buildings in order, validated-corner buildings first and nearest first"""
    heights_by_building: Dict[str, Dict[int, List[float]]] = {}
    for c in corners:
        heights_by_building.setdefault(c.building_id, {}).setdefault(c.corner_index, []).append(c.assumed_height)

    mask = OcclusionMask(inputs.edge_map.shape)
    estimates = []
    for building_id in order_buildings(inputs.buildings, pose, heights_by_building):
        fp = inputs.building(building_id)
        try:
            estimate, scope = estimate_building(fp, inputs, pose, classifier, config, mask,
                                                heights_by_building.get(building_id, {}))
            if scope is not None:
                mask = update_mask(mask, scope)
        except StreetHeightError as e:
            estimate = BuildingEstimate(building_id, truth=fp.true_height, status=[_error_status(e)])
            if context is not None:
                context.log_warning("building failed", building=building_id, error=str(e))
        except Exception as e:
            estimate = BuildingEstimate(building_id, truth=fp.true_height, status=[_error_status(e)])
            if context is not None:
                context.log_error("unexpected error on building", building=building_id, error=str(e),
                                  error_type=type(e).__name__)
        if context is not None:
            context.log_info("building processed", building=building_id, height_m=estimate.height,
                             status=estimate.status)
        estimates.append(estimate)
    return estimates


def estimate_roofline_only(inputs: SceneInputs, config: PipelineConfig,
                           context: Optional[RunContext] = None) -> List[BuildingEstimate]:
    """Baseline: GPS pose, no corner filtering, the highest-edgeness roofline per building"""
    pose = inputs.pose
    estimates = []
    no_mask = np.zeros(inputs.edge_map.shape, dtype=bool)
    for fp in sorted(inputs.buildings, key=lambda b: (nearest_distance(b, pose), b.id)):
        estimate = BuildingEstimate(fp.id, truth=fp.true_height)
        try:
            candidates = roofline_candidates(fp, pose, inputs.edge_map, config)
            if not candidates:
                estimate.status.append(STATUS_OCCLUDED)
            else:
                chosen = min(enumerate(candidates),
                             key=lambda item: (-item[1].segment.edgeness, -item[1].features.lam, item[0]))[1]
                estimate, _ = _finish(fp, estimate, chosen, inputs, pose, config, no_mask,
                                      nearest_distance(fp, pose))
        except StreetHeightError as e:
            estimate.status = [_error_status(e)]
        estimates.append(estimate)
    if context is not None:
        context.log_info("roofline-only baseline finished", buildings=len(estimates))
    return estimates


def run_pipeline(inputs: SceneInputs, config: PipelineConfig,
                 classifier: Optional[CandidateClassifier] = None,
                 context: Optional[RunContext] = None) -> HeightReport:
    """Calibrate the camera from corners, then estimate every building's height.

    Individual building failures are recorded in that building's status and
    never abort the run.

    Raises:
        NonHorizontalPoseError: the pose is pitched; use run_tall_building.
        InputError: oracle mode without ground truth, or unreadable models.
    """
    context = context or RunContext(component="pipeline")
    if inputs.pose.pitch != 0.0:
        raise NonHorizontalPoseError("pipeline needs a level view; rectify pitched scenes first")

    if config.method == "roofline_only":
        gps = inputs.pose.position
        report = HeightReport(
            buildings=estimate_roofline_only(inputs, config, context),
            calibration=CalibrationReport(gps_position=gps, position=gps, status="skipped"),
            method=config.method,
        )
        return report

    classifier = classifier or make_classifier(config, inputs)
    context.log_info("stage started", stage="calibration", buildings=len(inputs.buildings))
    corners = validated_corners(inputs, inputs.pose, classifier, config, context)
    pose, calibration = calibrate_camera(inputs, corners, config, context)
    if pose.position != inputs.pose.position:
        corners = validated_corners(inputs, pose, classifier, config, context)

    context.log_info("stage started", stage="heights", elapsed_s=round(context.get_duration(), 3))
    estimates = estimate_heights(inputs, pose, classifier, config, corners, context)
    context.log_info("pipeline finished", elapsed_s=round(context.get_duration(), 3))
    return HeightReport(buildings=estimates, calibration=calibration, method=config.method)


def run_calibration(inputs: SceneInputs, config: PipelineConfig,
                    classifier: Optional[CandidateClassifier] = None,
                    context: Optional[RunContext] = None) -> CalibrationReport:
    classifier = classifier or make_classifier(config, inputs)
    inputs = rectified(inputs)
    corners = validated_corners(inputs, inputs.pose, classifier, config, context)
    return calibrate_camera(inputs, corners, config, context)[1]


def rectified(inputs: SceneInputs) -> SceneInputs:
    """Level view of a pitched scene; unchanged for a level one"""
    h = pitch_homography(inputs.pose)
    if h.is_identity():
        return inputs
    return replace(
        inputs,
        edge_map=rectify_image(inputs.edge_map, h),
        tree_mask=rectify_mask(inputs.tree_mask, h),
        pose=inputs.pose.leveled(),
    )


def run_tall_building(inputs: SceneInputs, config: PipelineConfig,
                      classifier: Optional[CandidateClassifier] = None,
                      context: Optional[RunContext] = None) -> HeightReport:
    """Rectify an upward-looking view to a level one, then run the pipeline"""
    context = context or RunContext(component="pipeline")
    level = rectified(inputs)
    if level is not inputs:
        context.log_info("view rectified", pitch_deg=round(math.degrees(inputs.pose.pitch), 3))
    return run_pipeline(level, config, classifier, context)


def run_multi_sample(spec: SceneSpec, config: PipelineConfig, samples: int,
                     bundle: Optional[ModelBundle] = None,
                     context: Optional[RunContext] = None) -> HeightReport:
    """Median heights over renders of one block from cameras stepped back along the heading"""
    if samples < 1:
        raise InputError("samples must be at least 1")
    context = context or RunContext(component="pipeline")
    reports = []
    for k in range(samples):
        rendered = render(step_back(spec, k * config.multi_sample_step_m))
        inputs = SceneInputs.from_rendered(rendered)
        classifier = LearnedClassifier(bundle) if bundle is not None else None
        reports.append(run_tall_building(inputs, config, classifier, context))
        context.log_info("sample finished", sample=k + 1, of=samples)

    combined = []
    for fp in spec.buildings:
        per_sample = [r.estimate(fp.id) for r in reports]
        heights = [e.height for e in per_sample if e is not None and e.height is not None]
        if heights:
            first_ok = next(e for e in per_sample if e is not None and e.height is not None)
            combined.append(BuildingEstimate(fp.id, multi_sample_height(heights), fp.true_height,
                                             list(first_ok.status), first_ok.roofline, len(heights)))
        else:
            status = per_sample[0].status if per_sample and per_sample[0] is not None else [STATUS_OCCLUDED]
            combined.append(BuildingEstimate(fp.id, None, fp.true_height, list(status), None, 0))
    return HeightReport(buildings=combined, calibration=reports[0].calibration, method=config.method)


def overlay_image(inputs: SceneInputs, report: HeightReport) -> np.ndarray:
    """RGB raster: edges in gray, chosen rooflines in red, reference corners in green"""
    gray = inputs.edge_map.pixels // 2
    image = np.stack([gray, gray, gray], axis=-1).astype(np.uint8)
    shape = inputs.edge_map.shape
    for b in report.buildings:
        if b.roofline is None:
            continue
        pixels = line_pixels(b.roofline["p0"], b.roofline["p1"], shape)
        image[pixels[:, 1], pixels[:, 0]] = (255, 0, 0)
    for corner in report.calibration.reference_corners:
        col, row = corner["pixel"]
        rows = slice(max(row - 2, 0), min(row + 3, shape[0]))
        cols = slice(max(col - 2, 0), min(col + 3, shape[1]))
        image[rows, cols] = (0, 255, 0)
    return image


def write_overlay(path: Union[str, Path], inputs: SceneInputs, report: HeightReport) -> None:
    write_rgb(path, overlay_image(inputs, report))
