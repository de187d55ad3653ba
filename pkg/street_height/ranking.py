"""
Street Height Estimation - Candidate ranking
Entropy-weight scoring of corner and roofline candidates, building processing
order, the occlusion mask and occlusion-aware roofline refinement
"""

from dataclasses import dataclass, field
from typing import Any, Iterable, List, Sequence, Tuple

import numpy as np

from .edgemap import EdgeMap, line_pixels
from .errors import EmptyInputError, InputError
from .geometry import BuildingFootprint, CameraPose, nearest_distance

CORNER_POLARITY = (True, True, True, True, False)
ROOFLINE_POLARITY = (True, True, True)


@dataclass(frozen=True)
class CandidateFeatures:
    """(lambda, omega, tau, rho, d) of a candidate; rho and d apply to corners only"""
    lam: float
    omega: float
    tau: int = 0
    rho: float = 0.0
    distance: float = 0.0

    def __post_init__(self):
        if min(self.lam, self.omega, self.rho, self.distance) < 0:
            raise ValueError(f"features must be nonnegative: {self}")
        if not 0 <= self.tau <= 3:
            raise ValueError(f"tau must lie in 0..3, got {self.tau}")

    def corner_row(self) -> Tuple[float, ...]:
        return (self.lam, self.omega, float(self.tau), self.rho, self.distance)

    def roofline_row(self) -> Tuple[float, ...]:
        return (self.lam, self.omega, float(self.tau))


@dataclass(frozen=True, eq=False)
class DecisionMatrix:
    """m candidates by n parameters, with a positive/negative polarity per column"""
    values: np.ndarray
    positive: Tuple[bool, ...]

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.ndim != 2 or values.shape[0] < 1 or values.shape[1] < 1:
            raise InputError(f"decision matrix must be m x n with m, n >= 1, got {values.shape}")
        if values.shape[1] != len(self.positive):
            raise InputError("one polarity flag per column required")
        if not np.all(np.isfinite(values)):
            raise InputError("decision matrix entries must be finite")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "positive", tuple(bool(p) for p in self.positive))


@dataclass(frozen=True, eq=False)
class WeightVector:
    weights: np.ndarray
    entropies: np.ndarray


@dataclass(frozen=True)
class ScoredCandidate:
    candidate: Any
    score: float
    index: int


def minmax_scale(matrix: DecisionMatrix) -> np.ndarray:
    """Column-wise min-max scaling; negative columns are offset by +1.

    Constant columns scale to 0 (positive) or 1 (negative).
    """
    values = matrix.values
    low = values.min(axis=0)
    span = values.max(axis=0) - low
    safe = np.where(span > 0, span, 1.0)
    scaled = np.where(span > 0, (values - low) / safe, 0.0)
    offset = np.array([0.0 if p else 1.0 for p in matrix.positive])
    return scaled + offset


def entropy_weights(scaled: np.ndarray) -> WeightVector:
    """Entropy weight method over a nonnegative scaled matrix.

    0*ln(0) counts as 0; all-zero columns and single-row matrices carry no
    information (entropy 1). Uniform weights when no column carries any.
    """
    scaled = np.asarray(scaled, dtype=float)
    if scaled.ndim != 2 or scaled.size == 0:
        raise EmptyInputError("entropy weights need a nonempty matrix")
    m, n = scaled.shape
    column_sums = scaled.sum(axis=0)
    entropies = np.ones(n)
    if m > 1:
        informative = column_sums > 0
        share = np.divide(scaled, column_sums, out=np.zeros_like(scaled), where=informative)
        with np.errstate(divide="ignore", invalid="ignore"):
            plogp = np.where(share > 0, share * np.log(np.where(share > 0, share, 1.0)), 0.0)
        entropies = np.where(informative, -plogp.sum(axis=0) / np.log(m), 1.0)
        entropies = np.clip(entropies, 0.0, 1.0)

    divergence = 1.0 - entropies
    total = divergence.sum()
    if total <= 1e-15:
        weights = np.full(n, 1.0 / n)
    else:
        weights = divergence / total
    return WeightVector(weights=weights, entropies=entropies)


def score_matrix(matrix: DecisionMatrix) -> np.ndarray:
    """Weighted score per row; negative columns count against a candidate"""
    scaled = minmax_scale(matrix)
    weights = entropy_weights(scaled).weights
    signs = np.array([1.0 if p else -1.0 for p in matrix.positive])
    return (scaled * (weights * signs)).sum(axis=1)


def _rank(candidates: Sequence[Any], rows: List[Tuple[float, ...]],
          polarity: Tuple[bool, ...]) -> List[ScoredCandidate]:
    scores = score_matrix(DecisionMatrix(np.array(rows, dtype=float), polarity))
    order = sorted(range(len(candidates)), key=lambda i: (-scores[i], i))
    return [ScoredCandidate(candidates[i], float(scores[i]), i) for i in order]


def score_corner_candidates(candidates: Sequence[Any]) -> List[ScoredCandidate]:
    """Rank corner candidates on (lambda, omega, tau, rho, d); best first"""
    if not candidates:
        raise EmptyInputError("no corner candidates to rank")
    rows = [c.features.corner_row() for c in candidates]
    return _rank(candidates, rows, CORNER_POLARITY)


def score_roofline_candidates(candidates: Sequence[Any]) -> List[ScoredCandidate]:
    """Rank one building's rooflines of one kind on (lambda, omega, tau); best first"""
    if not candidates:
        raise EmptyInputError("no roofline candidates to rank")
    rows = [c.features.roofline_row() for c in candidates]
    return _rank(candidates, rows, ROOFLINE_POLARITY)


@dataclass(frozen=True, eq=False)
class BuildingScope:
    """Raster footprint of a processed building: its facade quads and chosen roofline"""
    building_id: str
    distance: float
    quad: np.ndarray
    roofline: np.ndarray


@dataclass(frozen=True, eq=False)
class OcclusionMask:
    """Processed-building mask M; values are never mutated in place"""
    shape: Tuple[int, int]
    scopes: Tuple[BuildingScope, ...] = field(default_factory=tuple)

    @property
    def raster(self) -> np.ndarray:
        mask = np.zeros(self.shape, dtype=bool)
        for scope in self.scopes:
            mask |= scope.quad
        return mask

    def raster_for(self, distance: float) -> np.ndarray:
        """Mask seen by a building at the given camera distance.

        Nearer processed buildings hide their whole quad; farther ones only
        claim their selected roofline pixels.
        """
        mask = np.zeros(self.shape, dtype=bool)
        for scope in self.scopes:
            mask |= scope.quad if scope.distance < distance else scope.roofline
        return mask

    def processed(self) -> List[str]:
        return [s.building_id for s in self.scopes]


def update_mask(mask: OcclusionMask, scope: BuildingScope) -> OcclusionMask:
    if scope.quad.shape != mask.shape or scope.roofline.shape != mask.shape:
        raise InputError("scope raster dimensions do not match the mask")
    return OcclusionMask(mask.shape, mask.scopes + (scope,))


def order_buildings(buildings: Iterable[BuildingFootprint], pose: CameraPose,
                    validated: Iterable[str]) -> List[str]:
    """Buildings with a validated corner first, each group nearest first"""
    validated_ids = set(validated)
    keyed = [
        (0 if fp.id in validated_ids else 1, nearest_distance(fp, pose), position, fp.id)
        for position, fp in enumerate(buildings)
    ]
    return [building_id for _, _, _, building_id in sorted(keyed)]


@dataclass(frozen=True)
class RefinedFeatures:
    lam: int
    omega: float
    lam_ini: int


def refine_roofline(candidate: Any, occlusion: np.ndarray, trees: np.ndarray,
                    edge_map: EdgeMap, variant: str = "boosted") -> RefinedFeatures:
    """Drop masked pixels from a roofline and bridge tree gaps.

    The candidate's segment is the projected roofline span. Detected pixels are
    span pixels with nonzero edge intensity; those under the occlusion mask are
    removed, and tree pixels joined to the remaining run through 8-connected
    neighbours along the span are added back.

    Args:
        candidate: Object with a ``segment`` (LineSegment).
        occlusion: Boolean mask M.
        trees: Boolean mask T.
        edge_map: Edge intensities E.
        variant: "boosted" scales the unmasked edgeness by (1 + lam_ini/lam);
            "proportional" rescales the detected edgeness by lam/lam_ini.
    """
    if occlusion.shape != edge_map.shape or trees.shape != edge_map.shape:
        raise InputError("mask dimensions do not match the edge map")
    segment = candidate.segment
    span = line_pixels(segment.p0, segment.p1, edge_map.shape)
    cols, rows = span[:, 0], span[:, 1]
    intensity = edge_map.pixels[rows, cols].astype(np.int64)
    masked = occlusion[rows, cols]
    detected = intensity > 0
    lam_ini = int(detected.sum())

    kept = detected & ~masked
    bridge = trees[rows, cols] & ~masked & ~detected
    refined = kept.copy()
    run_start = None
    for i in range(len(span) + 1):
        inside = i < len(span) and (kept[i] or bridge[i])
        if inside and run_start is None:
            run_start = i
        elif not inside and run_start is not None:
            if kept[run_start:i].any():
                refined[run_start:i] |= bridge[run_start:i]
            run_start = None

    lam = int(refined.sum())
    if lam == 0:
        return RefinedFeatures(0, 0.0, lam_ini)
    if variant == "proportional":
        detected_sum = float(intensity[detected].sum())
        omega = detected_sum * lam / lam_ini if lam_ini else 0.0
    else:
        unmasked_sum = float(intensity[refined].sum())
        omega = (1.0 + lam_ini / lam) * unmasked_sum
    return RefinedFeatures(lam, omega, lam_ini)

