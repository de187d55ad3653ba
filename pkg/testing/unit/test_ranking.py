from types import SimpleNamespace

import numpy as np
import pytest

from street_height.edgemap import EdgeMap, LineSegment, line_pixels
from street_height.errors import EmptyInputError, InputError
from street_height.geometry import BuildingFootprint
from street_height.ranking import (
    BuildingScope,
    CandidateFeatures,
    DecisionMatrix,
    OcclusionMask,
    entropy_weights,
    minmax_scale,
    order_buildings,
    refine_roofline,
    score_corner_candidates,
    score_matrix,
    score_roofline_candidates,
    update_mask,
)


def candidate(lam, omega, tau=0, rho=0.0, distance=0.0, name=""):
    return SimpleNamespace(name=name, features=CandidateFeatures(lam, omega, tau, rho, distance))


class TestFeatures:
    def test_rows(self):
        features = CandidateFeatures(10, 200.0, 2, 5.0, 30.0)
        assert features.corner_row() == (10, 200.0, 2.0, 5.0, 30.0)
        assert features.roofline_row() == (10, 200.0, 2.0)

    @pytest.mark.parametrize("kwargs", [{"lam": -1, "omega": 0}, {"lam": 1, "omega": 0, "tau": 4}])
    def test_invalid(self, kwargs):
        with pytest.raises(ValueError):
            CandidateFeatures(**kwargs)


class TestDecisionMatrix:
    def test_polarity_count(self):
        with pytest.raises(InputError):
            DecisionMatrix(np.ones((2, 3)), (True, False))

    def test_not_finite(self):
        with pytest.raises(InputError):
            DecisionMatrix(np.array([[1.0, np.nan]]), (True, True))

    def test_empty(self):
        with pytest.raises(InputError):
            DecisionMatrix(np.zeros((0, 2)), (True, True))


class TestEntropyWeights:
    def test_minmax_offsets_negative_columns(self):
        matrix = DecisionMatrix(np.array([[0.0, 0.0], [5.0, 5.0], [10.0, 10.0]]), (True, False))
        scaled = minmax_scale(matrix)
        assert scaled[:, 0].tolist() == [0.0, 0.5, 1.0]
        assert scaled[:, 1].tolist() == [1.0, 1.5, 2.0]

    def test_weights_sum_to_one(self):
        rng = np.random.default_rng(0)
        for _ in range(500):
            m, n = rng.integers(1, 9), rng.integers(1, 6)
            polarity = tuple(bool(p) for p in rng.integers(0, 2, n))
            weights = entropy_weights(minmax_scale(DecisionMatrix(rng.uniform(0, 50, (m, n)), polarity))).weights
            assert weights.sum() == pytest.approx(1.0, abs=1e-9)
            assert (weights >= 0).all()

    def test_constant_columns_give_uniform_weights(self):
        scaled = minmax_scale(DecisionMatrix(np.full((4, 3), 7.0), (True, True, True)))
        assert entropy_weights(scaled).weights.tolist() == pytest.approx([1 / 3] * 3)

    def test_single_row(self):
        assert entropy_weights(np.array([[0.3, 0.9]])).weights.tolist() == pytest.approx([0.5, 0.5])

    def test_informative_column_dominates(self):
        scaled = minmax_scale(DecisionMatrix(np.array([[1.0, 0.0], [1.0, 10.0], [1.0, 0.0]]), (True, True)))
        weights = entropy_weights(scaled).weights
        assert weights[1] == pytest.approx(1.0)

    def test_empty(self):
        with pytest.raises(EmptyInputError):
            entropy_weights(np.zeros((0, 0)))


class TestScoring:
    def test_dominance(self):
        rng = np.random.default_rng(1)
        for _ in range(500):
            m, n = rng.integers(2, 7), rng.integers(1, 6)
            polarity = tuple(bool(p) for p in rng.integers(0, 2, n))
            values = rng.uniform(0, 100, (m, n))
            signs = np.array([1.0 if p else -1.0 for p in polarity])
            values[0] = values[1] + signs * rng.uniform(0, 5, n)
            scores = score_matrix(DecisionMatrix(values, polarity))
            assert scores[0] >= scores[1] - 1e-12

    def test_roofline_ranking(self):
        weak = candidate(10, 1000.0, name="weak")
        strong = candidate(40, 9000.0, 2, name="strong")
        middle = candidate(25, 5000.0, 1, name="middle")
        ranked = score_roofline_candidates([weak, strong, middle])
        assert [r.candidate.name for r in ranked] == ["strong", "middle", "weak"]
        assert [r.index for r in ranked] == [1, 2, 0]

    def test_ties_keep_input_order(self):
        ranked = score_roofline_candidates([candidate(5, 10.0, name="a"), candidate(5, 10.0, name="b")])
        assert [r.candidate.name for r in ranked] == ["a", "b"]

    def test_corner_distance_counts_against(self):
        near = candidate(10, 100.0, 0, 5.0, 10.0, name="near")
        far = candidate(10, 100.0, 0, 5.0, 50.0, name="far")
        assert score_corner_candidates([far, near])[0].candidate.name == "near"

    def test_empty(self):
        with pytest.raises(EmptyInputError):
            score_corner_candidates([])
        with pytest.raises(EmptyInputError):
            score_roofline_candidates([])


def scope(building_id, distance, quad_box, roofline_row, shape=(20, 20)):
    quad = np.zeros(shape, dtype=bool)
    r0, r1, c0, c1 = quad_box
    quad[r0:r1, c0:c1] = True
    roofline = np.zeros(shape, dtype=bool)
    roofline[roofline_row, :] = True
    return BuildingScope(building_id, distance, quad, roofline)


class TestOcclusionMask:
    def test_raster_for_depends_on_distance(self):
        mask = update_mask(OcclusionMask((20, 20)), scope("a", 30.0, (5, 10, 5, 10), 2))
        nearer_view = mask.raster_for(10.0)
        farther_view = mask.raster_for(50.0)
        assert farther_view[7, 7] and not farther_view[2, 0]
        assert nearer_view[2, 0] and not nearer_view[7, 7]

    def test_update_is_not_in_place(self):
        empty = OcclusionMask((20, 20))
        updated = update_mask(empty, scope("a", 30.0, (0, 4, 0, 4), 10))
        assert not empty.raster.any()
        assert updated.raster[0, 0]
        assert updated.processed() == ["a"]

    def test_shape_mismatch(self):
        with pytest.raises(InputError):
            update_mask(OcclusionMask((10, 10)), scope("a", 1.0, (0, 1, 0, 1), 0))

    def test_order_buildings(self, pose):
        near = BuildingFootprint("near", ((5, 10), (10, 10), (10, 15), (5, 15)))
        mid = BuildingFootprint("mid", ((5, 30), (10, 30), (10, 35), (5, 35)))
        far = BuildingFootprint("far", ((5, 60), (10, 60), (10, 65), (5, 65)))
        assert order_buildings([far, mid, near], pose, []) == ["near", "mid", "far"]
        assert order_buildings([far, mid, near], pose, {"far"}) == ["far", "near", "mid"]


class TestRefineRoofline:
    def setup_method(self):
        self.p0, self.p1 = (0, 10), (99, 10)
        self.span = line_pixels(self.p0, self.p1)
        self.candidate = SimpleNamespace(segment=LineSegment(self.p0, self.p1, 100, 0.0))
        self.none = np.zeros((20, 100), dtype=bool)

    def edge_map(self, columns):
        canvas = np.zeros((20, 100), dtype=np.uint8)
        canvas[10, columns] = 200
        return EdgeMap(canvas)

    def test_unmasked(self):
        edge_map = self.edge_map(slice(0, 60))
        refined = refine_roofline(self.candidate, self.none, self.none, edge_map)
        assert (refined.lam, refined.lam_ini) == (60, 60)
        assert refined.omega == pytest.approx(2 * 60 * 200)

    def test_tree_gap_is_bridged(self):
        edge_map = self.edge_map(np.r_[0:33, 66:100])
        trees = self.none.copy()
        trees[10, 33:66] = True
        refined = refine_roofline(self.candidate, self.none, trees, edge_map)
        assert refined.lam == 100
        assert refined.lam_ini == 67

    def test_isolated_tree_run_not_added(self):
        edge_map = self.edge_map(slice(0, 30))
        occlusion = self.none.copy()
        occlusion[10, 30:40] = True
        trees = self.none.copy()
        trees[10, 40:70] = True
        assert refine_roofline(self.candidate, occlusion, trees, edge_map).lam == 30

    def test_masked_pixels_removed(self):
        edge_map = self.edge_map(slice(0, 100))
        occlusion = self.none.copy()
        occlusion[10, 50:] = True
        refined = refine_roofline(self.candidate, occlusion, self.none, edge_map)
        assert refined.lam == 50
        assert refined.omega == pytest.approx((1 + 100 / 50) * 50 * 200)

    def test_proportional_variant(self):
        edge_map = self.edge_map(slice(0, 100))
        occlusion = self.none.copy()
        occlusion[10, 50:] = True
        refined = refine_roofline(self.candidate, occlusion, self.none, edge_map, variant="proportional")
        assert refined.omega == pytest.approx(100 * 200 * 50 / 100)

    def test_fully_masked(self):
        edge_map = self.edge_map(slice(0, 100))
        refined = refine_roofline(self.candidate, np.ones((20, 100), dtype=bool), self.none, edge_map)
        assert (refined.lam, refined.omega) == (0, 0.0)

    def test_shape_mismatch(self):
        with pytest.raises(InputError):
            refine_roofline(self.candidate, np.zeros((5, 5), dtype=bool), self.none, self.edge_map(slice(0, 1)))
