import math

import numpy as np
import pytest

from street_height.candidates import (
    CornerFormation,
    corner_candidates,
    corner_formation,
    corner_type_for,
    crop_patch,
    extract_roofline_patch,
    gate_anchors,
    heights_agree,
    ladder_step_px,
    quarter_distance,
    roofline_candidates,
    roofline_kinds,
    roofline_step,
    sweep_heights,
)
from street_height.edgemap import EdgeMap, LineSegment
from street_height.errors import OutOfBoundsError
from street_height.geometry import CornerRole


class TestHeightLadder:
    def test_sweep_from_top_to_ground(self, pose):
        heights = sweep_heights(20.0, pose, 0.5)
        assert heights[0] == pytest.approx(20.0)
        assert heights[-1] == 0.0
        assert len(heights) == 41
        assert all(a > b for a, b in zip(heights, heights[1:]))

    def test_ground_appended_when_off_ladder(self, pose):
        heights = sweep_heights(20.3, pose, 0.5)
        assert heights[-2] == pytest.approx(0.3)
        assert heights[-1] == 0.0

    def test_ladder_step(self, pose):
        assert ladder_step_px(20.0, pose, 0.5) == pytest.approx(8.0)

    def test_heights_agree(self):
        assert heights_agree(10.0, 10.25, 0.5)
        assert not heights_agree(10.0, 10.3, 0.5)


class TestPatches:
    def test_crop_centered(self):
        canvas = np.zeros((10, 10), dtype=np.uint8)
        canvas[5, 5] = 99
        patch = crop_patch(EdgeMap(canvas), (5.0, 5.0), size=4)
        assert patch.shape == (4, 4)
        assert patch[2, 2] == 99
        assert patch.sum() == 99

    def test_crop_pads_outside_raster(self):
        canvas = np.full((10, 10), 7, dtype=np.uint8)
        patch = crop_patch(EdgeMap(canvas), (0.0, 0.0), size=4)
        assert patch[:2, :].sum() == 0
        assert patch[:, :2].sum() == 0
        assert (patch[2:, 2:] == 7).all()

    def test_roofline_patch_is_leveled(self):
        canvas = np.zeros((30, 60), dtype=np.uint8)
        canvas[10, 10:51] = 255
        patch = extract_roofline_patch(EdgeMap(canvas), LineSegment((10, 10), (50, 10), 41, 0.0), half_height=5)
        assert patch.shape == (28, 28)
        assert abs(int(np.argmax(patch.sum(axis=1))) - 13.5) <= 2

    def test_roofline_patch_ignores_endpoint_order(self):
        canvas = np.zeros((40, 60), dtype=np.uint8)
        canvas[5:30, 20] = 180
        edge_map = EdgeMap(canvas)
        forward = extract_roofline_patch(edge_map, LineSegment((5, 8), (50, 25), 46, 0.0))
        backward = extract_roofline_patch(edge_map, LineSegment((50, 25), (5, 8), 46, 0.0))
        assert np.allclose(forward, backward)

    def test_roofline_patch_out_of_bounds(self):
        with pytest.raises(OutOfBoundsError):
            extract_roofline_patch(EdgeMap.blank(20, 20), LineSegment((0, 0), (25, 0), 26, 0.0))


class TestCornerShape:
    def test_corner_types(self):
        assert corner_type_for(CornerRole.CN, "right") == "cn-right"
        assert corner_type_for(CornerRole.CZ, "left") == "cz-left"
        assert corner_type_for(CornerRole.CX, "left") == "cz-right"

    def test_quarter_distance(self):
        assert quarter_distance(160.0, 640) == 0.0
        assert quarter_distance(320.0, 640) == 160.0
        assert quarter_distance(500.0, 640) == 20.0

    def test_formation_of_nearest_corner(self, box_right, pose):
        formation, kernel = corner_formation(box_right, pose, 0, 15.5, 14)
        assert formation is CornerFormation.BOTH_FACES
        assert [0, 0] in kernel.tolist()
        assert [0, 14] in kernel.tolist()

    def test_formation_of_single_face_corner(self, box_right, pose):
        formation, _ = corner_formation(box_right, pose, 1, 15.5, 14)
        assert formation is CornerFormation.LEFT_FACE


class TestCornerCandidates:
    def test_roles_and_types(self, two_box_scene, config):
        r1 = two_box_scene.spec.buildings[1]
        found = corner_candidates(r1, two_box_scene.truth.pose, two_box_scene.edge_map, config)
        assert {(c.role, c.corner_index, c.corner_type) for c in found} == {
            (CornerRole.CN, 0, "cn-right"),
            (CornerRole.CZ, 3, "cz-right"),
        }
        cn = [c for c in found if c.role is CornerRole.CN]
        assert [c.rung for c in cn] == list(range(len(cn)))
        assert all(c.patch.shape == (config.patch_px, config.patch_px) for c in found)
        assert cn[0].features.distance == pytest.approx(math.hypot(10.0, 20.0))

    def test_true_height_localizes_on_corner(self, two_box_scene, config):
        r1 = two_box_scene.spec.buildings[1]
        found = corner_candidates(r1, two_box_scene.truth.pose, two_box_scene.edge_map, config,
                                  roles=(CornerRole.CN,))
        at_truth = next(c for c in found if c.assumed_height == pytest.approx(15.5))
        low = next(c for c in found if c.assumed_height == pytest.approx(10.0))
        assert abs(at_truth.located[0] - 480) <= 1 and abs(at_truth.located[1] - 72) <= 1
        assert at_truth.features.lam > low.features.lam
        assert at_truth.formation is CornerFormation.BOTH_FACES


class TestRooflineCandidates:
    def test_kinds(self, box_right, box_left, pose):
        assert roofline_kinds(box_right, pose) == [("cn-cx", 0, 1), ("cn-cz-right", 0, 3)]
        assert roofline_kinds(box_left, pose) == [("cn-cx", 1, 0), ("cn-cz-left", 1, 2)]

    def test_strongest_candidate_at_true_height(self, two_box_scene, config):
        r1 = two_box_scene.spec.buildings[1]
        found = [c for c in roofline_candidates(r1, two_box_scene.truth.pose, two_box_scene.edge_map, config)
                 if c.kind == "cn-cz-right"]
        assert found
        best = max(found, key=lambda c: (c.features.lam, c.features.omega))
        # an 18 m roof seen from a 2.5 m mount sits 15.5 m above the camera axis
        step = roofline_step(20.0, two_box_scene.truth.pose, config)
        assert heights_agree(best.assumed_height, 15.5, step)

    def test_near_building_keeps_gate_and_refines_ladder(self, two_box_scene, config):
        r1 = two_box_scene.spec.buildings[1]
        pose = two_box_scene.truth.pose
        assert ladder_step_px(20.0, pose, config.height_step) > 2 * config.gate_px

        step = roofline_step(20.0, pose, config)
        assert step == pytest.approx(0.375)
        assert ladder_step_px(20.0, pose, step) <= 2 * config.gate_px + 1e-9

        found = roofline_candidates(r1, pose, two_box_scene.edge_map, config)
        assert found
        assert all(c.gate_px == config.gate_px for c in found)
        fine = sweep_heights(20.0, pose, step)
        assert len(fine) > len(sweep_heights(20.0, pose, config.height_step))
        for c in found:
            assert c.assumed_height == pytest.approx(fine[c.rung])

    def test_far_building_uses_configured_step(self, pose, config):
        assert roofline_step(40.0, pose, config) == config.height_step
        assert roofline_step(20.0, pose, config.with_overrides(gate_px=5.0)) == config.height_step

    def test_gate_anchors(self):
        canvas = np.zeros((20, 20), dtype=np.uint8)
        canvas[10, 12] = 200
        canvas[11, 10] = 90
        canvas[10, 15] = 255
        anchors = gate_anchors(EdgeMap(canvas), (10, 10), 3)
        assert anchors == [(10, 7), (10, 8), (10, 9), (10, 10), (10, 11), (10, 12), (10, 13), (12, 10)]

    def test_gate_anchors_clipped_at_border(self):
        canvas = np.zeros((10, 10), dtype=np.uint8)
        canvas[0, 1] = 255
        anchors = gate_anchors(EdgeMap(canvas), (0, 0), 2)
        assert (1, 0) in anchors
        assert [a for a in anchors if a[0] == 0] == [(0, -2), (0, -1), (0, 0), (0, 1), (0, 2)]

    def test_endpoints_inside_gate(self, two_box_scene, config):
        r1 = two_box_scene.spec.buildings[1]
        for c in roofline_candidates(r1, two_box_scene.truth.pose, two_box_scene.edge_map, config):
            a, b = c.projected
            assert max(abs(c.segment.p0[0] - a[0]), abs(c.segment.p0[1] - a[1])) <= c.gate_px
            assert max(abs(c.segment.p1[0] - b[0]), abs(c.segment.p1[1] - b[1])) <= c.gate_px
            assert c.patch.shape == (config.patch_px, config.patch_px)
