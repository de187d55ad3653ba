import json

import numpy as np
import pytest

from street_height.config import PipelineConfig
from street_height.errors import FootprintParseError, FootprintValidationError, InputError
from street_height.geometry import BuildingFootprint, project_to_raster, roof_point
from street_height.scene import (
    CORNER_NEGATIVE,
    NEGATIVE_EXCLUSION_PX,
    ROOFLINE_NEGATIVE,
    EdgeNoise,
    SceneSpec,
    _corner_negatives,
    generate_patch_dataset,
    gps_offset,
    load_footprints,
    load_scene,
    load_scene_spec,
    perturb_gps,
    random_scene_spec,
    read_footprint_file,
    read_patch_set,
    render,
    save_scene,
    step_back,
    tall_building_spec,
    unoccluded_buildings,
)


def write_json(path, document):
    path.write_text(json.dumps(document), encoding="utf-8")
    return path


class TestRender:
    def test_deterministic(self):
        spec = random_scene_spec(5, n_trees=2, edge_noise=EdgeNoise(salt=0.01, jitter=10), gps_noise_sigma=1.5)
        first, second = render(spec), render(spec)
        assert first.edge_map == second.edge_map
        assert np.array_equal(first.tree_mask, second.tree_mask)
        assert first.noisy_pose.position == second.noisy_pose.position

    def test_truth_corner_visible(self, two_box_scene):
        truth = two_box_scene.truth
        assert truth.heights == {"l1": 12.0, "r1": 18.0}
        assert truth.corner("r1", 0).visible
        assert truth.corner_raster("r1", 0) == pytest.approx((480.0, 72.0))
        assert two_box_scene.edge_map.pixels[72, 480] == 255

    def test_hidden_building(self, box_right, pose):
        hidden = BuildingFootprint("hid", ((16.0, 40.0), (19.0, 40.0), (19.0, 44.0), (16.0, 44.0)), true_height=10.0)
        rendered = render(SceneSpec(seed=0, buildings=(box_right, hidden), camera=pose))
        assert rendered.truth.fully_occluded == {"r1": False, "hid": True}
        assert unoccluded_buildings(rendered) == ["r1"]

    def test_unoccluded_buildings(self, two_box_scene):
        assert unoccluded_buildings(two_box_scene) == ["l1", "r1"]

    def test_missing_height(self, pose):
        with pytest.raises(InputError):
            render(SceneSpec(seed=0, buildings=(BuildingFootprint("x", ((0, 10), (5, 10), (5, 15))),), camera=pose))

    def test_trees_blank_edges(self):
        spec = random_scene_spec(8, n_trees=3)
        rendered = render(spec)
        assert rendered.tree_mask.any()
        assert not rendered.edge_map.pixels[rendered.tree_mask].any()


class TestRandomScenes:
    @pytest.mark.parametrize("seed", [0, 1, 2, 3])
    def test_roofs_inside_view(self, seed):
        spec = random_scene_spec(seed)
        pose = spec.camera
        assert spec.buildings
        assert len({fp.id for fp in spec.buildings}) == len(spec.buildings)
        for fp in spec.buildings:
            assert 5.0 <= fp.true_height <= 40.0
            for corner in fp.corners:
                col, row = project_to_raster(pose, roof_point(corner, fp.true_height, pose))
                assert 0 <= col < pose.image_width and 0 <= row < pose.image_height

    def test_step_back(self):
        spec = step_back(random_scene_spec(0), 5.0)
        assert spec.camera.position == pytest.approx((0.0, -5.0))

    def test_tall_building(self):
        spec = tall_building_spec()
        assert spec.camera.pitch > 0
        assert [fp.id for fp in spec.buildings] == ["tower"]
        assert spec.buildings[0].true_height == 120.0


class TestGps:
    def test_offsets_clipped(self):
        rng = np.random.default_rng(0)
        offsets = np.array([gps_offset(1.5, rng) for _ in range(20000)])
        norms = np.hypot(offsets[:, 0], offsets[:, 1])
        assert norms.max() <= 3.0 + 1e-12
        assert np.abs(offsets.mean(axis=0)).max() < 0.05
        assert 1.2 < offsets.std() < 1.5

    def test_perturb(self, pose):
        assert perturb_gps(pose, 0.0, 1) is pose
        moved = perturb_gps(pose, 1.5, 1)
        assert moved.heading == pose.heading
        assert moved.position != pose.position
        assert perturb_gps(pose, 1.5, 1).position == moved.position

    def test_negative_sigma(self, pose):
        with pytest.raises(ValueError):
            perturb_gps(pose, -1.0, 0)


class TestFootprintFiles:
    def test_clockwise_ring_reversed(self, tmp_path):
        path = write_json(tmp_path / "fp.json", {"buildings": [
            {"id": "a", "height_m": 10, "corners": [[0, 0], [0, 10], [10, 10], [10, 0]]},
        ]})
        [fp] = load_footprints(path)
        assert fp.corners == ((10, 0), (10, 10), (0, 10), (0, 0))
        assert fp.true_height == 10

    def test_camera_section(self, tmp_path):
        path = write_json(tmp_path / "fp.json", {
            "buildings": [{"id": "a", "corners": [[0, 10], [5, 10], [5, 15]]}],
            "camera": {"position": [1, 2], "heading_deg": 90, "focal_px": 400},
        })
        _, camera, _ = read_footprint_file(path)
        assert camera.position == (1.0, 2.0)
        assert camera.heading == pytest.approx(np.pi / 2)
        assert camera.focal_length == 400.0

    def test_invalid_json_reports_line(self, tmp_path):
        path = tmp_path / "fp.json"
        path.write_text('{\n  "buildings": [\n    {"id": "a",,}\n  ]\n}\n', encoding="utf-8")
        with pytest.raises(FootprintParseError) as excinfo:
            load_footprints(path)
        assert excinfo.value.line == 3

    def test_schema_error_reports_field(self, tmp_path):
        path = tmp_path / "fp.json"
        path.write_text('{\n  "buildings": [\n    {"id": "a",\n     "corners": [[0, 0], [1, 0]]}\n  ]\n}\n',
                        encoding="utf-8")
        with pytest.raises(FootprintParseError) as excinfo:
            load_footprints(path)
        assert excinfo.value.field == "buildings.0.corners"
        assert excinfo.value.line == 4

    def test_duplicate_ids(self, tmp_path):
        corners = [[0, 10], [5, 10], [5, 15]]
        path = write_json(tmp_path / "fp.json", {"buildings": [{"id": "a", "corners": corners},
                                                               {"id": "a", "corners": corners}]})
        with pytest.raises(FootprintValidationError):
            load_footprints(path)

    def test_self_intersecting(self, tmp_path):
        path = write_json(tmp_path / "fp.json", {"buildings": [
            {"id": "bow", "corners": [[0, 0], [1, 1], [1, 0], [0, 1]]},
        ]})
        with pytest.raises(FootprintValidationError):
            load_footprints(path)

    def test_scene_needs_camera(self, tmp_path):
        path = write_json(tmp_path / "scene.json", {"buildings": [{"id": "a", "corners": [[0, 10], [5, 10], [5, 15]]}]})
        with pytest.raises(FootprintParseError):
            load_scene_spec(path)


class TestSavedScenes:
    def test_round_trip(self, two_box_scene, tmp_path):
        save_scene(two_box_scene, tmp_path)
        assert {p.name for p in tmp_path.iterdir()} == {"scene.json", "edge_map.pgm", "tree_mask.pgm"}
        loaded = load_scene(tmp_path)
        assert loaded.edge_map == two_box_scene.edge_map
        assert loaded.truth.heights == two_box_scene.truth.heights
        assert [fp.id for fp in loaded.spec.buildings] == ["l1", "r1"]

    def test_saved_file_is_sorted_json(self, two_box_scene, tmp_path):
        save_scene(two_box_scene, tmp_path)
        text = (tmp_path / "scene.json").read_text(encoding="utf-8")
        assert text.endswith("\n")
        assert list(json.loads(text)) == sorted(json.loads(text))


class TestPatchDataset:
    def test_splits_and_labels(self, tmp_path):
        specs = [random_scene_spec(seed) for seed in (1, 2)]
        summary = generate_patch_dataset(specs, tmp_path, train_fraction=0.5)
        assert set(summary.counts) == {"train", "test"}
        patches, labels = read_patch_set(tmp_path / "train")
        assert patches.shape[1:] == (28, 28)
        assert len(labels) == len(patches) == sum(summary.counts["train"].values())
        assert CORNER_NEGATIVE in labels and ROOFLINE_NEGATIVE in labels
        assert patches.min() >= 0 and patches.max() <= 255

    def test_corner_negatives_keep_clear_of_corners(self, two_box_scene):
        rng = np.random.default_rng(0)
        truth = two_box_scene.truth
        corners = np.array([truth.corner_raster(c.building_id, c.index) for c in truth.corners])
        positives = [tuple(p) for p in corners[:3]]
        negatives = _corner_negatives(rng, positives, corners, two_box_scene.edge_map)
        assert len(negatives) >= 6
        for col, row in negatives:
            assert np.hypot(corners[:, 0] - col, corners[:, 1] - row).min() > NEGATIVE_EXCLUSION_PX

    def test_no_specs(self, tmp_path):
        with pytest.raises(InputError):
            generate_patch_dataset([], tmp_path, PipelineConfig())
