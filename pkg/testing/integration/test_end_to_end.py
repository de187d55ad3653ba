#!/usr/bin/env python3
"""
Street Height Estimation - End-to-End Tests
Renders seeded street blocks and runs the full pipeline with the oracle classifier
"""

from dataclasses import replace

import numpy as np
import pytest

from street_height.config import PipelineConfig
from street_height.geometry import BuildingFootprint
from street_height.pipeline import SceneInputs, run_pipeline, run_tall_building
from street_height.scene import (
    SceneSpec,
    load_scene_spec,
    random_scene_spec,
    render,
    tall_building_spec,
    unoccluded_buildings,
)

pytestmark = pytest.mark.slow

SEEDS = range(100)
NOISE_SEEDS = range(50)
GPS_NOISE_SIGMA = 1.5
TOLERANCE_M = 0.25


@pytest.fixture(scope="module")
def calibrated():
    return PipelineConfig()


@pytest.fixture(scope="module")
def gps_only():
    return PipelineConfig(calibration_threshold_m=1e-9)


@pytest.fixture(scope="module")
def noisy_scenes():
    return [render(random_scene_spec(seed, gps_noise_sigma=GPS_NOISE_SIGMA)) for seed in NOISE_SEEDS]


@pytest.fixture(scope="module")
def calibrated_reports(noisy_scenes, calibrated):
    return [run_pipeline(SceneInputs.from_rendered(rendered), calibrated) for rendered in noisy_scenes]


@pytest.fixture(scope="module")
def uncalibrated_reports(noisy_scenes, gps_only):
    return [run_pipeline(SceneInputs.from_rendered(rendered), gps_only) for rendered in noisy_scenes]


def within_tolerance(rendered, report):
    """(buildings within tolerance, unoccluded buildings)"""
    ids = unoccluded_buildings(rendered)
    hits = sum(
        1 for building_id in ids
        if report.estimate(building_id).abs_error is not None
        and report.estimate(building_id).abs_error <= TOLERANCE_M
    )
    return hits, len(ids)


def unoccluded_errors(rendered, report):
    """Absolute error per unoccluded building; a building without an estimate counts as infinitely wrong"""
    errors = []
    for building_id in unoccluded_buildings(rendered):
        estimate = report.estimate(building_id)
        error = estimate.abs_error if estimate is not None else None
        errors.append(np.inf if error is None else error)
    return errors


class TestSyntheticAccuracy:
    def test_noiseless_blocks(self, calibrated):
        hits = total = 0
        for seed in SEEDS:
            rendered = render(random_scene_spec(seed))
            h, n = within_tolerance(rendered, run_pipeline(SceneInputs.from_rendered(rendered), calibrated))
            hits += h
            total += n
        assert total > 0
        assert hits / total >= 0.95

    def test_noiseless_demo_block(self, demo_scene_path, calibrated):
        spec = replace(load_scene_spec(demo_scene_path), gps_noise_sigma=0.0)
        rendered = render(spec)
        hits, total = within_tolerance(rendered, run_pipeline(SceneInputs.from_rendered(rendered), calibrated))
        assert total >= 5
        assert hits / total >= 0.95


class TestGpsNoise:
    def test_fallback_rule(self, noisy_scenes, calibrated_reports):
        for rendered, report in zip(noisy_scenes, calibrated_reports):
            calibration = report.calibration
            if calibration.displacement is None:
                continue
            assert calibration.accepted == (calibration.displacement < 3.0)
            if not calibration.accepted:
                assert calibration.position == pytest.approx(rendered.noisy_pose.position)

    def test_calibration_helps(self, noisy_scenes, calibrated_reports, uncalibrated_reports):
        with_cal, without_cal = [], []
        for rendered, report, baseline in zip(noisy_scenes, calibrated_reports, uncalibrated_reports):
            if not report.calibration.accepted:
                continue
            with_cal += unoccluded_errors(rendered, report)
            without_cal += unoccluded_errors(rendered, baseline)
        assert with_cal

        m_cal, m_raw = float(np.median(with_cal)), float(np.median(without_cal))
        reduction = 1.0 if np.isinf(m_raw) else 1.0 - m_cal / m_raw
        assert np.isfinite(m_cal)
        assert reduction >= 0.30


class TestOcclusion:
    def test_hidden_building(self, box_right, pose, gps_only):
        hidden = BuildingFootprint("hid", ((16.0, 40.0), (19.0, 40.0), (19.0, 44.0), (16.0, 44.0)), true_height=10.0)
        rendered = render(SceneSpec(seed=0, buildings=(box_right, hidden), camera=pose))
        assert rendered.truth.fully_occluded["hid"]
        report = run_pipeline(SceneInputs.from_rendered(rendered), gps_only)
        assert "fully-occluded" in report.estimate("hid").status
        assert report.estimate("hid").height is None


class TestTallBuilding:
    def test_upward_view(self, gps_only):
        rendered = render(tall_building_spec(seed=0))
        report = run_tall_building(SceneInputs.from_rendered(rendered), gps_only)
        tower = report.estimate("tower")
        assert tower.height is not None
        assert tower.abs_error <= 0.5
