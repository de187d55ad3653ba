import math

import numpy as np
import pytest

from street_height.calibration import (
    CornerObservation,
    accept_calibration,
    bearing_from_pixel,
    bearing_to,
    calibrate_two_corners,
    calibration_resolution,
    multi_sample_height,
)
from street_height.errors import DegenerateGeometryError, EmptyInputError
from street_height.geometry import CameraPose, WorldPoint, project_point


def random_setup(rng):
    pose = CameraPose(tuple(rng.uniform(-50, 50, 2)), rng.uniform(-math.pi, math.pi))
    corners = []
    for bearing in (rng.uniform(-1.1, -0.1), rng.uniform(0.1, 1.1)):
        depth = rng.uniform(8, 60)
        lateral = depth * math.tan(bearing)
        corners.append((pose.position[0] + depth * pose.forward[0] + lateral * pose.right[0],
                        pose.position[1] + depth * pose.forward[1] + lateral * pose.right[1]))
    return pose, corners


class TestBearings:
    def test_bearing_from_pixel(self, pose):
        assert bearing_from_pixel(pose, 320.0) == pytest.approx(math.pi / 4)
        assert bearing_from_pixel(pose, -320.0) == pytest.approx(-math.pi / 4)
        assert bearing_from_pixel(pose, 0.0) == 0.0

    def test_bearing_matches_projection(self, pose):
        corner = (12.0, 30.0)
        u = project_point(pose, WorldPoint(*corner, 0.0)).u
        assert bearing_to(pose, corner) == pytest.approx(bearing_from_pixel(pose, u))

    def test_bearing_independent_of_pitch(self):
        level = CameraPose((0.0, 0.0), 0.2)
        pitched = CameraPose((0.0, 0.0), 0.2, pitch=0.4)
        assert bearing_to(pitched, (5.0, 40.0)) == pytest.approx(bearing_to(level, (5.0, 40.0)))

    def test_observation_outside_hemisphere(self):
        with pytest.raises(ValueError):
            CornerObservation((0.0, 0.0), math.pi / 2)


class TestCalibrateTwoCorners:
    def test_symmetric_corners(self):
        c1 = CornerObservation((-10.0, 10.0), -math.pi / 4)
        c2 = CornerObservation((10.0, 10.0), math.pi / 4)
        assert calibrate_two_corners(c1, c2, 0.0) == pytest.approx((0.0, 0.0), abs=1e-12)

    def test_random_round_trip(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            pose, corners = random_setup(rng)
            observations = [CornerObservation(c, bearing_to(pose, c)) for c in corners]
            position = calibrate_two_corners(*observations, pose.heading)
            assert math.hypot(position[0] - pose.position[0], position[1] - pose.position[1]) < 1e-9

    def test_order_of_corners_irrelevant(self):
        pose, corners = random_setup(np.random.default_rng(3))
        a, b = (CornerObservation(c, bearing_to(pose, c)) for c in corners)
        assert calibrate_two_corners(a, b, pose.heading) == pytest.approx(calibrate_two_corners(b, a, pose.heading))

    def test_parallel_sight_lines(self):
        c1 = CornerObservation((0.0, 10.0), 0.3)
        c2 = CornerObservation((5.0, 20.0), 0.3)
        with pytest.raises(DegenerateGeometryError):
            calibrate_two_corners(c1, c2, 0.0)

    def test_coincident_corners(self):
        c1 = CornerObservation((3.0, 10.0), 0.1)
        c2 = CornerObservation((3.0, 10.0), 0.2)
        with pytest.raises(DegenerateGeometryError):
            calibrate_two_corners(c1, c2, 0.0)

    def test_error_shrinks_with_bearing_noise(self):
        rng = np.random.default_rng(11)
        mean_errors = []
        for sigma in (1e-2, 1e-3, 1e-4):
            errors = []
            for _ in range(300):
                pose, corners = random_setup(rng)
                observations = [CornerObservation(c, bearing_to(pose, c) + rng.normal(0, sigma)) for c in corners]
                position = calibrate_two_corners(*observations, pose.heading)
                errors.append(math.hypot(position[0] - pose.position[0], position[1] - pose.position[1]))
            mean_errors.append(np.mean(errors))
        assert mean_errors[0] > mean_errors[1] > mean_errors[2]


class TestCalibrationResolution:
    def test_whole_pixel_error_within_resolution(self):
        rng = np.random.default_rng(8)
        for _ in range(100):
            pose, corners = random_setup(rng)
            observations = []
            for c in corners:
                u = project_point(pose, WorldPoint(*c, 0.0)).u
                observations.append(CornerObservation(c, bearing_from_pixel(pose, float(np.round(u)))))
            position = calibrate_two_corners(*observations, pose.heading)
            resolution = calibration_resolution(*observations, pose.heading, pose.focal_length)
            error = math.hypot(position[0] - pose.position[0], position[1] - pose.position[1])
            assert error <= resolution * 1.01 + 1e-9

    def test_scales_with_pixels(self):
        pose, corners = random_setup(np.random.default_rng(2))
        observations = [CornerObservation(c, bearing_to(pose, c)) for c in corners]
        none = calibration_resolution(*observations, pose.heading, pose.focal_length, pixels=0.0)
        half = calibration_resolution(*observations, pose.heading, pose.focal_length)
        whole = calibration_resolution(*observations, pose.heading, pose.focal_length, pixels=1.0)
        assert none == pytest.approx(0.0, abs=1e-9)
        assert 0.0 < half < whole


class TestAcceptCalibration:
    def test_zero_displacement(self):
        result = accept_calibration((1.0, 2.0), (1.0, 2.0))
        assert result.accepted
        assert result.position == (1.0, 2.0)
        assert result.displacement == 0.0

    def test_just_below_threshold(self):
        result = accept_calibration((2.99, 0.0), (0.0, 0.0))
        assert result.accepted
        assert result.position == (2.99, 0.0)

    def test_over_threshold_keeps_prior(self):
        result = accept_calibration((3.5, 0.0), (0.0, 0.0))
        assert not result.accepted
        assert result.position == (0.0, 0.0)
        assert result.displacement == pytest.approx(3.5)

    def test_custom_threshold(self):
        assert not accept_calibration((2.0, 0.0), (0.0, 0.0), threshold=1.0).accepted

    def test_never_far_from_prior_unless_prior(self):
        rng = np.random.default_rng(5)
        prior = (10.0, -4.0)
        for computed in rng.uniform(-10, 20, (200, 2)):
            result = accept_calibration(tuple(computed), prior)
            moved = math.hypot(result.position[0] - prior[0], result.position[1] - prior[1])
            assert moved < 3.0 or result.position == prior


class TestMultiSample:
    def test_median(self):
        assert multi_sample_height([10.0, 30.0, 11.0]) == 11.0
        assert multi_sample_height([10.0, 12.0]) == 11.0

    def test_empty(self):
        with pytest.raises(EmptyInputError):
            multi_sample_height([])
