"""Shared fixtures: a canonical camera, simple box footprints and a small rendered block"""

from pathlib import Path

import pytest
import structlog

from street_height.config import PipelineConfig
from street_height.geometry import BuildingFootprint, CameraPose
from street_height.scene import SceneSpec, render

REPO_ROOT = Path(__file__).resolve().parent.parent


@pytest.fixture(autouse=True)
def reset_logging():
    """Commands configure structlog against the captured stderr of one test"""
    yield
    structlog.reset_defaults()


@pytest.fixture
def pose():
    """Level 640x640 camera at the origin looking north, f = 320 px"""
    return CameraPose(position=(0.0, 0.0), heading=0.0)


@pytest.fixture
def box_right():
    return BuildingFootprint("r1", ((10.0, 20.0), (20.0, 20.0), (20.0, 32.0), (10.0, 32.0)), true_height=18.0)


@pytest.fixture
def box_left():
    return BuildingFootprint("l1", ((-20.0, 24.0), (-10.0, 24.0), (-10.0, 36.0), (-20.0, 36.0)), true_height=12.0)


@pytest.fixture
def config():
    return PipelineConfig()


@pytest.fixture
def demo_scene_path():
    return REPO_ROOT / "config" / "demo_scene.json"


@pytest.fixture(scope="session")
def two_box_scene():
    """Noiseless render of one building on each side of the street"""
    buildings = (
        BuildingFootprint("l1", ((-20.0, 24.0), (-10.0, 24.0), (-10.0, 36.0), (-20.0, 36.0)), true_height=12.0),
        BuildingFootprint("r1", ((10.0, 20.0), (20.0, 20.0), (20.0, 32.0), (10.0, 32.0)), true_height=18.0),
    )
    return render(SceneSpec(seed=3, buildings=buildings, camera=CameraPose((0.0, 0.0), 0.0)))
