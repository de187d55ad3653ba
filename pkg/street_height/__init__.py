"""
Street Height Estimation
Per-building heights from a street-level edge map and 2D footprints
"""

__version__ = "1.0.0"

from .config import PipelineConfig, TrainingConfig, load_config
from .errors import StreetHeightError
from .geometry import BuildingFootprint, CameraPose
from .pipeline import HeightReport, SceneInputs, run_pipeline, run_tall_building

__all__ = [
    "BuildingFootprint",
    "CameraPose",
    "HeightReport",
    "PipelineConfig",
    "SceneInputs",
    "StreetHeightError",
    "TrainingConfig",
    "load_config",
    "run_pipeline",
    "run_tall_building",
]
