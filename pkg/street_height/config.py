"""
Street Height Estimation - Configuration
Pipeline and training settings loaded from config/pipeline_config.json, validated
with jsonschema and overridable from the environment (.env supported)
"""

import json
import os
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union

import jsonschema
from dotenv import find_dotenv, load_dotenv

from .errors import ConfigError

ENV_PREFIX = "STREET_HEIGHT_"

PIPELINE_SCHEMA: Dict[str, Any] = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "height_step": {"type": "number", "exclusiveMinimum": 0},
        "gate_px": {"type": "number", "exclusiveMinimum": 0},
        "calibration_threshold_m": {"type": "number", "exclusiveMinimum": 0},
        "classifier": {"type": "string", "minLength": 1},
        "calibration_resolution_px": {"type": "number", "minimum": 0},
        "edgeness_variant": {"enum": ["boosted", "proportional"]},
        "seed": {"type": "integer", "minimum": 0},
        "window_px": {"type": "integer", "minimum": 28},
        "patch_px": {"type": "integer", "minimum": 4},
        "strip_half_height": {"type": "integer", "minimum": 1},
        "angle_step_deg": {"type": "number", "exclusiveMinimum": 0},
        "arm_px": {"type": "integer", "minimum": 2},
        "oracle_tolerance_px": {"type": "number", "exclusiveMinimum": 0},
        "segments_per_height": {"type": "integer", "minimum": 1},
        "method": {"enum": ["corner", "roofline_only"]},
        "multi_sample_step_m": {"type": "number", "exclusiveMinimum": 0},
        "subpixel_refine": {"type": "boolean"},
    },
}

TRAINING_SCHEMA: Dict[str, Any] = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "alpha": {"type": "number", "minimum": 0, "maximum": 1},
        "learning_rate": {"type": "number", "exclusiveMinimum": 0},
        "decay": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
        "decay_every": {"type": "integer", "minimum": 1},
        "batch_size": {"type": "integer", "minimum": 2},
        "iterations": {"type": "integer", "minimum": 1},
        "seed": {"type": "integer", "minimum": 0},
        "embedding_dim": {"type": "integer", "minimum": 2},
        "loss": {"enum": ["relative", "margin"]},
        "margin": {"type": "number", "minimum": 0},
        "negative_preference": {"enum": ["far", "near"]},
        "reject_quantile": {"type": "number", "minimum": 0, "maximum": 0.5},
        "validation_fraction": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
        "log_every": {"type": "integer", "minimum": 1},
    },
}

CONFIG_FILE_SCHEMA: Dict[str, Any] = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "pipeline": PIPELINE_SCHEMA,
        "training": TRAINING_SCHEMA,
    },
}


@dataclass(frozen=True)
class PipelineConfig:
    """Settings for one run of the height-estimation pipeline"""
    height_step: float = 0.5
    gate_px: float = 3.0
    calibration_threshold_m: float = 3.0
    classifier: str = "oracle"
    calibration_resolution_px: float = 0.5
    edgeness_variant: str = "boosted"
    seed: int = 0
    window_px: int = 120
    patch_px: int = 28
    strip_half_height: int = 10
    angle_step_deg: float = 0.5
    arm_px: int = 14
    oracle_tolerance_px: float = 2.0
    segments_per_height: int = 1
    method: str = "corner"
    multi_sample_step_m: float = 2.0
    subpixel_refine: bool = True

    def __post_init__(self):
        _validate(asdict(self), PIPELINE_SCHEMA, "pipeline")

    @property
    def uses_oracle(self) -> bool:
        return self.classifier == "oracle"

    def with_overrides(self, **overrides: Any) -> "PipelineConfig":
        return replace(self, **{k: v for k, v in overrides.items() if v is not None})


@dataclass(frozen=True)
class TrainingConfig:
    """Settings for embedding-network training"""
    alpha: float = 0.5
    learning_rate: float = 0.1
    decay: float = 0.95
    decay_every: int = 1000
    batch_size: int = 30
    iterations: int = 2000
    seed: int = 0
    embedding_dim: int = 128
    loss: str = "relative"
    margin: float = 0.2
    negative_preference: str = "far"
    reject_quantile: float = 0.01
    validation_fraction: float = 0.2
    log_every: int = 100

    def __post_init__(self):
        _validate(asdict(self), TRAINING_SCHEMA, "training")

    def with_overrides(self, **overrides: Any) -> "TrainingConfig":
        return replace(self, **{k: v for k, v in overrides.items() if v is not None})


def _validate(document: Dict[str, Any], schema: Dict[str, Any], section: str) -> None:
    try:
        jsonschema.validate(document, schema)
    except jsonschema.ValidationError as e:
        where = ".".join(str(p) for p in e.absolute_path) or section
        raise ConfigError(f"{section} config invalid at '{where}': {e.message}") from e


def _coerce(value: str, target: Any) -> Any:
    if isinstance(target, bool):
        return value.strip().lower() in ("1", "true", "yes", "on")
    if isinstance(target, int):
        return int(value)
    if isinstance(target, float):
        return float(value)
    return value


def _env_overrides(defaults: Union[PipelineConfig, TrainingConfig]) -> Dict[str, Any]:
    overrides: Dict[str, Any] = {}
    for f in fields(defaults):
        raw = os.environ.get(ENV_PREFIX + f.name.upper())
        if raw is None:
            continue
        try:
            overrides[f.name] = _coerce(raw, getattr(defaults, f.name))
        except ValueError as e:
            raise ConfigError(f"environment override {ENV_PREFIX + f.name.upper()}={raw!r}: {e}") from e
    return overrides


def load_config(path: Optional[Union[str, Path]] = None,
                use_env: bool = True) -> Tuple[PipelineConfig, TrainingConfig]:
    """Load pipeline and training configuration.

    Args:
        path: JSON file with optional "pipeline" and "training" sections. None
            uses the built-in defaults.
        use_env: Apply STREET_HEIGHT_* environment overrides (after loading .env).

    Returns:
        (PipelineConfig, TrainingConfig)
    """
    document: Dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        try:
            with open(path, "r", encoding="utf-8") as f:
                document = json.load(f)
        except FileNotFoundError as e:
            raise ConfigError(f"config file not found: {path}") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {path} is not valid JSON (line {e.lineno}): {e.msg}") from e
        _validate(document, CONFIG_FILE_SCHEMA, str(path))

    pipeline = PipelineConfig(**document.get("pipeline", {}))
    training = TrainingConfig(**document.get("training", {}))

    if use_env:
        load_dotenv(find_dotenv(usecwd=True), override=False)
        pipeline = replace(pipeline, **_env_overrides(pipeline))
        training = replace(training, **_env_overrides(training))
    return pipeline, training
