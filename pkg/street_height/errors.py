"""
Street Height Estimation - Error types
Exception hierarchy shared by every module, plus the categorizer the CLI and the
pipeline use to decide exit codes and per-building status flags
"""

from typing import Any, Dict, Optional


class StreetHeightError(Exception):
    """Base exception for all street_height failures"""


class InputError(StreetHeightError):
    """Bad user-supplied input (files, arguments, data sets)"""


class GeometryError(StreetHeightError):
    """Numerically degenerate geometric configuration"""


class ConfigError(StreetHeightError):
    """Configuration file or override failed validation"""


class PointBehindCameraError(GeometryError):
    """Point lies on or behind the camera's image plane"""


class NonHorizontalPoseError(GeometryError):
    """Operation requires a level (pitch = 0) camera"""


class NonPositiveDistanceError(GeometryError):
    """Distance along the optical axis must be positive"""


class NoVisibleCornerError(GeometryError):
    """No footprint corner lies in front of the camera"""


class DegenerateGeometryError(GeometryError):
    """Calibration sight-lines are parallel"""


class DegenerateDenominatorError(GeometryError):
    """Target and negative embeddings coincide"""


class DegenerateConfigurationError(GeometryError):
    """Point correspondences do not determine a unique homography"""


class SingularHomographyError(GeometryError):
    """Homography cannot be inverted"""


class EmptyInputError(InputError):
    """An operation received an empty collection"""


class OutOfBoundsError(InputError):
    """Pixel coordinates fall outside the raster"""


class InsufficientDataError(InputError):
    """Not enough labeled samples to train"""


class TooFewPointsError(InputError):
    """Fewer than four point correspondences"""


class UntrainedHeadError(InputError):
    """Open-set head used before fitting"""


class ModelFormatError(InputError):
    """Serialized model file is malformed"""


class FootprintParseError(InputError):
    """Footprint file could not be parsed"""

    def __init__(self, message: str, line: Optional[int] = None, field: Optional[str] = None):
        self.line = line
        self.field = field
        location = []
        if line is not None:
            location.append(f"line {line}")
        if field is not None:
            location.append(f"field '{field}'")
        suffix = f" ({', '.join(location)})" if location else ""
        super().__init__(f"{message}{suffix}")


class FootprintValidationError(InputError):
    """Footprint polygon violates an invariant"""

    def __init__(self, building_id: str, message: str):
        self.building_id = building_id
        super().__init__(f"building '{building_id}': {message}")


class ErrorCategorizer:
    """Categorizes errors for exit codes and per-building status flags"""

    ERROR_CATEGORIES = {
        'INPUT_ERROR': {
            'description': 'Input validation failed',
            'exit_code': 2,
            'per_building': False
        },
        'CONFIG_ERROR': {
            'description': 'Configuration invalid',
            'exit_code': 3,
            'per_building': False
        },
        'GEOMETRY_ERROR': {
            'description': 'Degenerate geometric configuration',
            'exit_code': 2,
            'per_building': True
        },
        'TRAINING_ERROR': {
            'description': 'Model training or loading failed',
            'exit_code': 2,
            'per_building': False
        },
        'INTERNAL_ERROR': {
            'description': 'Unexpected internal error',
            'exit_code': 1,
            'per_building': True
        }
    }

    @classmethod
    def categorize_error(cls, error: Exception) -> str:
        """Categorize error based on type"""
        if isinstance(error, ConfigError):
            return 'CONFIG_ERROR'
        if isinstance(error, (InsufficientDataError, UntrainedHeadError, ModelFormatError)):
            return 'TRAINING_ERROR'
        if isinstance(error, GeometryError):
            return 'GEOMETRY_ERROR'
        if isinstance(error, (InputError, FileNotFoundError, IsADirectoryError)):
            return 'INPUT_ERROR'
        return 'INTERNAL_ERROR'

    @classmethod
    def get_error_info(cls, category: str) -> Dict[str, Any]:
        """Get error category information"""
        return cls.ERROR_CATEGORIES.get(category, cls.ERROR_CATEGORIES['INTERNAL_ERROR'])

    @classmethod
    def exit_code(cls, error: Exception) -> int:
        return cls.get_error_info(cls.categorize_error(error))['exit_code']
