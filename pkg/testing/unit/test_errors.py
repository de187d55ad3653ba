import json

import pytest

from street_height.errors import (
    ConfigError,
    DegenerateGeometryError,
    ErrorCategorizer,
    FootprintParseError,
    FootprintValidationError,
    GeometryError,
    InputError,
    ModelFormatError,
    NoVisibleCornerError,
)
from street_height.logging_config import RunContext, configure_logging, run_id_for_seed


class TestErrorCategorizer:
    @pytest.mark.parametrize("error, category, code", [
        (ConfigError("bad"), "CONFIG_ERROR", 3),
        (ModelFormatError("bad"), "TRAINING_ERROR", 2),
        (DegenerateGeometryError("bad"), "GEOMETRY_ERROR", 2),
        (FootprintValidationError("a", "bad"), "INPUT_ERROR", 2),
        (FileNotFoundError("x"), "INPUT_ERROR", 2),
        (RuntimeError("x"), "INTERNAL_ERROR", 1),
    ])
    def test_categories(self, error, category, code):
        assert ErrorCategorizer.categorize_error(error) == category
        assert ErrorCategorizer.exit_code(error) == code

    def test_per_building_flags(self):
        assert ErrorCategorizer.get_error_info("GEOMETRY_ERROR")["per_building"]
        assert not ErrorCategorizer.get_error_info("INPUT_ERROR")["per_building"]

    def test_unknown_category(self):
        assert ErrorCategorizer.get_error_info("NOPE")["exit_code"] == 1

    def test_hierarchy(self):
        assert isinstance(NoVisibleCornerError("x"), GeometryError)
        assert isinstance(FootprintParseError("x"), InputError)


class TestMessages:
    def test_parse_error_location(self):
        error = FootprintParseError("bad corners", line=4, field="buildings.0.corners")
        assert str(error) == "bad corners (line 4, field 'buildings.0.corners')"
        assert (error.line, error.field) == (4, "buildings.0.corners")

    def test_validation_error_names_building(self):
        assert "building 'b7'" in str(FootprintValidationError("b7", "self-intersecting"))


class TestLogging:
    def test_run_id_reproducible(self):
        assert run_id_for_seed(3) == run_id_for_seed(3)
        assert run_id_for_seed(3) != run_id_for_seed(4)
        assert len(run_id_for_seed(None)) == 8

    def test_json_lines(self, capsys):
        configure_logging("INFO", json_output=True)
        RunContext(run_id="abc12345").log_info("calibration accepted", displacement_m=1.2)
        RunContext(run_id="abc12345").log_debug("hidden")
        lines = capsys.readouterr().err.strip().splitlines()
        assert len(lines) == 1
        event = json.loads(lines[0])
        assert event["event"] == "calibration accepted"
        assert event["run_id"] == "abc12345"
        assert event["level"] == "info"

    def test_duration(self):
        assert RunContext().get_duration() >= 0.0
