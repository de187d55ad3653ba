import json

import pytest

from street_height.config import PipelineConfig, TrainingConfig, load_config
from street_height.errors import ConfigError


@pytest.fixture(autouse=True)
def clean_env(monkeypatch, tmp_path):
    """Keep a stray .env or STREET_HEIGHT_* variable out of these tests"""
    monkeypatch.chdir(tmp_path)
    for name in ("HEIGHT_STEP", "GATE_PX", "SUBPIXEL_REFINE", "ITERATIONS", "CLASSIFIER", "SEED"):
        # set first so teardown also removes values a .env file loads
        monkeypatch.setenv(f"STREET_HEIGHT_{name}", "")
        monkeypatch.delenv(f"STREET_HEIGHT_{name}")


class TestDefaults:
    def test_pipeline_defaults(self):
        config = PipelineConfig()
        assert config.height_step == 0.5
        assert config.gate_px == 3.0
        assert config.calibration_threshold_m == 3.0
        assert config.uses_oracle
        assert config.edgeness_variant == "boosted"
        assert config.calibration_resolution_px == 0.5

    def test_negative_preference_is_a_training_setting(self, tmp_path):
        assert TrainingConfig().negative_preference == "far"
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"pipeline": {"negative_preference": "near"}}))
        with pytest.raises(ConfigError):
            load_config(path, use_env=False)

    def test_training_defaults(self):
        config = TrainingConfig()
        assert (config.alpha, config.learning_rate, config.decay, config.decay_every) == (0.5, 0.1, 0.95, 1000)
        assert config.batch_size == 30

    def test_no_file(self):
        pipeline, training = load_config()
        assert pipeline == PipelineConfig()
        assert training == TrainingConfig()


class TestValidation:
    @pytest.mark.parametrize("kwargs", [{"height_step": 0}, {"edgeness_variant": "other"},
                                        {"window_px": 10}, {"method": "guess"},
                                        {"calibration_resolution_px": -0.5}])
    def test_invalid_pipeline(self, kwargs):
        with pytest.raises(ConfigError):
            PipelineConfig(**kwargs)

    def test_invalid_training(self):
        with pytest.raises(ConfigError):
            TrainingConfig(alpha=1.5)

    def test_overrides_skip_none(self):
        config = PipelineConfig().with_overrides(height_step=0.25, seed=None)
        assert config.height_step == 0.25
        assert config.seed == 0

    def test_overrides_are_validated(self):
        with pytest.raises(ConfigError):
            PipelineConfig().with_overrides(gate_px=-1.0)


class TestFiles:
    def test_sections(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"pipeline": {"height_step": 0.25}, "training": {"iterations": 10}}))
        pipeline, training = load_config(path)
        assert pipeline.height_step == 0.25
        assert training.iterations == 10

    def test_unknown_key(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"pipeline": {"step": 1}}))
        with pytest.raises(ConfigError):
            load_config(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(tmp_path / "nope.json")

    def test_bad_json(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text("{\n")
        with pytest.raises(ConfigError):
            load_config(path)

    def test_shipped_config_loads(self, demo_scene_path):
        pipeline, training = load_config(demo_scene_path.parent / "pipeline_config.json", use_env=False)
        assert pipeline.height_step == 0.5
        assert training.embedding_dim == 128
        assert pipeline == PipelineConfig()


class TestEnvironment:
    def test_overrides(self, monkeypatch):
        monkeypatch.setenv("STREET_HEIGHT_HEIGHT_STEP", "0.25")
        monkeypatch.setenv("STREET_HEIGHT_SUBPIXEL_REFINE", "false")
        monkeypatch.setenv("STREET_HEIGHT_ITERATIONS", "7")
        pipeline, training = load_config()
        assert pipeline.height_step == 0.25
        assert pipeline.subpixel_refine is False
        assert training.iterations == 7

    def test_env_beats_file(self, monkeypatch, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"pipeline": {"gate_px": 5}}))
        monkeypatch.setenv("STREET_HEIGHT_GATE_PX", "4")
        pipeline, _ = load_config(path)
        assert pipeline.gate_px == 4.0

    def test_disabled(self, monkeypatch):
        monkeypatch.setenv("STREET_HEIGHT_HEIGHT_STEP", "0.25")
        pipeline, _ = load_config(use_env=False)
        assert pipeline.height_step == 0.5

    def test_unparseable(self, monkeypatch):
        monkeypatch.setenv("STREET_HEIGHT_SEED", "many")
        with pytest.raises(ConfigError):
            load_config()

    def test_dotenv_file(self, tmp_path):
        (tmp_path / ".env").write_text("STREET_HEIGHT_CLASSIFIER=models/run1\n")
        pipeline, _ = load_config()
        assert pipeline.classifier == "models/run1"
        assert not pipeline.uses_oracle
