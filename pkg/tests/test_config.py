"""Tests for config module"""

import pytest

from src.config import DEFAULT_CONFIG_PATH, RunConfig, apply_overrides, dump_config, load_config
from src.errors import ConfigurationError
from src.seeding import derive_seed


def test_default_file_matches_built_in_defaults():
    """Test configs/default.yaml describes the built-in defaults"""
    assert load_config(DEFAULT_CONFIG_PATH) == RunConfig()


def test_defaults():
    """Test the desk-scale default values"""
    config = load_config()
    assert config.encoder.width == 32 and config.encoder.max_seq_len == 64
    assert config.training.steps == 500
    assert [t.task_id for t in config.tasks] == ["majority", "position"]
    assert config.gradnorm.enabled and config.gradnorm.balance_at == "cloud"


def test_dump_is_reloadable(tmp_path):
    """Test a dumped config loads back equal"""
    config = load_config(overrides=["training.steps=7", "tasks.1.position=3"])
    path = tmp_path / "run.yaml"
    path.write_text(dump_config(config))
    assert load_config(path) == config


class TestOverrides:
    def test_scalar_override(self):
        """Test dotted overrides are parsed as YAML scalars"""
        config = load_config(overrides=["training.steps=3", "gradnorm.enabled=false", "optimizer.lr=1e-2"])
        assert config.training.steps == 3
        assert config.gradnorm.enabled is False
        assert config.optimizer.lr == pytest.approx(1e-2)
        assert config.gradnorm_state() is None

    def test_list_index_override(self):
        """Test tasks.<i>.field reaches into the default task list"""
        config = load_config(overrides=["tasks.1.kind=parity", "tasks.1.num_classes=2"])
        assert config.tasks[1].kind == "parity"
        assert config.task_specs()[1].num_classes == 2

    def test_later_override_wins(self):
        """Test overrides apply in order"""
        assert load_config(overrides=["seed=1", "seed=2"]).seed == 2

    def test_seed_argument_wins(self):
        """Test an explicit seed replaces the document's"""
        assert load_config(overrides=["seed=1"], seed=9).seed == 9

    def test_malformed_override(self):
        """Test an override without '=' names --set"""
        with pytest.raises(ConfigurationError) as exc_info:
            apply_overrides({}, ["training.steps"])
        assert exc_info.value.field == "--set"

    def test_list_index_out_of_range(self):
        """Test a missing task index is rejected"""
        with pytest.raises(ConfigurationError):
            load_config(overrides=["tasks.5.kind=parity"])


class TestValidation:
    def test_zero_steps(self):
        """Test steps = 0 names training.steps"""
        with pytest.raises(ConfigurationError) as exc_info:
            load_config(overrides=["training.steps=0"])
        assert exc_info.value.field == "training.steps"

    def test_heads_must_divide_width(self):
        """Test width 30 with 4 heads names encoder.heads"""
        with pytest.raises(ConfigurationError) as exc_info:
            load_config(overrides=["encoder.width=30"])
        assert exc_info.value.field == "encoder.heads"

    def test_parity_needs_two_classes(self):
        """Test a 4-class parity task names its num_classes"""
        with pytest.raises(ConfigurationError) as exc_info:
            load_config(overrides=["tasks.1.kind=parity"])
        assert exc_info.value.field == "tasks.1.num_classes"

    def test_task_longer_than_encoder(self):
        """Test task sequences must fit max_seq_len"""
        with pytest.raises(ConfigurationError) as exc_info:
            load_config(overrides=["tasks.0.seq_len=65"])
        assert exc_info.value.field == "tasks.0.seq_len"

    def test_overlapping_pooling(self):
        """Test window > stride is rejected"""
        with pytest.raises(ConfigurationError) as exc_info:
            load_config(overrides=["encoder.pooling.window=3"])
        assert exc_info.value.field == "encoder.pooling.window"

    def test_unknown_key(self):
        """Test misspelt keys are rejected"""
        with pytest.raises(ConfigurationError):
            load_config(overrides=["training.stepz=3"])

    def test_duplicate_task_ids(self):
        """Test task ids must be unique"""
        with pytest.raises(ConfigurationError):
            load_config(overrides=["tasks.1.task_id=majority"])


class TestDocuments:
    def test_missing_file_names_path(self, tmp_path):
        """Test a missing config file is reported with its path"""
        missing = tmp_path / "absent.yaml"
        with pytest.raises(ConfigurationError) as exc_info:
            load_config(missing)
        assert str(missing) in str(exc_info.value)
        assert exc_info.value.field == "config"

    def test_invalid_yaml(self, tmp_path):
        """Test unparsable YAML is a configuration error"""
        path = tmp_path / "bad.yaml"
        path.write_text("encoder: [unclosed\n")
        with pytest.raises(ConfigurationError):
            load_config(path)

    def test_empty_document(self, tmp_path):
        """Test an empty file gives the defaults"""
        path = tmp_path / "empty.yaml"
        path.write_text("")
        assert load_config(path) == RunConfig()

    def test_partial_document(self, tmp_path):
        """Test unspecified sections keep their defaults"""
        path = tmp_path / "partial.yaml"
        path.write_text("seed: 4\ntraining:\n  steps: 20\n")
        config = load_config(path)
        assert (config.seed, config.training.steps, config.training.batch_size) == (4, 20, 16)


def test_environment_override(monkeypatch):
    """Test DEVICE_TUNING_ variables reach nested fields"""
    monkeypatch.setenv("DEVICE_TUNING_SEED", "5")
    monkeypatch.setenv("DEVICE_TUNING_TRAINING__STEPS", "12")
    config = load_config()
    assert (config.seed, config.training.steps) == (5, 12)


class TestConversions:
    def test_derived_seeds(self):
        """Test init and training seeds derive from the root seed"""
        config = load_config(seed=3)
        assert config.encoder_config().seed == derive_seed(3, "init")
        assert config.training_seed() == derive_seed(3, "training")

    def test_task_seeds_differ(self):
        """Test each task gets its own data seed"""
        seeds = [t.seed for t in load_config().task_specs()]
        assert len(set(seeds)) == len(seeds)

    def test_decoder_shares_encoder_width(self):
        """Test decoder heads follow the task list"""
        decoder = load_config(overrides=["encoder.width=16"]).decoder_config()
        assert decoder.width == 16
        assert decoder.task_ids == ["majority", "position"]

    def test_gradcheck_model(self):
        """Test the tiny model has two three-class tasks"""
        encoder, decoder = load_config().gradcheck_model_configs()
        assert (encoder.width, encoder.max_seq_len, encoder.heads) == (8, 8, 2)
        assert [(t.task_id, t.num_classes) for t in decoder.tasks] == [("task_0", 3), ("task_1", 3)]

    def test_channel_model(self):
        """Test channel settings become a ChannelModel"""
        channel = load_config(overrides=["channel.rtt=0.2"]).channel_model()
        assert channel.rtt == pytest.approx(0.2)
