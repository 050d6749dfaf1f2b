"""
Tests for configuration loading and experiment validation.
"""
import pytest

from pipeline.error_handling import ConfigurationError
from shared.config import deep_merge, load_config
from shared.models import (
    AugmentationPolicy,
    DatasetSpec,
    ExperimentConfig,
    LinearEvalConfig,
    SweepSpec,
    TemperaturePair,
)


BASE_TOML = """
schema_version = 1

[app]
data_directory = "{data}"
runs_directory = "{runs}"
device = "cpu"

[experiment]
batch_size = 256
epochs = 200

[experiment.dataset]
name = "cifar10"

[experiment.temps]
tau_t = 0.04
tau_s = 0.1
"""


@pytest.fixture
def config_file(tmp_path, monkeypatch):
    """Minimal config.toml in a temp directory, with env overrides cleared"""
    for var in ("RESSL_DATA_DIR", "RESSL_RUNS_DIR", "RESSL_DEVICE", "RESSL_NUM_WORKERS", "RESSL_LOG_LEVEL"):
        monkeypatch.delenv(var, raising=False)
    path = tmp_path / "config.toml"
    path.write_text(BASE_TOML.format(data=tmp_path / "data", runs=tmp_path / "runs"))
    return path


def experiment(**overrides) -> ExperimentConfig:
    data = {"dataset": {"name": "cifar10"}}
    data.update(overrides)
    return ExperimentConfig.model_validate(data)


class TestLoadConfig:
    """Tests for the TOML + .env loader"""

    def test_loads_sections(self, config_file, tmp_path):
        """Test that app and experiment sections are parsed"""
        config = load_config(str(config_file), env_file=str(tmp_path / "missing.env"))

        assert config.app.device == "cpu"
        assert config.experiment.batch_size == 256
        assert config.experiment.dataset.root_path == tmp_path / "data"
        assert config.experiment.temps.tau_t == 0.04

    def test_missing_file_names_path(self, tmp_path):
        """Test that a missing config file is a configuration error naming the path"""
        missing = tmp_path / "nope.toml"
        with pytest.raises(ConfigurationError, match="nope.toml"):
            load_config(str(missing))

    def test_unparsable_file(self, tmp_path):
        """Test that broken TOML is a configuration error"""
        path = tmp_path / "broken.toml"
        path.write_text("[experiment\nbatch_size = ")
        with pytest.raises(ConfigurationError):
            load_config(str(path))

    def test_unknown_schema_version(self, config_file):
        """Test that a newer schema version is refused"""
        text = config_file.read_text().replace("schema_version = 1", "schema_version = 2")
        config_file.write_text(text)
        with pytest.raises(ConfigurationError, match="schema_version"):
            load_config(str(config_file))

    def test_overrides_are_merged(self, config_file):
        """Test that command-line overrides replace TOML values"""
        config = load_config(str(config_file), overrides={"experiment": {"epochs": 2, "temps": {"tau_t": 0.05}}})

        assert config.experiment.epochs == 2
        assert config.experiment.temps.tau_t == 0.05
        assert config.experiment.temps.tau_s == 0.1

    def test_tau_t_above_tau_s_refused(self, config_file):
        """Test that a teacher temperature above the student's is a config error"""
        with pytest.raises(ConfigurationError, match="tau_t"):
            load_config(str(config_file), overrides={"experiment": {"temps": {"tau_t": 0.2}}})

    def test_environment_overrides(self, config_file, monkeypatch):
        """Test that RESSL_* variables override [app]"""
        monkeypatch.setenv("RESSL_DEVICE", "cuda:1")
        monkeypatch.setenv("RESSL_NUM_WORKERS", "7")

        config = load_config(str(config_file))

        assert config.app.device == "cuda:1"
        assert config.app.num_workers == 7

    def test_missing_dataset_name(self, tmp_path):
        """Test that an experiment without a dataset is refused"""
        path = tmp_path / "config.toml"
        path.write_text("schema_version = 1\n[experiment]\nepochs = 1\n")
        with pytest.raises(ConfigurationError, match="dataset.name"):
            load_config(str(path))

    def test_to_dict_round_trips_experiment(self, config_file):
        """Test that the serialized experiment validates back to the same hash"""
        config = load_config(str(config_file))
        restored = ExperimentConfig.model_validate(config.to_dict()["experiment"])
        assert restored.config_hash() == config.experiment.config_hash()


class TestDeepMerge:
    """Tests for nested override merging"""

    def test_nested_merge_keeps_siblings(self):
        base = {"a": {"b": 1, "c": 2}, "d": 3}
        merged = deep_merge(base, {"a": {"b": 10}})
        assert merged == {"a": {"b": 10, "c": 2}, "d": 3}
        assert base["a"]["b"] == 1


class TestExperimentConfig:
    """Tests for experiment invariants and dataset-class defaults"""

    def test_small_dataset_defaults(self):
        config = experiment()
        assert config.queue_capacity == 4096
        assert config.ema_momentum == 0.99
        assert config.multicrop_sides == [32]

    def test_medium_dataset_defaults(self):
        config = experiment(dataset={"name": "stl10", "split": "train_unlabeled_plus_labeled"})
        assert config.queue_capacity == 16384
        assert config.ema_momentum == 0.996
        assert config.multicrop_sides == [64]

    def test_peak_lr_scales_with_batch(self):
        """Test the 0.06 * batch / 256 default"""
        assert experiment().peak_lr == pytest.approx(0.06)
        assert experiment(batch_size=512).peak_lr == pytest.approx(0.12)
        assert experiment(base_lr=0.3).peak_lr == 0.3

    def test_batch_larger_than_queue_refused(self):
        with pytest.raises(ValueError, match="queue_capacity"):
            experiment(batch_size=512, queue_capacity=256, bn_groups=8)

    def test_batch_not_divisible_by_bn_groups(self):
        with pytest.raises(ValueError, match="bn_groups"):
            experiment(batch_size=100, bn_groups=8)

    def test_first_crop_side_must_be_canonical(self):
        with pytest.raises(ValueError, match="canonical"):
            experiment(multicrop_sides=[24, 32])

    def test_unknown_teacher_augmentation(self):
        with pytest.raises(ValueError, match="teacher augmentation"):
            experiment(teacher_augmentation="crop+sepia")

    def test_momentum_range(self):
        with pytest.raises(ValueError):
            experiment(ema_momentum=1.0)

    def test_config_hash_ignores_root_path(self):
        a = experiment(dataset={"name": "cifar10", "root_path": "/a"})
        b = experiment(dataset={"name": "cifar10", "root_path": "/b"})
        assert a.config_hash() == b.config_hash()
        assert a.config_hash() != experiment(epochs=10).config_hash()

    def test_updated_revalidates(self):
        with pytest.raises(ValueError):
            experiment().updated(bn_groups=3)

    def test_steps_per_epoch_drops_last(self):
        assert experiment().steps_per_epoch() == 50000 // 256


class TestTemperaturePair:
    """Tests for temperature validation"""

    def test_equal_temperatures_allowed(self):
        assert TemperaturePair(tau_t=0.1, tau_s=0.1).tau_t == 0.1

    def test_nonpositive_refused(self):
        with pytest.raises(ValueError):
            TemperaturePair(tau_t=0.0, tau_s=0.1)

    def test_weak_sharpening_warns(self, caplog):
        TemperaturePair(tau_t=0.07, tau_s=0.1)
        assert "collapse" in caplog.text


class TestDatasetSpec:
    """Tests for dataset identification"""

    def test_fills_side_and_classes(self):
        spec = DatasetSpec(name="tiny_imagenet")
        assert spec.image_side == 64
        assert spec.num_classes == 200
        assert spec.train_side == 64

    def test_wrong_side_refused(self):
        with pytest.raises(ValueError):
            DatasetSpec(name="cifar10", image_side=64)

    def test_unlabeled_split_is_stl10_only(self):
        with pytest.raises(ValueError):
            DatasetSpec(name="cifar10", split="train_unlabeled_plus_labeled")

    def test_expected_counts(self):
        assert DatasetSpec(name="stl10", split="train_unlabeled_plus_labeled").expected_count == 105000
        assert DatasetSpec(name="stl10", split="test").expected_count == 8000


class TestAugmentationPolicy:
    """Tests for view generator parameters"""

    def test_weak_policy_rejects_color(self):
        with pytest.raises(ValueError, match="weak"):
            AugmentationPolicy(kind="weak", grayscale_prob=0.2)

    def test_crop_ratio_order(self):
        with pytest.raises(ValueError):
            AugmentationPolicy(kind="weak", crop_ratio_low=0.9, crop_ratio_high=0.5)


class TestLinearEvalConfig:
    """Tests for the linear protocol"""

    def test_lr_scales_with_batch(self):
        assert LinearEvalConfig(batch_size=512).lr == pytest.approx(60.0)

    def test_milestones_inside_run(self):
        with pytest.raises(ValueError):
            LinearEvalConfig(epochs=50, milestones=[60, 80])

    def test_weight_decay_refused(self):
        with pytest.raises(ValueError):
            LinearEvalConfig(weight_decay=1e-4)


class TestSweepSpec:
    """Tests for derived sweep configs"""

    def test_values_sorted_and_only_axis_changes(self):
        base = experiment()
        spec = SweepSpec(base=base, axis="tau_t", values=[0.05, 0.03, 0.04], budget_epochs=10)
        rows = spec.derived_configs()

        assert [value for value, _ in rows] == [0.03, 0.04, 0.05]
        for value, config in rows:
            assert config.temps.tau_t == value
            assert config.temps.tau_s == base.temps.tau_s
            assert config.epochs == 10
            assert config.queue_capacity == base.queue_capacity

    def test_augmentation_values_keep_order(self):
        spec = SweepSpec(base=experiment(), axis="teacher_augmentation", values=["weak", "contrastive", "none"])
        assert spec.ordered_values() == ["weak", "contrastive", "none"]

    def test_queue_values_cast_to_int(self):
        spec = SweepSpec(base=experiment(), axis="queue_capacity", values=["4096", "256"])
        assert [v for v, _ in spec.derived_configs()] == [256, 4096]

    def test_empty_values_refused(self):
        with pytest.raises(ValueError):
            SweepSpec(base=experiment(), axis="tau_t", values=[])
