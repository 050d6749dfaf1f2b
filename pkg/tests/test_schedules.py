"""
Tests for the learning-rate schedule and optimizer parameter groups.
"""
import math

import pytest
import torch.nn as nn

from pipeline.schedules import build_optimizer, lr_at, lr_curve, parameter_groups, set_lr
from shared.models import DatasetSpec, ExperimentConfig


@pytest.fixture
def config(tmp_path):
    return ExperimentConfig(dataset=DatasetSpec(name="cifar10", root_path=tmp_path), batch_size=256, epochs=20)


class TestLrAt:
    """Tests for warm-up plus cosine decay"""

    def test_peak_scales_with_batch_size(self, config):
        assert config.peak_lr == pytest.approx(0.06)
        assert config.updated(batch_size=512).peak_lr == pytest.approx(0.12)

    def test_starts_at_zero(self, config):
        assert lr_at(0, config, steps_per_epoch=10) == 0.0

    def test_linear_warmup(self, config):
        assert lr_at(25, config, steps_per_epoch=10) == pytest.approx(0.03)

    def test_peak_at_end_of_warmup(self, config):
        """Test that the rate reaches its peak after exactly five epochs"""
        assert lr_at(50, config, steps_per_epoch=10) == pytest.approx(0.06)

    def test_cosine_midpoint(self, config):
        assert lr_at(125, config, steps_per_epoch=10) == pytest.approx(0.03)

    def test_decays_to_zero(self, config):
        last = lr_at(199, config, steps_per_epoch=10)
        assert 0.0 < last < 1e-4
        assert lr_at(200, config, steps_per_epoch=10) == pytest.approx(0.0, abs=1e-12)
        assert lr_at(500, config, steps_per_epoch=10) == pytest.approx(0.0, abs=1e-12)

    def test_warmup_longer_than_run(self, config):
        short = config.updated(epochs=2)
        assert lr_at(10, short, steps_per_epoch=10) == pytest.approx(0.03)
        assert lr_at(20, short, steps_per_epoch=10) == pytest.approx(0.06)

    def test_curve_is_unimodal(self, config):
        curve = lr_curve(config, steps_per_epoch=10)
        peak = curve.index(max(curve))
        assert len(curve) == 200
        assert peak == 50
        assert all(a <= b for a, b in zip(curve[:peak], curve[1:peak + 1]))
        assert all(a >= b for a, b in zip(curve[peak:], curve[peak + 1:]))

    def test_default_steps_from_dataset_size(self, config):
        assert config.steps_per_epoch() == 50000 // 256
        assert len(lr_curve(config)) == 20 * (50000 // 256)

    def test_explicit_base_lr(self, config):
        fixed = config.updated(base_lr=0.5)
        expected = 0.5 * 0.5 * (1.0 + math.cos(math.pi * 0.5))
        assert lr_at(125, fixed, steps_per_epoch=10) == pytest.approx(expected)


class TestParameterGroups:
    """Tests for weight-decay exemptions"""

    def test_biases_and_norms_exempt(self):
        model = nn.Sequential(nn.Conv2d(3, 4, 3), nn.BatchNorm2d(4), nn.Linear(4, 2))
        decay, no_decay = parameter_groups(model, 5e-4)

        assert decay["weight_decay"] == 5e-4
        assert no_decay["weight_decay"] == 0.0
        assert all(p.ndim > 1 for p in decay["params"])
        assert all(p.ndim <= 1 for p in no_decay["params"])
        assert len(decay["params"]) == 2
        assert len(no_decay["params"]) == 4

    def test_frozen_parameters_skipped(self):
        model = nn.Linear(3, 2)
        model.weight.requires_grad = False
        decay, no_decay = parameter_groups(model, 1e-4)
        assert decay["params"] == []
        assert len(no_decay["params"]) == 1

    def test_optimizer_settings(self, config):
        optimizer = build_optimizer(nn.Linear(3, 2), config)
        assert optimizer.defaults["momentum"] == 0.9
        set_lr(optimizer, 0.01)
        assert [g["lr"] for g in optimizer.param_groups] == [0.01, 0.01]
