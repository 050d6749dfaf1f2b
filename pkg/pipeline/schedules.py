#!/usr/bin/env python3
"""
Learning-rate schedule and optimizer construction for pretraining.
"""
import math
from typing import Optional

import torch
import torch.nn as nn

from shared.models import ExperimentConfig


def lr_at(step: int, config: ExperimentConfig, steps_per_epoch: Optional[int] = None) -> float:
    """
    Learning rate at a 0-based optimizer step.

    Linear ramp from 0 to the peak over the warm-up epochs, then per-step
    cosine decay to 0 over the remaining steps. Warm-up longer than the run
    is clamped to the run length.
    """
    per_epoch = steps_per_epoch if steps_per_epoch is not None else config.steps_per_epoch()
    total = per_epoch * config.epochs
    warmup = min(config.warmup_epochs * per_epoch, total)
    peak = config.peak_lr

    if step < warmup:
        return peak * step / warmup
    if total <= warmup:
        return peak
    progress = min((step - warmup) / (total - warmup), 1.0)
    return peak * 0.5 * (1.0 + math.cos(math.pi * progress))


def lr_curve(config: ExperimentConfig, steps_per_epoch: Optional[int] = None) -> list[float]:
    """The rate of every step of the run"""
    per_epoch = steps_per_epoch if steps_per_epoch is not None else config.steps_per_epoch()
    return [lr_at(step, config, per_epoch) for step in range(per_epoch * config.epochs)]


def set_lr(optimizer: torch.optim.Optimizer, lr: float) -> None:
    for group in optimizer.param_groups:
        group["lr"] = lr


def parameter_groups(model: nn.Module, weight_decay: float) -> list[dict]:
    """Weight decay on weight matrices and kernels only; biases and norm affines are exempt"""
    decay, no_decay = [], []
    for param in model.parameters():
        if not param.requires_grad:
            continue
        (no_decay if param.ndim <= 1 else decay).append(param)
    return [
        {"params": decay, "weight_decay": weight_decay},
        {"params": no_decay, "weight_decay": 0.0},
    ]


def build_optimizer(student: nn.Module, config: ExperimentConfig) -> torch.optim.SGD:
    return torch.optim.SGD(
        parameter_groups(student, config.weight_decay),
        lr=config.peak_lr,
        momentum=config.sgd_momentum,
    )
