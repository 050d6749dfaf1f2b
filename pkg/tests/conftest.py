"""
Shared fixtures: tiny synthetic datasets packed into temp directories.
"""
from pathlib import Path

import numpy as np
import pytest

from ingest.manifest import pack_split
from ingest.readers import RawSplit
from shared.models import DatasetSpec, ExperimentConfig


def synthetic_images(count: int, side: int, seed: int) -> np.ndarray:
    """Class-dependent color blobs over noise, so classes are separable"""
    rng = np.random.default_rng(seed)
    images = rng.integers(0, 64, size=(count, side, side, 3), dtype=np.uint8)
    for i in range(count):
        channel = i % 3
        images[i, :, :, channel] = np.clip(images[i, :, :, channel].astype(int) + 120 + 10 * (i % 10), 0, 255)
    return images


def pack_synthetic(root: Path, name: str, split: str, count: int, seed: int = 0,
                   labeled: bool = True) -> DatasetSpec:
    """Pack ``count`` synthetic images as ``name/split`` under ``root``"""
    spec = DatasetSpec(name=name, root_path=root, split=split)
    labels = np.arange(count) % spec.num_classes if labeled else np.full(count, -1)
    raw = RawSplit(
        ids=np.arange(count),
        labels=labels.astype(np.int64),
        images=synthetic_images(count, spec.image_side, seed),
        source="synthetic",
    )
    pack_split(spec, raw)
    return spec


@pytest.fixture
def tiny_cifar(tmp_path):
    """cifar10-shaped train (32 images) and test (20 images) splits"""
    root = tmp_path / "data"
    pack_synthetic(root, "cifar10", "test", 20, seed=1)
    return pack_synthetic(root, "cifar10", "train", 32, seed=0)


@pytest.fixture
def tiny_config(tiny_cifar):
    """Smallest pretraining config that still exercises warm-up, grouped BN and multi-crop"""
    return ExperimentConfig.model_validate({
        "dataset": {"name": "cifar10", "root_path": str(tiny_cifar.root_path), "split": "train"},
        "batch_size": 8,
        "epochs": 2,
        "queue_capacity": 16,
        "bn_groups": 2,
        "warmup_epochs": 1,
        "multicrop_sides": [32, 16],
        "temps": {"tau_t": 0.04, "tau_s": 0.1},
        "head": {"hidden_dim": 32, "output_dim": 16},
        "knn_every": 1,
        "knn_k": 5,
        "seed": 0,
    })
