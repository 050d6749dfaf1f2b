#!/usr/bin/env python3
"""
Frozen feature extraction over packed splits.
"""
import hashlib
import logging
from dataclasses import dataclass
from typing import Callable

import torch
import torch.nn as nn
from torch.utils.data import DataLoader
from tqdm import tqdm

from augmentation.datasets import EvalDataset
from augmentation.views import Normalization
from shared.packed_store import PackedSplit


logger = logging.getLogger(__name__)


@dataclass
class FeatureSet:
    """Features of a whole split in storage order"""
    features: torch.Tensor
    labels: torch.Tensor
    ids: torch.Tensor


@torch.no_grad()
def extract_features(
    encoder: Callable[[torch.Tensor], torch.Tensor],
    split: PackedSplit,
    side: int,
    normalization: Normalization,
    batch_size: int = 256,
    device: str = "cpu",
    num_workers: int = 0,
    progress: bool = False,
) -> FeatureSet:
    """
    Run ``encoder`` on the center view of every record.

    The caller is responsible for putting modules in eval mode.
    """
    loader = DataLoader(
        EvalDataset(split, side, normalization),
        batch_size=batch_size,
        shuffle=False,
        num_workers=num_workers,
    )
    features, labels, ids = [], [], []
    for images, batch_labels, batch_ids in tqdm(loader, desc="features", disable=not progress, leave=False):
        features.append(encoder(images.to(device)).float().cpu())
        labels.append(batch_labels)
        ids.append(batch_ids)
    return FeatureSet(features=torch.cat(features), labels=torch.cat(labels), ids=torch.cat(ids))


def parameter_hash(module: nn.Module) -> str:
    """SHA-256 over every parameter and buffer, in state-dict order"""
    digest = hashlib.sha256()
    for name, tensor in module.state_dict().items():
        digest.update(name.encode("utf-8"))
        digest.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()
