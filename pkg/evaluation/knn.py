#!/usr/bin/env python3
"""
Weighted k-nearest-neighbour classification on cosine similarity.
"""
import logging
from pathlib import Path

import torch
import torch.nn.functional as F

from augmentation.views import Normalization
from evaluation.features import FeatureSet, extract_features
from ingest.manifest import open_split, resolve_normalization
from pipeline.checkpoint import load_checkpoint, restore_pair
from pipeline.error_handling import EvaluationError
from shared.models import DatasetSpec
from shared.packed_store import UNLABELED


logger = logging.getLogger(__name__)


def knn_predict(
    features: torch.Tensor,
    bank: torch.Tensor,
    bank_labels: torch.Tensor,
    num_classes: int,
    k: int,
    temperature: float,
) -> torch.Tensor:
    """
    Class scores from the k most similar bank rows, each voting exp(sim / t).

    Args:
        features: [B, D] unit-norm queries
        bank: [N, D] unit-norm memory bank
        bank_labels: [N] class indices of the bank
        num_classes: Number of classes
        k: Neighbours per query
        temperature: Vote temperature

    Returns:
        [B, C] scores
    """
    sim = features @ bank.t()
    sim_weight, sim_index = sim.topk(k=k, dim=-1)
    sim_labels = bank_labels[sim_index]
    weights = (sim_weight / temperature).exp()
    one_hot = F.one_hot(sim_labels, num_classes).to(weights.dtype)
    return (one_hot * weights.unsqueeze(-1)).sum(dim=1)


def knn_top1(
    train: FeatureSet,
    test: FeatureSet,
    num_classes: int,
    k: int = 200,
    temperature: float = 0.1,
    chunk_size: int = 1024,
) -> float:
    """
    Top-1 accuracy (percent) of the weighted kNN classifier.

    Raises:
        EvaluationError: If k exceeds the bank size
    """
    labeled = train.labels != UNLABELED
    bank = F.normalize(train.features[labeled], dim=1)
    bank_labels = train.labels[labeled]
    if k > len(bank):
        raise EvaluationError(f"k={k} exceeds the {len(bank)} labeled train samples")
    if len(test.labels) == 0:
        raise EvaluationError("empty test set")

    queries = F.normalize(test.features, dim=1)
    correct = 0
    for start in range(0, len(queries), chunk_size):
        scores = knn_predict(queries[start:start + chunk_size], bank, bank_labels, num_classes, k, temperature)
        correct += int((scores.argmax(dim=1) == test.labels[start:start + chunk_size]).sum())
    return 100.0 * correct / len(queries)


def knn_eval(
    checkpoint: Path,
    dataset: DatasetSpec,
    k: int = 200,
    temperature: float = 0.1,
    device: str = "cpu",
    batch_size: int = 256,
    num_workers: int = 0,
    use_teacher: bool = False,
) -> float:
    """
    kNN top-1 of a checkpoint's backbone features: labeled train split as the bank, test split as queries.

    Raises:
        EvaluationError: Dataset mismatch with the checkpoint, or k too large
    """
    payload = load_checkpoint(checkpoint)
    config, pair = restore_pair(payload, device)
    if config.dataset.name != dataset.name:
        raise EvaluationError(f"{checkpoint} was trained on {config.dataset.name}, not {dataset.name}")

    model = pair.teacher if use_teacher else pair.student
    model.eval()
    normalization = Normalization(*resolve_normalization(dataset))
    side = dataset.train_side

    train_split = open_split(dataset.with_split("train"))
    test_split = open_split(dataset.with_split("test"))
    train = extract_features(model.features, train_split, side, normalization, batch_size, device, num_workers)
    test = extract_features(model.features, test_split, side, normalization, batch_size, device, num_workers)

    top1 = knn_top1(train, test, dataset.num_classes, k, temperature)
    logger.info(f"kNN top-1 of {checkpoint} on {dataset.name}: {top1:.2f}% (k={k}, t={temperature})")
    return top1
