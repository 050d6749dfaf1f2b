#!/usr/bin/env python3
"""
Linear evaluation: a linear classifier trained on frozen, average-pooled
backbone features of the labeled train split, scored on the test split.
"""
import json
import logging
from pathlib import Path
from typing import Callable, Optional

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.utils.data import DataLoader
from tqdm import tqdm

from augmentation.datasets import EvalDataset
from augmentation.views import Normalization, teacher_policy
from evaluation.features import FeatureSet, extract_features, parameter_hash
from ingest.manifest import open_split, resolve_normalization
from pipeline.checkpoint import load_checkpoint, restore_pair
from pipeline.error_handling import EvaluationError
from shared.metrics_logger import MetricsLogger
from shared.models import DatasetSpec, EvalReport, LinearEvalConfig, StudentAugmentation
from shared.packed_store import UNLABELED, PackedSplit


logger = logging.getLogger(__name__)


def build_classifier(feature_dim: int, num_classes: int, seed: int) -> nn.Linear:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return nn.Linear(feature_dim, num_classes)


@torch.no_grad()
def score_classifier(classifier: nn.Module, test: FeatureSet, num_classes: int) -> tuple[float, float, list[float]]:
    """
    Top-1, top-5 (percent) and per-class accuracy of ``classifier`` on cached features.

    Top-1 is the exact count of correct argmax predictions over the test size.
    """
    if len(test.labels) == 0:
        raise EvaluationError("empty test set")
    logits = classifier(test.features)
    k = min(5, num_classes)
    topk = logits.topk(k, dim=1).indices
    hits = topk == test.labels.unsqueeze(1)
    top1_hits = hits[:, 0]

    per_class = []
    for c in range(num_classes):
        mask = test.labels == c
        per_class.append(100.0 * float(top1_hits[mask].float().mean()) if mask.any() else 0.0)

    top1 = 100.0 * int(top1_hits.sum()) / len(test.labels)
    top5 = 100.0 * int(hits.any(dim=1).sum()) / len(test.labels)
    return top1, top5, per_class


def train_linear_classifier(
    encoder: Callable[[torch.Tensor], torch.Tensor],
    feature_dim: int,
    train_split: PackedSplit,
    test_split: PackedSplit,
    side: int,
    normalization: Normalization,
    num_classes: int,
    config: LinearEvalConfig,
    device: str = "cpu",
    metrics: Optional[MetricsLogger] = None,
    num_workers: int = 0,
    progress: bool = False,
) -> tuple[float, float, list[float]]:
    """
    Train a linear classifier on frozen ``encoder`` features and score it.

    With ``config.augment`` every epoch re-draws crop+flip views of the train
    images through the frozen encoder; otherwise center-view features are
    extracted once and reused.
    """
    if bool((train_split.labels == UNLABELED).any()):
        raise EvaluationError(f"{train_split.path}: linear evaluation needs a fully labeled train split")

    classifier = build_classifier(feature_dim, num_classes, config.seed).to(device)
    optimizer = torch.optim.SGD(
        classifier.parameters(), lr=config.lr, momentum=config.momentum, weight_decay=config.weight_decay
    )
    scheduler = torch.optim.lr_scheduler.MultiStepLR(optimizer, milestones=config.milestones, gamma=config.gamma)
    shuffle = torch.Generator().manual_seed(config.seed)

    cached = None
    augmented = None
    if config.augment:
        policy = teacher_policy("weak", side, StudentAugmentation(), config.seed)
        augmented = EvalDataset(train_split, side, normalization, policy=policy, seed=config.seed)
    else:
        cached = extract_features(encoder, train_split, side, normalization, config.batch_size, device, num_workers)

    for epoch in range(config.epochs):
        classifier.train()
        total_loss, seen = 0.0, 0
        lr = optimizer.param_groups[0]["lr"]

        if augmented is not None:
            augmented.set_epoch(epoch)
            loader = DataLoader(augmented, batch_size=config.batch_size, shuffle=True,
                                generator=shuffle, num_workers=num_workers)
            batches = ((encoder(images.to(device)), labels.to(device)) for images, labels, _ in loader)
        else:
            order = torch.randperm(len(cached.labels), generator=shuffle)
            batches = (
                (cached.features[order[i:i + config.batch_size]].to(device),
                 cached.labels[order[i:i + config.batch_size]].to(device))
                for i in range(0, len(order), config.batch_size)
            )

        for features, labels in tqdm(batches, desc=f"linear {epoch + 1}/{config.epochs}",
                                     disable=not progress, leave=False):
            loss = F.cross_entropy(classifier(features.detach().float()), labels)
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            total_loss += float(loss) * len(labels)
            seen += len(labels)

        scheduler.step()
        if metrics is not None:
            metrics.log({"kind": "linear_epoch", "epoch": epoch + 1, "step": epoch + 1, "lr": lr,
                         "loss": total_loss / max(seen, 1)})

    classifier.eval()
    test = extract_features(encoder, test_split, side, normalization, config.batch_size, device, num_workers)
    return score_classifier(classifier.cpu(), test, num_classes)


def linear_eval(
    checkpoint: Path,
    dataset: DatasetSpec,
    config: LinearEvalConfig,
    device: str = "cpu",
    out_dir: Optional[Path] = None,
    num_workers: int = 0,
    progress: bool = False,
) -> EvalReport:
    """
    Linear evaluation of a checkpoint's student backbone.

    The backbone stays in inference mode with its training-time batch-norm
    statistics and receives no gradient. For STL-10 the train split is the
    5K labeled images.

    Raises:
        CheckpointError: Missing or unreadable checkpoint
        EvaluationError: Checkpoint trained on another dataset, or backbone changed
    """
    payload = load_checkpoint(checkpoint)
    experiment, pair = restore_pair(payload, device)
    if experiment.dataset.name != dataset.name:
        raise EvaluationError(
            f"{checkpoint} was trained on {experiment.dataset.name}; its labels do not match {dataset.name}"
        )

    backbone = pair.student.backbone
    backbone.eval()
    for param in backbone.parameters():
        param.requires_grad = False
    before = parameter_hash(backbone)

    normalization = Normalization(*resolve_normalization(dataset))
    train_split = open_split(dataset.with_split("train"))
    test_split = open_split(dataset.with_split("test"))
    metrics = MetricsLogger(Path(out_dir) / "linear_eval.jsonl") if out_dir is not None else None
    if metrics is not None:
        metrics.log_file.unlink(missing_ok=True)

    @torch.no_grad()
    def encode(images: torch.Tensor) -> torch.Tensor:
        return backbone(images)

    logger.info(
        f"Linear evaluation of {checkpoint} on {dataset.name}: {config.epochs} epochs, lr {config.lr}, "
        f"{'augmented' if config.augment else 'cached'} features"
    )
    top1, top5, per_class = train_linear_classifier(
        encode,
        experiment.backbone.feature_dim,
        train_split,
        test_split,
        dataset.train_side,
        normalization,
        dataset.num_classes,
        config,
        device,
        metrics,
        num_workers,
        progress,
    )

    if parameter_hash(backbone) != before:
        raise EvaluationError("backbone parameters changed during linear evaluation")

    report = EvalReport(
        top1=top1,
        top5=top5,
        per_class_accuracy=per_class,
        config_hash=experiment.config_hash(),
        checkpoint_ref=str(checkpoint),
        dataset=dataset.name,
        num_test=len(test_split),
    )
    if out_dir is not None:
        write_report(report, Path(out_dir) / "linear_eval.json")
    logger.info(f"Linear evaluation: top-1 {top1:.2f}%, top-5 {top5:.2f}%")
    return report


def write_report(report: EvalReport, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump(report.model_dump(mode="json"), f, indent=2, sort_keys=True)


def read_report(path: Path) -> EvalReport:
    with open(path, "r") as f:
        return EvalReport.model_validate(json.load(f))
