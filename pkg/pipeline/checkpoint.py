#!/usr/bin/env python3
"""
Checkpoint archives for pretraining runs.

An archive is a torch.save'd dict with JSON-able ``meta`` (config hash,
epoch, step, ...), the experiment config and named state dicts of the
student, teacher, optimizer and memory queue. The metadata is also written
as a JSON sidecar so runs can be inspected without loading torch.
"""
import json
import logging
import re
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Optional

import torch

from model.networks import StudentTeacherPair, init_pair
from pipeline.error_handling import CheckpointError
from shared.models import ExperimentConfig


EPOCH_PATTERN = re.compile(r"epoch_(\d{4})\.pt$")


@dataclass
class CheckpointMeta:
    """Position of a checkpoint within its run"""
    config_hash: str
    epoch: int
    step: int
    batches_done: int = 0
    kind: str = "epoch"
    dataset: str = ""
    knn_top1: Optional[float] = None
    loss_sum: float = 0.0
    loss_count: int = 0


def save_checkpoint(
    path: Path,
    meta: CheckpointMeta,
    config: ExperimentConfig,
    pair: StudentTeacherPair,
    optimizer: Optional[torch.optim.Optimizer] = None,
    queue_state: Optional[dict[str, Any]] = None,
    extra: Optional[dict[str, Any]] = None,
) -> Path:
    """
    Write a checkpoint archive atomically, plus its JSON sidecar.

    Raises:
        CheckpointError: If the archive cannot be written
    """
    path = Path(path)
    payload = {
        "meta": asdict(meta),
        "config": config.model_dump(mode="json"),
        "student": pair.student.state_dict(),
        "teacher": pair.teacher.state_dict(),
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "queue": queue_state,
        "rng_state": torch.get_rng_state(),
        "extra": extra or {},
    }

    temp_path = path.with_suffix(".tmp")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save(payload, temp_path)
        temp_path.replace(path)
        with open(path.with_suffix(".json"), "w") as f:
            json.dump(asdict(meta), f, indent=2, sort_keys=True)
    except OSError as e:
        if temp_path.exists():
            temp_path.unlink()
        raise CheckpointError(f"Failed to write checkpoint {path}: {e}") from e
    return path


def load_checkpoint(path: Path, map_location: str = "cpu") -> dict[str, Any]:
    """
    Read a checkpoint archive.

    Raises:
        CheckpointError: Missing or unreadable archive, naming the path
    """
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location=map_location, weights_only=False)
    except Exception as e:
        raise CheckpointError(f"{path}: unreadable checkpoint: {e}") from e
    for key in ("meta", "config", "student", "teacher"):
        if key not in payload:
            raise CheckpointError(f"{path}: archive has no '{key}' entry")
    return payload


def restore_pair(payload: dict[str, Any], device: str = "cpu") -> tuple[ExperimentConfig, StudentTeacherPair]:
    """Rebuild the config and the student/teacher pair stored in a checkpoint"""
    config = ExperimentConfig.model_validate(payload["config"])
    predictor_dim = config.predictor_hidden_dim if config.objective == "byol_style" else None
    pair = init_pair(config.backbone, config.head, config.seed, config.ema_momentum, predictor_dim)
    pair.student.load_state_dict(payload["student"])
    pair.teacher.load_state_dict(payload["teacher"])
    return config, pair.to(device)


class CheckpointManager:
    """
    Rolling checkpoints of one run.

    Keeps the last ``keep`` epoch archives plus best.pt (by kNN accuracy),
    final.pt, and the interrupt.pt/diverged.pt snapshots.
    """

    def __init__(self, directory: Path, keep: int = 2):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)
        self.keep = keep
        self.logger = logging.getLogger(__name__)

    def epoch_path(self, epoch: int) -> Path:
        return self.directory / f"epoch_{epoch:04d}.pt"

    @property
    def best_path(self) -> Path:
        return self.directory / "best.pt"

    @property
    def final_path(self) -> Path:
        return self.directory / "final.pt"

    @property
    def interrupt_path(self) -> Path:
        return self.directory / "interrupt.pt"

    @property
    def diverged_path(self) -> Path:
        return self.directory / "diverged.pt"

    def epoch_checkpoints(self) -> list[Path]:
        return sorted(p for p in self.directory.glob("epoch_*.pt") if EPOCH_PATTERN.search(p.name))

    def prune(self) -> None:
        """Drop epoch archives beyond the newest ``keep``"""
        epochs = self.epoch_checkpoints()
        for path in epochs[:max(len(epochs) - self.keep, 0)]:
            path.unlink(missing_ok=True)
            path.with_suffix(".json").unlink(missing_ok=True)
            self.logger.debug(f"Removed old checkpoint {path.name}")

    def read_meta(self, path: Path) -> Optional[dict[str, Any]]:
        sidecar = Path(path).with_suffix(".json")
        if not sidecar.exists():
            return None
        try:
            with open(sidecar, "r") as f:
                return json.load(f)
        except (OSError, json.JSONDecodeError):
            return None

    def latest_resumable(self) -> Optional[Path]:
        """The epoch or interrupt archive furthest into the run"""
        candidates = self.epoch_checkpoints()
        if self.interrupt_path.exists():
            candidates.append(self.interrupt_path)

        best_path, best_step = None, -1
        for path in candidates:
            meta = self.read_meta(path)
            step = meta["step"] if meta else -1
            if step > best_step:
                best_path, best_step = path, step
        return best_path
