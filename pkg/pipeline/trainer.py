"""
Pretraining loop.

Each step augments a batch twice (weak views for the teacher, contrastive
views for the student), embeds both paths, computes the objective against
the memory queue, updates the student, moves the teacher by EMA and finally
enqueues the teacher embeddings.
"""
import logging
import math
import signal
import threading
from collections import deque
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional

import torch
from torch.utils.data import DataLoader
from tqdm import tqdm

from augmentation.datasets import ViewPairDataset
from augmentation.views import Normalization, student_policy, teacher_policy
from evaluation.features import extract_features
from evaluation.knn import knn_top1
from ingest.batches import EpochBatchSampler
from ingest.manifest import open_split, resolve_normalization
from model.networks import StudentTeacherPair, forward_embed, init_pair, l2_normalize, predictor_forward
from pipeline.checkpoint import CheckpointManager, CheckpointMeta, load_checkpoint, save_checkpoint
from pipeline.error_handling import CheckpointError, DataIterationError, ResslError, TrainingDivergedError
from pipeline.schedules import build_optimizer, lr_at, set_lr
from relational.ema import ema_update
from relational.losses import cosine_loss, multicrop_info_nce_loss, multicrop_relational_loss, teacher_entropy
from relational.queue import MemoryQueue
from shared.metrics_logger import MetricsLogger
from shared.models import EpochMetrics, ExperimentConfig, StepMetrics


@dataclass
class TrainState:
    """Everything that changes during pretraining"""
    pair: StudentTeacherPair
    queue: MemoryQueue
    optimizer: torch.optim.Optimizer
    epoch: int = 0
    global_step: int = 0
    batches_done: int = 0
    steps_per_epoch: int = 1
    scaler: Optional[torch.amp.GradScaler] = None
    # set while train_step has touched the pair, queue or optimizer but not finished
    mid_step: bool = False


class CollapseMonitor:
    """
    Sliding window over the mean teacher entropy of recent steps.

    A windowed mean near 0 (one-hot relations) or near log K (uniform
    relations, all embeddings alike) is reported as collapse.
    """

    def __init__(self, queue_capacity: int, window: int = 50, low: float = 0.01, high: float = 0.99):
        self.log_k = math.log(queue_capacity)
        self.low = low
        self.high = high
        self.values: deque[float] = deque(maxlen=window)

    def update(self, entropy: Optional[float]) -> None:
        if entropy is not None:
            self.values.append(entropy)

    @property
    def mean(self) -> Optional[float]:
        if not self.values:
            return None
        return sum(self.values) / len(self.values)

    def collapsed(self) -> bool:
        mean = self.mean
        if mean is None:
            return False
        return mean < self.low * self.log_k or mean > self.high * self.log_k


@dataclass
class TrainResult:
    final_checkpoint: Path
    metrics_file: Path
    best_knn_top1: Optional[float] = None
    collapse_warnings: list[int] = field(default_factory=list)


def resolve_device(device: str) -> str:
    if device == "auto":
        return "cuda" if torch.cuda.is_available() else "cpu"
    return device


def build_state(config: ExperimentConfig, steps_per_epoch: int, device: str = "cpu") -> TrainState:
    """Fresh student/teacher pair, empty queue and optimizer"""
    predictor_dim = config.predictor_hidden_dim if config.objective == "byol_style" else None
    pair = init_pair(config.backbone, config.head, config.seed, config.ema_momentum, predictor_dim).to(device)
    queue = MemoryQueue(config.queue_capacity, config.head.output_dim, device=device)
    optimizer = build_optimizer(pair.student, config)
    use_amp = config.amp and device.startswith("cuda")
    scaler = torch.amp.GradScaler("cuda", enabled=use_amp) if use_amp else None
    return TrainState(pair=pair, queue=queue, optimizer=optimizer, steps_per_epoch=steps_per_epoch, scaler=scaler)


def train_step(
    state: TrainState,
    batch: tuple[torch.Tensor, list[torch.Tensor]],
    config: ExperimentConfig,
) -> tuple[TrainState, StepMetrics]:
    """
    One optimizer step on a batch of (teacher views, [student views per crop side]).

    Until the queue is full no objective is computed and the optimizer does
    not step; the EMA update and the enqueue still happen.

    Raises:
        TrainingDivergedError: If the loss is not finite
    """
    teacher_views, student_views = batch
    state.mid_step = True
    pair, queue, optimizer = state.pair, state.queue, state.optimizer
    device = queue.buffer.device
    teacher_views = teacher_views.to(device, non_blocking=True)
    student_views = [views.to(device, non_blocking=True) for views in student_views]

    lr = lr_at(state.global_step, config, state.steps_per_epoch)
    set_lr(optimizer, lr)
    pair.student.train()
    pair.teacher.train()
    amp = state.scaler is not None

    with torch.autocast(device_type=device.type, enabled=amp):
        with torch.no_grad():
            z_teacher = l2_normalize(forward_embed(pair.teacher, teacher_views, config.bn_groups).float())

        entropy = None
        if config.objective == "byol_style":
            losses = []
            for views in student_views:
                z = forward_embed(pair.student, views)
                losses.append(cosine_loss(predictor_forward(pair.student, z).float(), z_teacher))
            loss = torch.stack(losses).mean()
            ready = True
        elif queue.is_full:
            z_students = [l2_normalize(forward_embed(pair.student, views).float()) for views in student_views]
            if config.objective == "ressl":
                loss, target = multicrop_relational_loss(z_teacher, z_students, queue, config.temps)
                entropy = float(teacher_entropy(target).mean())
            else:
                loss = multicrop_info_nce_loss(z_teacher, z_students, queue, config.nce_temperature)
            ready = True
        else:
            loss = torch.zeros((), device=device)
            ready = False

    if not torch.isfinite(loss):
        raise TrainingDivergedError(f"loss is {float(loss)} at step {state.global_step + 1} (epoch {state.epoch + 1})")

    if ready:
        optimizer.zero_grad(set_to_none=True)
        if amp:
            state.scaler.scale(loss).backward()
            state.scaler.step(optimizer)
            state.scaler.update()
        else:
            loss.backward()
            optimizer.step()

    ema_update(pair)
    if config.objective != "byol_style":
        queue.enqueue(z_teacher)

    state.global_step += 1
    state.batches_done += 1
    state.mid_step = False
    metrics = StepMetrics(
        step=state.global_step,
        epoch=state.epoch + 1,
        lr=lr,
        loss=float(loss.detach()),
        teacher_entropy=entropy,
    )
    return state, metrics


class Trainer:
    """
    Runs a full pretraining job into ``run_dir``.

    Layout:
        run_dir/metrics.jsonl      step and epoch records
        run_dir/checkpoints/       epoch_XXXX.pt (rolling), best.pt, final.pt
    """

    def __init__(
        self,
        config: ExperimentConfig,
        run_dir: Path,
        device: str = "auto",
        num_workers: int = 0,
        progress_bars: bool = True,
    ):
        self.config = config
        self.run_dir = Path(run_dir)
        self.device = resolve_device(device)
        self.num_workers = num_workers
        self.progress_bars = progress_bars
        self.logger = logging.getLogger(__name__)
        self._interrupt_requested = False
        self._loss_sum, self._loss_count = 0.0, 0

        self.run_dir.mkdir(parents=True, exist_ok=True)
        self.metrics = MetricsLogger(self.run_dir / "metrics.jsonl")
        self.checkpoints = CheckpointManager(self.run_dir / "checkpoints", keep=config.keep_checkpoints)

        torch.backends.cudnn.benchmark = False

    def _build_loader(self) -> tuple[DataLoader, EpochBatchSampler, ViewPairDataset]:
        config = self.config
        split = open_split(config.dataset)
        normalization = Normalization(*resolve_normalization(config.dataset))
        side = config.dataset.train_side

        dataset = ViewPairDataset(
            split,
            teacher_policy(config.teacher_augmentation, side, config.student_augmentation, config.seed),
            student_policy(config.student_augmentation, side, config.seed),
            config.multicrop_sides,
            normalization,
            seed=config.seed,
        )
        try:
            sampler = EpochBatchSampler(len(split), config.batch_size, config.seed, drop_last=True)
        except DataIterationError as e:
            raise DataIterationError(f"{config.dataset.packed_path}: {e}") from e

        loader = DataLoader(
            dataset,
            batch_sampler=sampler,
            num_workers=self.num_workers,
            pin_memory=self.device.startswith("cuda"),
        )
        return loader, sampler, dataset

    def _meta(self, state: TrainState, kind: str, loss_sum: float = 0.0, loss_count: int = 0,
              knn: Optional[float] = None) -> CheckpointMeta:
        return CheckpointMeta(
            config_hash=self.config.config_hash(),
            epoch=state.epoch,
            step=state.global_step,
            batches_done=state.batches_done,
            kind=kind,
            dataset=self.config.dataset.name,
            knn_top1=knn,
            loss_sum=loss_sum,
            loss_count=loss_count,
        )

    def _save(self, path: Path, state: TrainState, meta: CheckpointMeta, monitor: CollapseMonitor) -> Path:
        return save_checkpoint(
            path,
            meta,
            self.config,
            state.pair,
            state.optimizer,
            state.queue.state_dict(),
            extra={"collapse_window": list(monitor.values)},
        )

    def _resume(self, state: TrainState, monitor: CollapseMonitor) -> tuple[float, int, Optional[float]]:
        """Restore the latest checkpoint into ``state``; returns (loss_sum, loss_count, best_knn)"""
        path = self.checkpoints.latest_resumable()
        if path is None:
            self.logger.info("No checkpoint to resume from; starting fresh")
            return 0.0, 0, None

        payload = load_checkpoint(path, map_location=self.device)
        meta = payload["meta"]
        if meta["config_hash"] != self.config.config_hash():
            raise CheckpointError(
                f"{path} belongs to config {meta['config_hash']}, not {self.config.config_hash()}"
            )

        state.pair.student.load_state_dict(payload["student"])
        state.pair.teacher.load_state_dict(payload["teacher"])
        if payload.get("optimizer") is not None:
            state.optimizer.load_state_dict(payload["optimizer"])
        if payload.get("queue") is not None:
            state.queue.load_state_dict(payload["queue"])
        if payload.get("rng_state") is not None:
            torch.set_rng_state(payload["rng_state"].cpu())
        monitor.values.extend(payload.get("extra", {}).get("collapse_window", []))

        state.epoch = meta["epoch"]
        state.global_step = meta["step"]
        state.batches_done = meta["batches_done"]
        self.metrics.truncate_after(state.global_step)

        best = self.checkpoints.read_meta(self.checkpoints.best_path) if self.checkpoints.best_path.exists() else None
        self.logger.info(
            f"Resumed from {path.name}: epoch {state.epoch}, step {state.global_step}, batch {state.batches_done}"
        )
        return meta.get("loss_sum", 0.0), meta.get("loss_count", 0), best.get("knn_top1") if best else None

    @contextmanager
    def _deferred_interrupts(self, state: TrainState) -> Iterator[None]:
        """
        Hold Ctrl+C that arrives inside a step until the step has finished.

        The loop checks ``self._interrupt_requested`` after every step and
        raises KeyboardInterrupt there, so interrupt checkpoints always hold a
        whole number of steps.
        """
        self._interrupt_requested = False
        if threading.current_thread() is not threading.main_thread():
            yield
            return

        def handler(signum, frame):
            if state.mid_step:
                self.logger.warning("Interrupt received; stopping after the current step")
                self._interrupt_requested = True
            else:
                raise KeyboardInterrupt

        previous = signal.signal(signal.SIGINT, handler)
        try:
            yield
        finally:
            signal.signal(signal.SIGINT, previous)

    def _knn_monitor(self, state: TrainState) -> Optional[float]:
        """kNN top-1 of teacher backbone features, labeled train split against test"""
        dataset = self.config.dataset
        try:
            train_split = open_split(dataset.with_split("train"))
            test_split = open_split(dataset.with_split("test"))
        except DataIterationError as e:
            self.logger.warning(f"kNN monitor skipped: {e}")
            return None

        normalization = Normalization(*resolve_normalization(dataset))
        teacher = state.pair.teacher
        was_training = teacher.training
        teacher.eval()
        try:
            train = extract_features(teacher.features, train_split, dataset.train_side, normalization,
                                     self.config.batch_size, self.device)
            test = extract_features(teacher.features, test_split, dataset.train_side, normalization,
                                    self.config.batch_size, self.device)
            return knn_top1(train, test, dataset.num_classes, self.config.knn_k, self.config.knn_temperature)
        except ResslError as e:
            self.logger.warning(f"kNN monitor failed: {e}")
            return None
        finally:
            teacher.train(was_training)

    def train(self, resume: bool = False) -> TrainResult:
        """
        Pretrain for ``config.epochs`` epochs.

        Args:
            resume: Continue from the latest epoch or interrupt checkpoint

        Returns:
            TrainResult with the final checkpoint and metrics file
        """
        config = self.config
        loader, sampler, dataset = self._build_loader()
        steps_per_epoch = len(sampler)
        state = build_state(config, steps_per_epoch, self.device)
        monitor = CollapseMonitor(config.queue_capacity)
        result = TrainResult(final_checkpoint=self.checkpoints.final_path, metrics_file=self.metrics.log_file)

        loss_sum, loss_count = 0.0, 0
        if resume:
            loss_sum, loss_count, result.best_knn_top1 = self._resume(state, monitor)
        else:
            self.metrics.log_file.unlink(missing_ok=True)

        self.logger.info(
            f"Pretraining {config.objective} on {config.dataset.name}/{config.dataset.split}: "
            f"{config.epochs} epochs x {steps_per_epoch} steps, batch {config.batch_size}, "
            f"K={config.queue_capacity}, tau_t={config.temps.tau_t}, tau_s={config.temps.tau_s}, device {self.device}"
        )

        try:
            with self._deferred_interrupts(state):
                self._run_epochs(state, loader, sampler, dataset, monitor, loss_sum, loss_count, result)
        except KeyboardInterrupt:
            if state.mid_step:
                fallback = self.checkpoints.latest_resumable()
                self.logger.warning(
                    f"Interrupted inside step {state.global_step + 1}; no interrupt checkpoint written, "
                    f"--resume continues from {fallback if fallback else 'scratch'}"
                )
                raise
            self._save(self.checkpoints.interrupt_path, state,
                       self._meta(state, "interrupt", self._loss_sum, self._loss_count), monitor)
            self.logger.warning(
                f"Interrupted at epoch {state.epoch}, batch {state.batches_done}; "
                f"resume with --resume from {self.checkpoints.interrupt_path}"
            )
            raise

        self._save(self.checkpoints.final_path, state, self._meta(state, "final"), monitor)
        self.checkpoints.interrupt_path.unlink(missing_ok=True)
        self.checkpoints.interrupt_path.with_suffix(".json").unlink(missing_ok=True)
        self.logger.info(f"Pretraining complete: {self.checkpoints.final_path}")
        return result

    def _run_epochs(
        self,
        state: TrainState,
        loader: DataLoader,
        sampler: EpochBatchSampler,
        dataset: ViewPairDataset,
        monitor: CollapseMonitor,
        loss_sum: float,
        loss_count: int,
        result: TrainResult,
    ) -> None:
        config = self.config
        self._loss_sum, self._loss_count = loss_sum, loss_count
        while state.epoch < config.epochs:
            epoch = state.epoch
            sampler.set_epoch(epoch, skip_batches=state.batches_done)
            dataset.set_epoch(epoch)
            if state.batches_done == 0:
                self._loss_sum, self._loss_count = 0.0, 0

            progress = tqdm(
                loader,
                desc=f"epoch {epoch + 1}/{config.epochs}",
                disable=not self.progress_bars,
                leave=False,
            )
            for teacher_views, student_views, _ids in progress:
                try:
                    state, step_metrics = train_step(state, (teacher_views, student_views), config)
                except TrainingDivergedError:
                    self._save(self.checkpoints.diverged_path, state,
                               self._meta(state, "diverged", self._loss_sum, self._loss_count), monitor)
                    self.logger.error(f"Training diverged; snapshot written to {self.checkpoints.diverged_path}")
                    raise
                self.metrics.log(step_metrics)
                monitor.update(step_metrics.teacher_entropy)
                self._loss_sum += step_metrics.loss
                self._loss_count += 1
                progress.set_postfix(loss=f"{step_metrics.loss:.4f}", lr=f"{step_metrics.lr:.4f}")
                if self._interrupt_requested:
                    raise KeyboardInterrupt

            state.epoch += 1
            state.batches_done = 0
            result.best_knn_top1 = self._finish_epoch(state, monitor, self._loss_sum, self._loss_count, result)

    def _finish_epoch(
        self,
        state: TrainState,
        monitor: CollapseMonitor,
        loss_sum: float,
        loss_count: int,
        result: TrainResult,
    ) -> Optional[float]:
        """Epoch metrics, kNN monitor and checkpoints; returns the best kNN accuracy so far"""
        config = self.config
        epoch = state.epoch
        knn = None
        if config.knn_every > 0 and (epoch % config.knn_every == 0 or epoch == config.epochs):
            knn = self._knn_monitor(state)

        collapsed = monitor.collapsed()
        if collapsed:
            result.collapse_warnings.append(epoch)
            self.logger.warning(
                f"Possible collapse at epoch {epoch}: mean teacher entropy {monitor.mean:.4f} "
                f"vs log K = {monitor.log_k:.4f}"
            )

        self.metrics.log(EpochMetrics(
            epoch=epoch,
            step=state.global_step,
            mean_loss=loss_sum / max(loss_count, 1),
            knn_top1=knn,
            collapse_warning=collapsed,
        ))

        meta = self._meta(state, "epoch", knn=knn)
        self._save(self.checkpoints.epoch_path(epoch), state, meta, monitor)
        self.checkpoints.prune()

        best = result.best_knn_top1
        if knn is not None and (best is None or knn > best):
            best = knn
            self._save(self.checkpoints.best_path, state, self._meta(state, "best", knn=knn), monitor)

        knn_text = f", kNN top-1 {knn:.2f}%" if knn is not None else ""
        self.logger.info(f"Epoch {epoch}/{config.epochs}: mean loss {loss_sum / max(loss_count, 1):.4f}{knn_text}")
        return best


def train(config: ExperimentConfig, run_dir: Path, resume: bool = False, **kwargs) -> TrainResult:
    """Pretrain ``config`` into ``run_dir``"""
    return Trainer(config, run_dir, **kwargs).train(resume=resume)
