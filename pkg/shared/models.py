"""
Pydantic models for datasets, augmentation policies and experiment configuration.

Every invariant the training and evaluation code relies on is enforced here,
so a config that validates can be handed to the trainer as-is.
"""
import hashlib
import json
import logging
from pathlib import Path
from typing import Any, Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


logger = logging.getLogger(__name__)

DatasetName = Literal["cifar10", "cifar100", "stl10", "tiny_imagenet"]
SplitName = Literal["train", "train_unlabeled_plus_labeled", "test"]
Objective = Literal["ressl", "info_nce", "byol_style"]
SweepAxis = Literal["tau_t", "queue_capacity", "teacher_augmentation"]

NUM_CLASSES: dict[str, int] = {"cifar10": 10, "cifar100": 100, "stl10": 10, "tiny_imagenet": 200}
SOURCE_SIDE: dict[str, int] = {"cifar10": 32, "cifar100": 32, "stl10": 96, "tiny_imagenet": 64}
SMALL_DATASETS = frozenset({"cifar10", "cifar100"})

CANONICAL_COUNTS: dict[tuple[str, str], int] = {
    ("cifar10", "train"): 50000,
    ("cifar10", "test"): 10000,
    ("cifar100", "train"): 50000,
    ("cifar100", "test"): 10000,
    ("stl10", "train"): 5000,
    ("stl10", "train_unlabeled_plus_labeled"): 105000,
    ("stl10", "test"): 8000,
    ("tiny_imagenet", "train"): 100000,
    ("tiny_imagenet", "test"): 10000,
}

# Teacher-path pipelines of the augmentation ablation grid
TEACHER_AUGMENTATIONS = (
    "none", "crop", "flip", "jitter", "grayscale", "blur",
    "weak", "crop+flip", "crop+jitter", "crop+grayscale", "crop+blur",
    "crop+flip+jitter", "crop+flip+grayscale", "crop+flip+blur", "contrastive",
)


class DatasetSpec(BaseModel):
    """
    Identifies one split of one benchmark dataset on disk.

    Attributes:
        name: Dataset name
        root_path: Directory holding raw archives and packed splits
        split: Which split this spec refers to
        image_side: Stored image side in pixels (source resolution)
        num_classes: Number of classes of the dataset
    """
    model_config = ConfigDict(frozen=True)

    name: DatasetName
    root_path: Path = Path("data")
    split: SplitName = "train"
    image_side: Optional[int] = None
    num_classes: Optional[int] = None

    @model_validator(mode="before")
    @classmethod
    def fill_from_name(cls, data: Any) -> Any:
        if isinstance(data, dict) and data.get("name") in NUM_CLASSES:
            data = dict(data)
            if data.get("image_side") is None:
                data["image_side"] = SOURCE_SIDE[data["name"]]
            if data.get("num_classes") is None:
                data["num_classes"] = NUM_CLASSES[data["name"]]
        return data

    @model_validator(mode="after")
    def check_dataset(self) -> "DatasetSpec":
        if self.image_side not in (32, 64, 96):
            raise ValueError(f"image_side must be one of 32/64/96, got {self.image_side}")
        if self.image_side != SOURCE_SIDE[self.name]:
            raise ValueError(f"{self.name} is stored at {SOURCE_SIDE[self.name]}px, got image_side={self.image_side}")
        if self.num_classes != NUM_CLASSES[self.name]:
            raise ValueError(f"{self.name} has {NUM_CLASSES[self.name]} classes, got num_classes={self.num_classes}")
        if self.split == "train_unlabeled_plus_labeled" and self.name != "stl10":
            raise ValueError("split 'train_unlabeled_plus_labeled' only exists for stl10")
        return self

    @property
    def is_small(self) -> bool:
        return self.name in SMALL_DATASETS

    @property
    def train_side(self) -> int:
        """Side at which views are fed to the network"""
        return 32 if self.is_small else 64

    @property
    def expected_count(self) -> int:
        return CANONICAL_COUNTS[(self.name, self.split)]

    @property
    def dataset_dir(self) -> Path:
        return Path(self.root_path) / self.name

    @property
    def packed_path(self) -> Path:
        return self.dataset_dir / f"{self.split}.rssl"

    @property
    def manifest_path(self) -> Path:
        return self.dataset_dir / f"{self.split}.manifest.json"

    def with_split(self, split: SplitName) -> "DatasetSpec":
        return DatasetSpec(name=self.name, root_path=self.root_path, split=split)


class Manifest(BaseModel):
    """Summary written next to every packed split"""
    version: int = 1
    name: DatasetName
    split: SplitName
    count: int
    sha256: str
    class_histogram: dict[int, int] = Field(default_factory=dict)
    unlabeled_count: int = 0
    image_side: int
    mean: list[float]
    std: list[float]
    source: str = ""


class ColorJitterSpec(BaseModel):
    """Color distortion of a given strength, applied with probability ``prob``"""
    strength: float = 0.5
    prob: float = 0.8

    @field_validator("strength")
    @classmethod
    def check_strength(cls, v):
        if v < 0:
            raise ValueError(f"color jitter strength must be >= 0, got {v}")
        return v

    @field_validator("prob")
    @classmethod
    def check_prob(cls, v):
        if not 0.0 <= v <= 1.0:
            raise ValueError(f"probability must be in [0, 1], got {v}")
        return v

    @property
    def brightness(self) -> float:
        return 0.8 * self.strength

    @property
    def contrast(self) -> float:
        return 0.8 * self.strength

    @property
    def saturation(self) -> float:
        return 0.8 * self.strength

    @property
    def hue(self) -> float:
        return min(0.2 * self.strength, 0.5)


class AugmentationPolicy(BaseModel):
    """
    Parameters of one stochastic view generator.

    The weak policy is crop + flip only; contrastive and multicrop_student
    policies may enable color jitter, grayscale and blur.
    """
    model_config = ConfigDict(frozen=True)

    kind: Literal["weak", "contrastive", "multicrop_student"]
    crop_ratio_low: float = 0.2
    crop_ratio_high: float = 1.0
    aspect_ratio: tuple[float, float] = (3.0 / 4.0, 4.0 / 3.0)
    flip_prob: float = 0.5
    color_jitter: Optional[ColorJitterSpec] = None
    grayscale_prob: Optional[float] = None
    blur_prob: Optional[float] = None
    output_side: int = 32
    rng_seed: int = 0

    @model_validator(mode="after")
    def check_policy(self) -> "AugmentationPolicy":
        if not 0.0 < self.crop_ratio_low <= self.crop_ratio_high <= 1.0:
            raise ValueError(
                f"crop ratios must satisfy 0 < low <= high <= 1, got ({self.crop_ratio_low}, {self.crop_ratio_high})"
            )
        if not 0.0 < self.aspect_ratio[0] <= self.aspect_ratio[1]:
            raise ValueError(f"invalid aspect ratio range {self.aspect_ratio}")
        for name in ("flip_prob", "grayscale_prob", "blur_prob"):
            value = getattr(self, name)
            if value is not None and not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {value}")
        if self.output_side <= 0:
            raise ValueError(f"output_side must be positive, got {self.output_side}")
        if self.kind == "weak" and (
            self.color_jitter is not None or self.grayscale_prob is not None or self.blur_prob is not None
        ):
            raise ValueError("weak policy cannot enable color jitter, grayscale or blur")
        return self


class TemperaturePair(BaseModel):
    """Teacher and student softmax temperatures"""
    model_config = ConfigDict(frozen=True)

    tau_t: float = 0.04
    tau_s: float = 0.1

    @model_validator(mode="after")
    def check_sharpening(self) -> "TemperaturePair":
        if self.tau_t <= 0 or self.tau_s <= 0:
            raise ValueError(f"temperatures must be > 0, got tau_t={self.tau_t}, tau_s={self.tau_s}")
        if self.tau_t > self.tau_s:
            raise ValueError(f"tau_t must not exceed tau_s (teacher must be sharper), got {self.tau_t} > {self.tau_s}")
        if self.tau_t > 0.5 * self.tau_s:
            logger.warning(
                f"tau_t={self.tau_t} is more than half of tau_s={self.tau_s}; the relation target is barely sharpened and training may collapse"
            )
        return self


class BackboneSpec(BaseModel):
    """ResNet encoder F(.)"""
    model_config = ConfigDict(frozen=True)

    arch: Literal["resnet18_small", "resnet18", "resnet50"] = "resnet18_small"
    stem: Optional[Literal["conv3x3_no_maxpool", "conv7x7_maxpool"]] = None
    feature_dim: Optional[int] = None

    @model_validator(mode="before")
    @classmethod
    def fill_from_arch(cls, data: Any) -> Any:
        if not isinstance(data, dict):
            return data
        data = dict(data)
        arch = data.get("arch", "resnet18_small")
        if data.get("stem") is None:
            data["stem"] = "conv3x3_no_maxpool" if arch == "resnet18_small" else "conv7x7_maxpool"
        if data.get("feature_dim") is None:
            data["feature_dim"] = 2048 if arch == "resnet50" else 512
        return data

    @model_validator(mode="after")
    def check_backbone(self) -> "BackboneSpec":
        expected_dim = 2048 if self.arch == "resnet50" else 512
        if self.arch == "resnet18_small" and self.stem != "conv3x3_no_maxpool":
            raise ValueError("resnet18_small uses the conv3x3_no_maxpool stem")
        if self.feature_dim != expected_dim:
            raise ValueError(f"{self.arch} produces {expected_dim}-d features, got feature_dim={self.feature_dim}")
        return self


class ProjectionHeadSpec(BaseModel):
    """Two-layer non-linear projection head g(.)"""
    model_config = ConfigDict(frozen=True)

    layers: Literal[2] = 2
    hidden_dim: int = 512
    output_dim: int = 128
    nonlinearity: Literal["relu"] = "relu"

    @model_validator(mode="after")
    def check_dims(self) -> "ProjectionHeadSpec":
        if self.hidden_dim <= 0 or self.output_dim <= 0:
            raise ValueError("projection head dimensions must be positive")
        return self


class StudentAugmentation(BaseModel):
    """Contrastive (student path) augmentation settings"""
    model_config = ConfigDict(frozen=True)

    crop_ratio_low: float = 0.2
    flip_prob: float = 0.5
    jitter_strength: float = 0.5
    jitter_prob: float = 0.8
    grayscale_prob: float = 0.2
    blur_prob: float = 0.5


class ExperimentConfig(BaseModel):
    """
    Complete description of one pretraining run.

    Dataset-class defaults (momentum, queue size, multi-crop sides) are filled
    in when absent; ``base_lr`` defaults to 0.06 x batch_size / 256.
    """
    model_config = ConfigDict(frozen=True)

    schema_version: int = 1
    dataset: DatasetSpec
    batch_size: int = 256
    epochs: int = 200
    temps: TemperaturePair = Field(default_factory=TemperaturePair)
    queue_capacity: int
    ema_momentum: float
    base_lr: Optional[float] = None
    weight_decay: float = 5e-4
    sgd_momentum: float = 0.9
    warmup_epochs: int = 5
    bn_groups: int = 8
    objective: Objective = "ressl"
    multicrop_sides: list[int]
    seed: int = 0
    backbone: BackboneSpec = Field(default_factory=BackboneSpec)
    head: ProjectionHeadSpec = Field(default_factory=ProjectionHeadSpec)
    predictor_hidden_dim: int = 512
    teacher_augmentation: str = "weak"
    student_augmentation: StudentAugmentation = Field(default_factory=StudentAugmentation)
    nce_temperature: float = 0.2
    amp: bool = False
    knn_every: int = 10
    knn_k: int = 200
    knn_temperature: float = 0.1
    keep_checkpoints: int = 2

    @model_validator(mode="before")
    @classmethod
    def fill_dataset_defaults(cls, data: Any) -> Any:
        if not isinstance(data, dict):
            return data
        dataset = data.get("dataset")
        if dataset is None:
            return data
        name = dataset.name if isinstance(dataset, DatasetSpec) else dataset.get("name")
        small = name in SMALL_DATASETS
        data = dict(data)
        data.setdefault("ema_momentum", 0.99 if small else 0.996)
        data.setdefault("queue_capacity", 4096 if small else 16384)
        data.setdefault("multicrop_sides", [32] if small else [64])
        return data

    @model_validator(mode="after")
    def check_experiment(self) -> "ExperimentConfig":
        if self.schema_version != 1:
            raise ValueError(f"unsupported config schema_version {self.schema_version}")
        if self.batch_size <= 0 or self.epochs <= 0:
            raise ValueError("batch_size and epochs must be positive")
        if self.bn_groups <= 0 or self.batch_size % self.bn_groups != 0:
            raise ValueError(f"batch_size {self.batch_size} is not divisible by bn_groups {self.bn_groups}")
        if self.objective != "byol_style" and self.batch_size > self.queue_capacity:
            raise ValueError(f"batch_size {self.batch_size} exceeds queue_capacity {self.queue_capacity}")
        if not 0.0 <= self.ema_momentum < 1.0:
            raise ValueError(f"ema_momentum must be in [0, 1), got {self.ema_momentum}")
        if self.warmup_epochs < 0:
            raise ValueError("warmup_epochs must be >= 0")
        if not self.multicrop_sides:
            raise ValueError("multicrop_sides must not be empty")
        if self.multicrop_sides[0] != self.dataset.train_side:
            raise ValueError(
                f"first multi-crop side must be the canonical side {self.dataset.train_side}, got {self.multicrop_sides[0]}"
            )
        if self.teacher_augmentation not in TEACHER_AUGMENTATIONS:
            raise ValueError(f"unknown teacher augmentation '{self.teacher_augmentation}'")
        if self.base_lr is not None and self.base_lr < 0:
            raise ValueError("base_lr must be >= 0")
        return self

    @property
    def peak_lr(self) -> float:
        if self.base_lr is not None:
            return self.base_lr
        return 0.06 * self.batch_size / 256

    def steps_per_epoch(self, dataset_size: Optional[int] = None) -> int:
        """Optimizer steps per epoch (drop_last)"""
        size = dataset_size if dataset_size is not None else self.dataset.expected_count
        return size // self.batch_size

    def config_hash(self) -> str:
        """Stable hash over everything except machine-local paths"""
        payload = self.model_dump(mode="json")
        payload["dataset"].pop("root_path", None)
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode("utf-8")).hexdigest()[:16]

    def updated(self, **changes: Any) -> "ExperimentConfig":
        """Validated copy with top-level fields replaced"""
        data = self.model_dump()
        data.update(changes)
        return ExperimentConfig.model_validate(data)


class LinearEvalConfig(BaseModel):
    """Linear classifier on frozen average-pooled backbone features"""
    model_config = ConfigDict(frozen=True)

    epochs: int = 100
    base_lr: float = 30.0
    batch_size: int = 256
    momentum: float = 0.9
    weight_decay: float = 0.0
    milestones: list[int] = Field(default_factory=lambda: [60, 80])
    gamma: float = 0.1
    augment: bool = True
    seed: int = 0

    @model_validator(mode="after")
    def check_protocol(self) -> "LinearEvalConfig":
        if self.weight_decay != 0:
            raise ValueError("linear evaluation uses no weight decay")
        if any(b <= a for a, b in zip(self.milestones, self.milestones[1:])):
            raise ValueError(f"milestones must be strictly increasing, got {self.milestones}")
        if any(m >= self.epochs or m <= 0 for m in self.milestones):
            raise ValueError(f"milestones must lie in (0, epochs={self.epochs}), got {self.milestones}")
        return self

    @property
    def lr(self) -> float:
        return self.base_lr * self.batch_size / 256


class EvalReport(BaseModel):
    """Result of a linear evaluation"""
    top1: float
    top5: float
    per_class_accuracy: list[float]
    config_hash: str
    checkpoint_ref: str
    dataset: str = ""
    num_test: int = 0

    @model_validator(mode="after")
    def check_bounds(self) -> "EvalReport":
        if not 0.0 <= self.top1 <= self.top5 <= 100.0:
            raise ValueError(f"inconsistent accuracies top1={self.top1} top5={self.top5}")
        return self


class StepMetrics(BaseModel):
    """One line of the per-step metrics log"""
    kind: Literal["step"] = "step"
    step: int
    epoch: int
    lr: float
    loss: float
    teacher_entropy: Optional[float] = None


class EpochMetrics(BaseModel):
    """One line of the per-epoch metrics log"""
    kind: Literal["epoch"] = "epoch"
    epoch: int
    step: int
    mean_loss: float
    knn_top1: Optional[float] = None
    collapse_warning: bool = False


class SweepSpec(BaseModel):
    """One-axis grid over an experiment config"""
    base: ExperimentConfig
    axis: SweepAxis
    values: list[Union[float, int, str]]
    budget_epochs: Optional[int] = None
    eval: Literal["linear", "knn"] = "knn"

    @model_validator(mode="after")
    def check_values(self) -> "SweepSpec":
        if not self.values:
            raise ValueError("sweep values must not be empty")
        if self.budget_epochs is not None and self.budget_epochs <= 0:
            raise ValueError("budget_epochs must be positive")
        return self

    def ordered_values(self) -> list[Union[float, int, str]]:
        """Numeric axes sorted ascending; augmentation names keep their given order"""
        if self.axis == "teacher_augmentation":
            return [str(v) for v in self.values]
        cast = float if self.axis == "tau_t" else int
        return sorted(cast(v) for v in self.values)

    def derived_configs(self) -> list[tuple[Union[float, int, str], ExperimentConfig]]:
        """Configs that differ from the base only on the swept axis (and the epoch budget)"""
        base = self.base if self.budget_epochs is None else self.base.updated(epochs=self.budget_epochs)
        rows = []
        for value in self.ordered_values():
            if self.axis == "tau_t":
                temps = {"tau_t": value, "tau_s": base.temps.tau_s}
                rows.append((value, base.updated(temps=temps)))
            elif self.axis == "queue_capacity":
                rows.append((value, base.updated(queue_capacity=value)))
            else:
                rows.append((value, base.updated(teacher_augmentation=value)))
        return rows
