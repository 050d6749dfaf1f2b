#!/usr/bin/env python3
"""
Encoder backbone, projection head, predictor and the student/teacher pair.
"""
import copy
import logging
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F
from torchvision import models

from pipeline.error_handling import ConfigurationError, NumericError
from shared.models import BackboneSpec, ProjectionHeadSpec


logger = logging.getLogger(__name__)


def build_backbone(spec: BackboneSpec) -> nn.Module:
    """
    ResNet trunk returning global-average-pooled features.

    The small variant replaces the 7x7 stride-2 stem with a 3x3 stride-1
    convolution and drops the first max pooling, for 32-64 px inputs.
    """
    if spec.arch == "resnet50":
        net = models.resnet50(weights=None)
    else:
        net = models.resnet18(weights=None)

    if spec.stem == "conv3x3_no_maxpool":
        net.conv1 = nn.Conv2d(3, 64, kernel_size=3, stride=1, padding=1, bias=False)
        net.maxpool = nn.Identity()
    net.fc = nn.Identity()
    return net


class ProjectionHead(nn.Module):
    """Linear-ReLU-linear"""

    def __init__(self, in_dim: int, spec: ProjectionHeadSpec):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(in_dim, spec.hidden_dim),
            nn.ReLU(inplace=True),
            nn.Linear(spec.hidden_dim, spec.output_dim),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


class Predictor(nn.Module):
    """Linear-BN-ReLU-linear map from an embedding to a same-sized prediction"""

    def __init__(self, dim: int, hidden_dim: int = 512):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(dim, hidden_dim),
            nn.BatchNorm1d(hidden_dim),
            nn.ReLU(inplace=True),
            nn.Linear(hidden_dim, dim),
        )

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        return self.net(z)


class Embedder(nn.Module):
    """Backbone followed by the projection head, with an optional predictor"""

    def __init__(self, backbone: nn.Module, head: nn.Module, predictor: Optional[nn.Module] = None):
        super().__init__()
        self.backbone = backbone
        self.head = head
        self.predictor = predictor

    def features(self, x: torch.Tensor) -> torch.Tensor:
        """Average-pooled backbone features"""
        return self.backbone(x)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.backbone(x))

    def encoder_parameters(self):
        """Parameters of backbone and head, the part mirrored by the teacher"""
        yield from self.backbone.named_parameters(prefix="backbone")
        yield from self.head.named_parameters(prefix="head")

    def encoder_buffers(self):
        yield from self.backbone.named_buffers(prefix="backbone")
        yield from self.head.named_buffers(prefix="head")


def forward_embed(model: Embedder, views: torch.Tensor, bn_groups: int = 1) -> torch.Tensor:
    """
    Unnormalized embeddings of a batch of views.

    With ``bn_groups > 1`` the batch is split into that many contiguous
    groups, each run separately so batch-norm statistics stay within a group.

    Raises:
        ConfigurationError: If the batch size is not divisible by bn_groups
    """
    if bn_groups <= 1:
        return model(views)
    if views.shape[0] % bn_groups != 0:
        raise ConfigurationError(f"batch size {views.shape[0]} is not divisible by bn_groups {bn_groups}")
    return torch.cat([model(chunk) for chunk in views.chunk(bn_groups)], dim=0)


def l2_normalize(vectors: torch.Tensor) -> torch.Tensor:
    """
    Scale every row to unit L2 norm.

    Raises:
        NumericError: On an all-zero or non-finite row, naming its index
    """
    norms = vectors.norm(dim=-1, keepdim=True)
    flat = norms.reshape(-1)
    bad = torch.nonzero((flat == 0) | ~torch.isfinite(flat))
    if len(bad):
        row = int(bad[0])
        raise NumericError(f"cannot normalize row {row}: norm is {float(flat[row])}")
    return vectors / norms


def predictor_forward(model: Embedder, z: torch.Tensor) -> torch.Tensor:
    if model.predictor is None:
        raise ConfigurationError("model has no predictor head; it is only built for objective byol_style")
    return model.predictor(z)


class StudentTeacherPair(nn.Module):
    """
    Student trained by the optimizer and teacher updated only by EMA.

    The teacher mirrors the student's backbone and head; it has no predictor
    and none of its parameters require gradients.
    """

    def __init__(self, student: Embedder, teacher: Embedder, momentum: float):
        super().__init__()
        self.student = student
        self.teacher = teacher
        self.momentum = momentum

        for param in self.teacher.parameters():
            param.requires_grad = False

    def teacher_state_hash(self) -> int:
        """Cheap fingerprint of the teacher parameters"""
        return hash(tuple(float(p.double().sum()) for p in self.teacher.parameters()))


def init_pair(
    backbone: BackboneSpec,
    head: ProjectionHeadSpec,
    seed: int,
    momentum: float = 0.99,
    predictor_hidden_dim: Optional[int] = None,
) -> StudentTeacherPair:
    """
    Build a seeded student and a teacher that starts as its exact copy.

    Args:
        backbone: Encoder spec
        head: Projection head spec
        seed: Initialization seed; the global RNG state is left untouched
        momentum: EMA momentum of the teacher
        predictor_hidden_dim: Build a predictor with this hidden size when set
    """
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        trunk = build_backbone(backbone)
        projection = ProjectionHead(backbone.feature_dim, head)
        predictor = Predictor(head.output_dim, predictor_hidden_dim) if predictor_hidden_dim else None

    student = Embedder(trunk, projection, predictor)
    teacher = Embedder(copy.deepcopy(trunk), copy.deepcopy(projection))
    logger.debug(f"Initialized {backbone.arch} pair with seed {seed}")
    return StudentTeacherPair(student, teacher, momentum)
