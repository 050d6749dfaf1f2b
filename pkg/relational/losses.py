#!/usr/bin/env python3
"""
Relation distributions over the memory queue and the training objectives.

All objectives reduce over the batch with the arithmetic mean. Teacher-side
inputs are detached, so no gradient reaches the teacher path.
"""
from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn.functional as F

from pipeline.error_handling import ConfigurationError, ShapeMismatchError
from relational.queue import MemoryQueue
from shared.models import TemperaturePair


@dataclass
class RelationDistribution:
    """Softmax of similarities to every queue row, one row per embedding"""
    probs: torch.Tensor
    temperature: float


def _check_tau(tau: float) -> None:
    if tau <= 0:
        raise ConfigurationError(f"temperature must be > 0, got {tau}")


def _check_aligned(a: torch.Tensor, b: torch.Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeMismatchError(f"teacher/student batches are misaligned: {tuple(a.shape)} vs {tuple(b.shape)}")


def relation_logits(z: torch.Tensor, support: torch.Tensor, tau: float) -> torch.Tensor:
    return z @ support.t() / tau


def relation_distribution(z: torch.Tensor, queue: MemoryQueue, tau: float) -> RelationDistribution:
    """
    Relation of unit vector(s) ``z`` to the K queue rows at temperature ``tau``.

    Raises:
        ConfigurationError: tau <= 0
        QueueStateError: The queue is not full yet
    """
    _check_tau(tau)
    support = queue.support()
    probs = torch.softmax(relation_logits(z, support.to(z.dtype), tau), dim=-1)
    return RelationDistribution(probs=probs, temperature=tau)


def teacher_entropy(probs: torch.Tensor) -> torch.Tensor:
    """Shannon entropy (nats) of each distribution"""
    return torch.special.entr(probs).sum(dim=-1)


def relational_terms(
    z_teacher: torch.Tensor,
    z_student: torch.Tensor,
    support: torch.Tensor,
    temps: TemperaturePair,
) -> tuple[torch.Tensor, torch.Tensor]:
    """
    Cross-entropy between the sharpened teacher relation and the student relation.

    Returns:
        (loss, teacher probabilities)
    """
    _check_aligned(z_teacher, z_student)
    support = support.detach().to(z_student.dtype)
    with torch.no_grad():
        target = torch.softmax(relation_logits(z_teacher.detach(), support, temps.tau_t), dim=-1)
    log_student = F.log_softmax(relation_logits(z_student, support, temps.tau_s), dim=-1)
    loss = -(target * log_student).sum(dim=-1).mean()
    return loss, target


def relational_loss(
    z_teacher: torch.Tensor,
    z_student: torch.Tensor,
    queue: MemoryQueue,
    temps: TemperaturePair,
) -> torch.Tensor:
    """
    Mean over the batch of H(p_teacher, p_student); gradients flow to the student only.

    Raises:
        ShapeMismatchError: Teacher and student batches differ in shape
        QueueStateError: The queue is not full yet
    """
    loss, _ = relational_terms(z_teacher, z_student, queue.support(), temps)
    return loss


def multicrop_relational_loss(
    z_teacher: torch.Tensor,
    z_students: Sequence[torch.Tensor],
    queue: MemoryQueue,
    temps: TemperaturePair,
) -> tuple[torch.Tensor, torch.Tensor]:
    """One teacher target, averaged over every student crop; returns (loss, teacher probs)"""
    support = queue.support()
    losses = []
    target = None
    for z_student in z_students:
        loss, target = relational_terms(z_teacher, z_student, support, temps)
        losses.append(loss)
    return torch.stack(losses).mean(), target


def info_nce_loss(z1: torch.Tensor, z2: torch.Tensor, queue: MemoryQueue, tau: float) -> torch.Tensor:
    """
    Instance discrimination: the positive ``z2`` against the queue as negatives.

    ``z1`` is the query (student path); ``z2`` is the detached key.
    """
    _check_tau(tau)
    _check_aligned(z1, z2)
    negatives = queue.support().detach().to(z1.dtype)
    positive = (z1 * z2.detach()).sum(dim=-1, keepdim=True)
    logits = torch.cat([positive, z1 @ negatives.t()], dim=1) / tau
    labels = torch.zeros(z1.shape[0], dtype=torch.long, device=z1.device)
    return F.cross_entropy(logits, labels)


def multicrop_info_nce_loss(
    z_key: torch.Tensor,
    z_queries: Sequence[torch.Tensor],
    queue: MemoryQueue,
    tau: float,
) -> torch.Tensor:
    return torch.stack([info_nce_loss(z, z_key, queue, tau) for z in z_queries]).mean()


def cosine_loss(p: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
    """Negative cosine similarity with ``z`` as a stop-gradient target"""
    _check_aligned(p, z)
    return -(F.normalize(p, dim=-1) * F.normalize(z.detach(), dim=-1)).sum(dim=-1).mean()


def mse_loss(p: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
    """Squared L2 distance with ``z`` as a stop-gradient target"""
    _check_aligned(p, z)
    return (p - z.detach()).pow(2).sum(dim=-1).mean()
