#!/usr/bin/env python3
"""
Momentum update of the teacher from the student.
"""
import torch

from model.networks import StudentTeacherPair
from pipeline.error_handling import ShapeMismatchError


@torch.no_grad()
def ema_update(pair: StudentTeacherPair) -> StudentTeacherPair:
    """
    teacher <- m * teacher + (1 - m) * student for backbone and head.

    Floating-point buffers (batch-norm running statistics) follow the same
    rule; integer buffers are copied.

    Raises:
        ShapeMismatchError: If any student/teacher tensor pair differs in shape
    """
    momentum = pair.momentum
    student = dict(pair.student.encoder_parameters())
    student.update(pair.student.encoder_buffers())
    teacher = dict(pair.teacher.encoder_parameters())
    teacher.update(pair.teacher.encoder_buffers())

    if student.keys() != teacher.keys():
        raise ShapeMismatchError(f"student and teacher have different tensors: {sorted(student.keys() ^ teacher.keys())}")

    for name, t in teacher.items():
        s = student[name]
        if s.shape != t.shape:
            raise ShapeMismatchError(f"{name}: student {tuple(s.shape)} vs teacher {tuple(t.shape)}")
        if t.is_floating_point():
            t.mul_(momentum).add_(s.detach(), alpha=1.0 - momentum)
        else:
            t.copy_(s)
    return pair
