#!/usr/bin/env python3
"""
torch Dataset adapters over packed splits.

Random views are seeded per (run seed, epoch, record id), so the views a
record receives do not depend on the number of loader workers.
"""
from typing import Optional, Sequence

import torch
from torch.utils.data import Dataset

from augmentation.views import (
    Normalization,
    augment,
    eval_view,
    make_view_pair,
    sample_seed_sequence,
    seeded_generator,
)
from shared.models import AugmentationPolicy
from shared.packed_store import UNLABELED, PackedSplit


class ViewPairDataset(Dataset):
    """Yields (teacher_view, [student_views], record_id) for pretraining"""

    def __init__(
        self,
        split: PackedSplit,
        weak_policy: AugmentationPolicy,
        student_policy: AugmentationPolicy,
        crop_sides: Sequence[int],
        normalization: Normalization,
        seed: int = 0,
    ):
        self.split = split
        self.weak_policy = weak_policy
        self.student_policy = student_policy
        self.crop_sides = list(crop_sides)
        self.normalization = normalization
        self.seed = seed
        self.epoch = 0

    def set_epoch(self, epoch: int) -> None:
        self.epoch = epoch

    def __len__(self) -> int:
        return len(self.split)

    def __getitem__(self, index: int):
        record = self.split.record(index)
        pair = make_view_pair(
            record.image,
            self.weak_policy,
            self.student_policy,
            self.crop_sides,
            sample_seed_sequence(self.seed, self.epoch, record.id),
            self.normalization,
            source_id=record.id,
        )
        return pair.teacher_view, pair.student_views, record.id


class EvalDataset(Dataset):
    """
    Yields (image, label, record_id) for evaluation.

    Without a policy every image gets the deterministic center view; with a
    policy (augmented linear-classifier training) views are drawn per epoch.
    """

    def __init__(
        self,
        split: PackedSplit,
        side: int,
        normalization: Normalization,
        policy: Optional[AugmentationPolicy] = None,
        seed: int = 0,
    ):
        self.split = split
        self.side = side
        self.normalization = normalization
        self.policy = policy
        self.seed = seed
        self.epoch = 0

    def set_epoch(self, epoch: int) -> None:
        self.epoch = epoch

    def __len__(self) -> int:
        return len(self.split)

    def __getitem__(self, index: int):
        record = self.split.record(index)
        if self.policy is None:
            image = eval_view(record.image, self.side, self.normalization)
        else:
            generator = seeded_generator(sample_seed_sequence(self.seed, self.epoch, record.id))
            image = augment(record.image, self.policy, generator, self.normalization)
        label = UNLABELED if record.label is None else record.label
        return image, torch.tensor(label, dtype=torch.long), record.id
