#!/usr/bin/env python3
"""
Seeded epoch ordering over a packed split.
"""
from typing import Iterator, Optional

import numpy as np
from torch.utils.data import Sampler

from ingest.manifest import open_split
from pipeline.error_handling import DataIterationError
from shared.models import DatasetSpec
from shared.packed_store import PackedSplit, SampleBatch


def epoch_permutation(count: int, seed: int, epoch: int = 0) -> np.ndarray:
    """Record order of one epoch; (seed, epoch) fully determine it"""
    return np.random.default_rng([seed, epoch]).permutation(count)


def batch_slices(count: int, batch_size: int, drop_last: bool) -> list[tuple[int, int]]:
    if batch_size <= 0:
        raise DataIterationError(f"batch_size must be positive, got {batch_size}")
    if batch_size > count:
        raise DataIterationError(f"batch_size {batch_size} exceeds dataset size {count}")
    stop = (count // batch_size) * batch_size if drop_last else count
    return [(start, min(start + batch_size, count)) for start in range(0, stop, batch_size)]


def iterate_batches(
    spec: DatasetSpec,
    batch_size: int,
    seed: int,
    drop_last: bool = True,
    epoch: int = 0,
    split: Optional[PackedSplit] = None,
) -> Iterator[SampleBatch]:
    """
    One shuffled epoch over an ingested split.

    Args:
        spec: Dataset split (its manifest must exist)
        batch_size: Records per batch
        seed: Shuffle seed
        drop_last: Drop the final partial batch
        epoch: Epoch index mixed into the shuffle
        split: Already opened split, to avoid re-opening

    Yields:
        SampleBatch in shuffled order
    """
    split = split if split is not None else open_split(spec)
    slices = batch_slices(len(split), batch_size, drop_last)
    order = epoch_permutation(len(split), seed, epoch)
    for start, stop in slices:
        yield split.batch(order[start:stop])


class EpochBatchSampler(Sampler[list[int]]):
    """
    Batch sampler with the iterate_batches order, for torch DataLoaders.

    ``set_epoch`` selects the permutation and optionally skips batches
    already consumed before an interruption.
    """

    def __init__(self, count: int, batch_size: int, seed: int, drop_last: bool = True):
        self.count = count
        self.batch_size = batch_size
        self.seed = seed
        self.drop_last = drop_last
        self.epoch = 0
        self.skip_batches = 0
        self._slices = batch_slices(count, batch_size, drop_last)

    def set_epoch(self, epoch: int, skip_batches: int = 0) -> None:
        self.epoch = epoch
        self.skip_batches = skip_batches

    def __len__(self) -> int:
        return max(len(self._slices) - self.skip_batches, 0)

    def __iter__(self) -> Iterator[list[int]]:
        order = epoch_permutation(self.count, self.seed, self.epoch)
        for start, stop in self._slices[self.skip_batches:]:
            yield order[start:stop].tolist()
