#!/usr/bin/env python3
"""
Fixed-capacity FIFO memory of past teacher embeddings.
"""
import logging
from typing import Any, Union

import torch

from pipeline.error_handling import NumericError, QueueStateError, ShapeMismatchError


NORM_TOLERANCE = 1e-5


class MemoryQueue:
    """
    Ring buffer of K unit-norm rows.

    Rows are written at ``cursor`` and wrap around, so once the queue is full
    the oldest row is always the one at ``cursor``.
    """

    def __init__(
        self,
        capacity: int,
        dim: int,
        device: Union[str, torch.device] = "cpu",
        dtype: torch.dtype = torch.float32,
    ):
        if capacity <= 0 or dim <= 0:
            raise ValueError(f"capacity and dim must be > 0, got {capacity}, {dim}")
        self.capacity = capacity
        self.dim = dim
        self.buffer = torch.zeros(capacity, dim, device=device, dtype=dtype)
        self.cursor = 0
        self.filled = 0
        self.logger = logging.getLogger(__name__)

    def __len__(self) -> int:
        return self.filled

    @property
    def is_full(self) -> bool:
        return self.filled == self.capacity

    @torch.no_grad()
    def enqueue(self, embeddings: torch.Tensor) -> None:
        """
        Append a batch of normalized rows, overwriting the oldest entries.

        Raises:
            ShapeMismatchError: Wrong feature dimension or batch larger than capacity
            NumericError: A row is not unit-norm
        """
        if embeddings.ndim != 2 or embeddings.shape[1] != self.dim:
            raise ShapeMismatchError(f"expected rows of shape [B, {self.dim}], got {tuple(embeddings.shape)}")
        count = embeddings.shape[0]
        if count > self.capacity:
            raise ShapeMismatchError(f"batch of {count} rows exceeds queue capacity {self.capacity}")
        if count == 0:
            return

        norms = embeddings.detach().double().norm(dim=1)
        off = torch.nonzero((norms - 1.0).abs() > NORM_TOLERANCE)
        if len(off):
            row = int(off[0])
            raise NumericError(f"row {row} has norm {float(norms[row]):.6f}; only normalized embeddings can be enqueued")

        index = (self.cursor + torch.arange(count, device=self.buffer.device)) % self.capacity
        self.buffer[index] = embeddings.detach().to(device=self.buffer.device, dtype=self.buffer.dtype)
        self.cursor = (self.cursor + count) % self.capacity
        self.filled = min(self.capacity, self.filled + count)

    def oldest_first(self) -> torch.Tensor:
        """Stored rows from oldest to newest"""
        if not self.is_full:
            return self.buffer[:self.filled].clone()
        return torch.cat([self.buffer[self.cursor:], self.buffer[:self.cursor]], dim=0)

    def support(self) -> torch.Tensor:
        """All K rows in storage order; only valid once the queue is full"""
        if not self.is_full:
            raise QueueStateError(f"queue holds {self.filled}/{self.capacity} rows; distributions need a full queue")
        return self.buffer

    def state_dict(self) -> dict[str, Any]:
        return {
            "capacity": self.capacity,
            "dim": self.dim,
            "buffer": self.buffer.detach().float().cpu().clone(),
            "cursor": self.cursor,
            "filled": self.filled,
        }

    def load_state_dict(self, state: dict[str, Any]) -> None:
        if state["capacity"] != self.capacity or state["dim"] != self.dim:
            raise QueueStateError(
                f"checkpoint queue is {state['capacity']}x{state['dim']}, expected {self.capacity}x{self.dim}"
            )
        self.buffer.copy_(state["buffer"].to(device=self.buffer.device, dtype=self.buffer.dtype))
        self.cursor = int(state["cursor"])
        self.filled = int(state["filled"])
