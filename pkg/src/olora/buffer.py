"""Tiny buffer of the highest-loss samples seen so far.

Feeds both the replay term of the training objective and the importance
estimation. Entries are kept sorted by loss, highest first, with insertion
order breaking ties (earlier entries win). Losses are refreshed under the
current model every step so stale entries sink and get evicted.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from . import vit
from .errors import ConfigError, DataError

DEFAULT_CAPACITY = 4


@dataclass
class BufferEntry:
    sample: np.ndarray
    label: int
    last_loss: float
    seq: int


class HardBuffer:
    def __init__(self, capacity: int = DEFAULT_CAPACITY):
        if capacity < 1:
            raise ConfigError(f"buffer capacity must be positive, got {capacity}")
        self.capacity = capacity
        self.entries: list[BufferEntry] = []
        self._next_seq = 0

    def __len__(self):
        return len(self.entries)

    def _sort(self) -> None:
        self.entries.sort(key=lambda e: (-e.last_loss, e.seq))

    def update(self, candidates) -> "HardBuffer":
        """Keep the top-k by loss of existing entries plus ``(sample, label, loss)`` candidates."""
        pool = list(self.entries)
        for sample, label, loss in candidates:
            loss = float(loss)
            if not math.isfinite(loss):
                raise DataError(f"candidate loss must be finite, got {loss}")
            pool.append(BufferEntry(np.asarray(sample), int(label), loss, self._next_seq))
            self._next_seq += 1
        pool.sort(key=lambda e: (-e.last_loss, e.seq))
        self.entries = pool[: self.capacity]
        return self

    def refresh_with(self, loss_fn) -> None:
        """Recompute every entry's loss via ``loss_fn(inputs, labels) -> per-sample array``."""
        if not self.entries:
            return
        inputs = np.stack([e.sample for e in self.entries])
        labels = np.array([e.label for e in self.entries], dtype=np.int64)
        losses = np.asarray(loss_fn(inputs, labels), dtype=np.float64)
        for entry, loss in zip(self.entries, losses):
            entry.last_loss = float(loss)
        self._sort()

    def as_batch(self):
        """Stacked (inputs, labels) in buffer order, or None when empty."""
        if not self.entries:
            return None
        inputs = np.stack([e.sample for e in self.entries])
        labels = np.array([e.label for e in self.entries], dtype=np.int64)
        return inputs, labels

    def losses(self):
        return [e.last_loss for e in self.entries]


def refresh_losses(buffer: HardBuffer, model, stack) -> HardBuffer:
    """Refresh entry losses with per-sample cross-entropy under the current model."""

    def loss_fn(inputs, labels):
        logits = vit.forward(model, stack, inputs)
        return T.cross_entropy_per_sample(logits, labels).nd

    buffer.refresh_with(loss_fn)
    return buffer
