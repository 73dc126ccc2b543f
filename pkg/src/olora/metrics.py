"""Accuracy bookkeeping and the three stream-evaluation metrics.

``AccuracyMatrix`` stores a[i][j], the test accuracy on task i after training
task j, with NaN marking entries that are undefined because task i had not
been trained yet (i > j). Final accuracy averages the last column; forgetting
averages, over all but the last task, the drop from each task's historical
best to its final accuracy; the accuracy-curve area averages the recorded
anytime-accuracy trace (the unnormalized running sum is also reported).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError, DomainError, StateError


class AccuracyMatrix:
    def __init__(self, num_tasks: int):
        if num_tasks < 1:
            raise ConfigError("num_tasks must be positive")
        self.num_tasks = num_tasks
        self.a = np.full((num_tasks, num_tasks), np.nan)

    def record(self, task: int, after_task: int, accuracy: float) -> None:
        if not 0 <= task < self.num_tasks or not 0 <= after_task < self.num_tasks:
            raise IndexError(f"task indices ({task}, {after_task}) out of range")
        if not 0.0 <= accuracy <= 1.0:
            raise DataError(f"accuracy {accuracy} outside [0, 1]")
        self.a[task, after_task] = accuracy

    def defined(self, task: int, after_task: int) -> bool:
        return not math.isnan(self.a[task, after_task])


def a_final(matrix: AccuracyMatrix) -> float:
    """Mean accuracy over all tasks after the last task finished training."""
    last = matrix.a[:, -1]
    if np.isnan(last).any():
        raise StateError("a_final: final column incomplete")
    return float(last.mean())


def forgetting(matrix: AccuracyMatrix) -> float:
    """Mean drop from each task's historical best to its final accuracy.

    The last task is excluded (its forgetting is zero by construction);
    negative values indicate backward transfer.
    """
    t = matrix.num_tasks
    if t < 2:
        raise DomainError("forgetting needs at least 2 tasks")
    drops = []
    for k in range(t - 1):
        history = matrix.a[k, k : t - 1]
        final = matrix.a[k, t - 1]
        if np.isnan(final) or np.isnan(history).all():
            raise StateError(f"forgetting: required entries missing for task {k}")
        drops.append(float(np.nanmax(history) - final))
    return float(np.mean(drops))


@dataclass
class AccuracyTrace:
    """Anytime-inference accuracies recorded against samples seen."""

    samples_seen: list = field(default_factory=list)
    accuracies: list = field(default_factory=list)

    def record(self, samples: int, accuracy: float) -> None:
        if not 0.0 <= accuracy <= 1.0:
            raise DataError(f"accuracy {accuracy} outside [0, 1]")
        self.samples_seen.append(int(samples))
        self.accuracies.append(float(accuracy))

    def __len__(self):
        return len(self.accuracies)


def a_auc(trace: AccuracyTrace) -> float:
    """Normalized area under the accuracy curve: the mean recorded accuracy."""
    if len(trace) == 0:
        raise DomainError("a_auc: empty trace")
    return float(np.mean(trace.accuracies))


def a_auc_raw(trace: AccuracyTrace) -> float:
    """Unnormalized sum of recorded accuracies (unit step between queries)."""
    if len(trace) == 0:
        raise DomainError("a_auc: empty trace")
    return float(np.sum(trace.accuracies))


METRICS_HEADER = "run_id,seed,method,scenario,a_final,a_auc_norm,a_auc_raw,forgetting"


def metrics_row(run_id: str, seed, method: str, scenario: str,
                final: float, auc_norm: float, auc_raw: float, forget: float) -> str:
    return (f"{run_id},{seed},{method},{scenario},"
            f"{final!r},{auc_norm!r},{auc_raw!r},{forget!r}")


def write_metrics_csv(path, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(METRICS_HEADER + "\n")
        for row in rows:
            f.write(row + "\n")
