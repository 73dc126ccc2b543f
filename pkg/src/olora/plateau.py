"""Loss-window state machine for spotting distribution shifts and convergence.

A sliding window of recent training losses is watched for two events. A
*peak* fires when appending one loss raises the window mean by more than the
standard deviation the window had before the append; it marks a shift in the
incoming data. A *plateau* fires when the window mean and population variance
both drop below fixed thresholds, but only after a peak has armed the
detector; it marks convergence on the current distribution. The window slides
continuously and is never cleared by events. No event is emitted while the
window is underfull, and the whole detector is a pure function of the pushed
loss sequence and its thresholds.
"""

from __future__ import annotations

import math
from collections import deque

from .errors import ConfigError, DataError

PEAK = "peak"
PLATEAU = "plateau"

DEFAULT_CAPACITY = 5

# per-dataset presets from the published grid searches
THRESHOLD_PRESETS = {
    "cifar100": (2.6, 0.03),
    "imagenet-r": (5.2, 0.02),
    "imagenet-s": (5.6, 0.06),
    "core50": (6.0, 0.1),
    "cub200": (24.0, 1.0),
}


class LossWindow:
    def __init__(self, capacity: int = DEFAULT_CAPACITY, mean_threshold: float = 2.6,
                 var_threshold: float = 0.03):
        if capacity < 2:
            raise ConfigError(f"window capacity must be at least 2, got {capacity}")
        if mean_threshold <= 0 or var_threshold <= 0:
            raise ConfigError("thresholds must be positive")
        self.capacity = capacity
        self.mean_threshold = float(mean_threshold)
        self.var_threshold = float(var_threshold)
        self.values = deque(maxlen=capacity)
        self.armed = False
        self.last_mean = 0.0

    def _stats(self):
        n = len(self.values)
        mean = sum(self.values) / n
        var = sum((v - mean) ** 2 for v in self.values) / n
        return mean, var

    def push(self, loss: float):
        """Append a loss; returns PEAK, PLATEAU or None (peak takes priority)."""
        loss = float(loss)
        if not math.isfinite(loss):
            raise DataError(f"loss must be finite, got {loss}")
        was_full = len(self.values) == self.capacity
        if was_full:
            prev_mean, prev_var = self._stats()
        self.values.append(loss)
        if len(self.values) < self.capacity:
            return None
        mean, var = self._stats()
        self.last_mean = mean
        if was_full and mean - prev_mean > math.sqrt(prev_var):
            self.armed = True
            return PEAK
        if self.armed and mean < self.mean_threshold and var < self.var_threshold:
            self.armed = False
            return PLATEAU
        return None

    def reset(self) -> None:
        """Empty the buffer and disarm; thresholds are retained."""
        self.values.clear()
        self.armed = False
        self.last_mean = 0.0


def grid_search_thresholds(candidate_means, candidate_vars, validation_run):
    """Exhaustively score every (mean, var) pair and return the best one.

    ``validation_run(mean, var)`` must return a final-accuracy score for a
    short run with those thresholds. Ties break toward the lexicographically
    smaller (mean, var) pair.
    """
    means = list(candidate_means)
    variances = list(candidate_vars)
    if not means or not variances:
        raise ConfigError("grid_search_thresholds: empty candidate grid")
    best_pair, best_score = None, None
    for m in sorted(means):
        for v in sorted(variances):
            score = validation_run(m, v)
            if best_score is None or score > best_score:
                best_pair, best_score = (m, v), score
    return best_pair


# ---------------------------------------------------------------------------
# replay interface (loss CSV in, event CSV out)
# ---------------------------------------------------------------------------

def replay(losses, capacity, mean_threshold, var_threshold):
    """Run a fresh window over a loss sequence; rows are (step, loss, mean, var, event)."""
    window = LossWindow(capacity, mean_threshold, var_threshold)
    rows = []
    for step, loss in enumerate(losses, start=1):
        event = window.push(loss)
        if window.values:
            mean, var = window._stats()
        else:
            mean, var = 0.0, 0.0
        rows.append((step, float(loss), mean, var, event or ""))
    return rows


def read_loss_csv(path):
    """One finite float per line."""
    losses = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            try:
                losses.append(float(line))
            except ValueError as e:
                raise DataError(f"{path}: bad loss value {line!r}") from e
    return losses


def write_event_csv(path, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("step,loss,mean,var,event\n")
        for step, loss, mean, var, event in rows:
            f.write(f"{step},{loss!r},{mean!r},{var!r},{event}\n")
