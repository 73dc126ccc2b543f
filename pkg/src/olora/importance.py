"""Online importance weights for adapter factors plus the penalized objective.

Importance is the per-entry mean of squared log-likelihood gradients over the
hard-buffer samples, estimated separately for the A and B factor of the one
trainable pair at each site. Across plateaus the stored importance is the
element-wise running maximum of all estimates so far. The penalty anchors the
trainable factors either at their snapshot values (deviation mode, the
default) or at zero (literal mode), weighted by importance and lambda/2.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from . import vit
from .errors import ConfigError, ShapeError, StateError
from .tensor import Tensor

MODES = ("deviation", "literal")


@dataclass
class SiteImportance:
    omega_a: np.ndarray
    omega_b: np.ndarray
    anchor_a: np.ndarray
    anchor_b: np.ndarray


class ImportanceState:
    def __init__(self, lam: float = 2000.0, mode: str = "deviation"):
        if lam <= 0:
            raise ConfigError(f"lambda must be positive, got {lam}")
        if mode not in MODES:
            raise ConfigError(f"penalty mode must be one of {MODES}, got {mode!r}")
        self.lam = float(lam)
        self.mode = mode
        self.sites: dict = {}

    def absorb(self, fresh: dict) -> None:
        """Fold a new estimate in via element-wise running maximum."""
        for key, (oa, ob) in fresh.items():
            if key in self.sites:
                site = self.sites[key]
                site.omega_a = np.maximum(site.omega_a, oa)
                site.omega_b = np.maximum(site.omega_b, ob)
            else:
                self.sites[key] = SiteImportance(
                    omega_a=oa.copy(), omega_b=ob.copy(),
                    anchor_a=np.zeros_like(oa), anchor_b=np.zeros_like(ob),
                )


def estimate_importance(model, stack, hard_buffer) -> dict:
    """Mean of squared per-sample log-likelihood gradients, per trainable factor.

    The per-sample log-likelihood is the negative per-sample cross-entropy, so
    its gradient is the negated loss gradient; squaring makes the sign moot.
    Frozen pairs and backbone weights never receive gradients here.
    """
    batch = hard_buffer.as_batch()
    if batch is None:
        raise StateError("estimate_importance: hard buffer is empty")
    pairs = {}
    for key in stack.sites():
        pair = stack.trainable_pair(key)
        if pair is None:
            raise StateError(f"estimate_importance: no trainable pair at site {key}")
        pairs[key] = pair
    inputs, labels = batch
    n = len(labels)
    acc = {
        key: (np.zeros_like(pair.a.data, dtype=np.float64),
              np.zeros_like(pair.b.data, dtype=np.float64))
        for key, pair in pairs.items()
    }
    tensors = [t for pair in pairs.values() for t in (pair.a, pair.b)]
    for i in range(n):
        T.reset_grads(tensors)
        logits = vit.forward(model, stack, inputs[i : i + 1])
        loss = T.cross_entropy(logits, labels[i : i + 1])
        T.backward(loss)
        for key, pair in pairs.items():
            ga = pair.a.grad if pair.a.grad is not None else np.zeros_like(pair.a.data)
            gb = pair.b.grad if pair.b.grad is not None else np.zeros_like(pair.b.data)
            oa, ob = acc[key]
            oa += ga.astype(np.float64) ** 2
            ob += gb.astype(np.float64) ** 2
    # leave no stray gradients behind (the head also received some)
    T.reset_grads(tensors)
    T.reset_grads(model.params.values())
    out = {}
    for key, pair in pairs.items():
        oa, ob = acc[key]
        out[key] = (
            (oa / n).astype(pair.a.dtype).reshape(pair.a.shape),
            (ob / n).astype(pair.b.dtype).reshape(pair.b.shape),
        )
    return out


def snapshot_map(state: ImportanceState, stack) -> ImportanceState:
    """Anchor the penalty at the current trainable factor values.

    Called at a plateau; after the freeze/merge/add cycle the trainable pair
    is the freshly initialized one, so its anchor is its initialization.
    """
    for key in stack.sites():
        pair = stack.trainable_pair(key)
        if pair is None:
            continue
        if key in state.sites:
            site = state.sites[key]
            site.anchor_a = pair.a.nd.copy()
            site.anchor_b = pair.b.nd.copy()
        else:
            state.sites[key] = SiteImportance(
                omega_a=np.zeros(pair.a.shape, dtype=pair.a.dtype),
                omega_b=np.zeros(pair.b.shape, dtype=pair.b.dtype),
                anchor_a=pair.a.nd.copy(),
                anchor_b=pair.b.nd.copy(),
            )
    return state


def _factor_penalty(factor: Tensor, omega: np.ndarray, anchor: np.ndarray, mode: str) -> Tensor:
    if tuple(omega.shape) != factor.shape:
        raise ShapeError(
            f"importance shape {omega.shape} does not match factor shape {factor.shape}"
        )
    if mode == "deviation":
        diff = T.sub(factor, Tensor(anchor, dtype=factor.dtype))
    else:
        diff = factor
    weighted = T.mul(Tensor(omega, dtype=factor.dtype), T.mul(diff, diff))
    return T.tensor_sum(weighted)


def lora_penalty(state: ImportanceState, stack) -> Tensor:
    """(lambda / 2) * sum over sites of importance-weighted squared factors."""
    total = None
    for key in stack.sites():
        pair = stack.trainable_pair(key)
        if pair is None or key not in state.sites:
            continue
        site = state.sites[key]
        term = T.add(
            _factor_penalty(pair.a, site.omega_a, site.anchor_a, state.mode),
            _factor_penalty(pair.b, site.omega_b, site.anchor_b, state.mode),
        )
        total = term if total is None else T.add(total, term)
    if total is None:
        return Tensor(0.0)
    return T.scale(total, state.lam / 2.0)


@dataclass
class LossParts:
    total: Tensor
    batch_term: float
    buffer_term: float
    penalty_term: float
    per_sample: np.ndarray


def total_loss(model, stack, batch, hard_buffer, state: ImportanceState) -> LossParts:
    """Current-batch loss + hard-buffer loss + adapter penalty, kept separable."""
    inputs, labels = batch
    if len(labels) == 0:
        raise StateError("total_loss: current batch is empty")
    per_sample = T.cross_entropy_per_sample(vit.forward(model, stack, inputs), labels)
    batch_term = T.tensor_mean(per_sample)
    buffered = hard_buffer.as_batch() if hard_buffer is not None else None
    if buffered is None:
        buffer_term = Tensor(0.0, dtype=batch_term.dtype)
    else:
        buffer_term = T.cross_entropy(vit.forward(model, stack, buffered[0]), buffered[1])
    penalty = lora_penalty(state, stack)
    if not penalty.requires_grad and penalty.dtype != batch_term.dtype:
        penalty = Tensor(penalty.item(), dtype=batch_term.dtype)
    total = T.add(T.add(batch_term, buffer_term), penalty)
    return LossParts(
        total=total,
        batch_term=float(batch_term.data[0]),
        buffer_term=float(buffer_term.data[0]),
        penalty_term=float(penalty.data[0]),
        per_sample=per_sample.nd.copy(),
    )
