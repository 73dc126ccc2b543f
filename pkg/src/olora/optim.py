"""Adam optimizer with bias correction, operating on flat parameter arrays."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError


@dataclass
class AdamState:
    first_moment: list
    second_moment: list
    step_count: int
    lr: float
    beta1: float
    beta2: float
    eps: float

    @classmethod
    def initialize(cls, params, lr=2e-4, beta1=0.9, beta2=0.999, eps=1e-8) -> "AdamState":
        return cls(
            first_moment=[np.zeros_like(p) for p in params],
            second_moment=[np.zeros_like(p) for p in params],
            step_count=0,
            lr=float(lr),
            beta1=float(beta1),
            beta2=float(beta2),
            eps=float(eps),
        )


def adam_step(params, grads, state: AdamState) -> None:
    """One bias-corrected Adam update, in place on ``params``."""
    if len(params) != len(grads) or len(params) != len(state.first_moment):
        raise ShapeError(
            f"adam_step: {len(params)} params, {len(grads)} grads, "
            f"{len(state.first_moment)} moment slots"
        )
    for p, g, m in zip(params, grads, state.first_moment):
        if p.shape != g.shape or p.shape != m.shape:
            raise ShapeError(f"adam_step: shape mismatch {p.shape} vs {g.shape} vs {m.shape}")
    state.step_count += 1
    t = state.step_count
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


class Adam:
    """Convenience wrapper stepping a list of parameter tensors."""

    def __init__(self, tensors, lr=2e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.tensors = list(tensors)
        self.state = AdamState.initialize([t.data for t in self.tensors], lr, beta1, beta2, eps)

    def step(self) -> None:
        grads = []
        for t in self.tensors:
            grads.append(t.grad if t.grad is not None else np.zeros_like(t.data))
        adam_step([t.data for t in self.tensors], grads, self.state)

    def zero_grad(self) -> None:
        for t in self.tensors:
            t.grad = None

    def rebuilt(self, tensors) -> "Adam":
        """New optimizer over ``tensors``; moments carry over for tensors kept."""
        out = Adam.__new__(Adam)
        out.tensors = list(tensors)
        kept = {id(t): i for i, t in enumerate(self.tensors)}
        fm, sm = [], []
        for t in out.tensors:
            i = kept.get(id(t))
            if i is None:
                fm.append(np.zeros_like(t.data))
                sm.append(np.zeros_like(t.data))
            else:
                fm.append(self.state.first_moment[i])
                sm.append(self.state.second_moment[i])
        out.state = AdamState(
            first_moment=fm,
            second_moment=sm,
            step_count=self.state.step_count,
            lr=self.state.lr,
            beta1=self.state.beta1,
            beta2=self.state.beta2,
            eps=self.state.eps,
        )
        return out
