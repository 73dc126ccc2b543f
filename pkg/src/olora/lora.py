"""Incremental stacks of low-rank adapter pairs attached to attention weights.

Each attachment site (layer index, projection in {q, v}) holds an ordered
list of (A, B) factor pairs. A is the r x d down-projection, B the d x r
up-projection, so B @ A is a d x d additive delta on the base weight. At most
one pair per site is trainable at any time; older pairs are frozen and then
merged into the base weight, after which they are dropped from the list.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError, StateError
from .tensor import Tensor

PROJECTIONS = ("q", "v")
INIT_STD = 0.02


@dataclass
class LoRAPair:
    a: Tensor  # [rank, d]
    b: Tensor  # [d, rank]
    rank: int
    frozen: bool = False
    created_at_step: int = 0

    def freeze(self) -> None:
        self.frozen = True
        self.a.requires_grad = False
        self.b.requires_grad = False


@dataclass
class _Site:
    pairs: list = field(default_factory=list)
    merged_count: int = 0

    def trainable(self):
        live = [p for p in self.pairs if not p.frozen]
        if len(live) > 1:
            raise StateError("site has more than one trainable pair")
        return live[0] if live else None


class LoRAStack:
    """Per-site pair lists for every (layer, projection) attachment point."""

    def __init__(self, num_layers: int, dim: int):
        if num_layers < 1:
            raise ConfigError(f"num_layers must be positive, got {num_layers}")
        if dim < 1:
            raise ConfigError(f"dim must be positive, got {dim}")
        self.num_layers = num_layers
        self.dim = dim
        self._sites = {
            (layer, proj): _Site() for layer in range(num_layers) for proj in PROJECTIONS
        }

    def sites(self):
        """Deterministic site order: layer ascending, q before v."""
        return list(self._sites)

    def site(self, key) -> _Site:
        if key not in self._sites:
            raise ConfigError(f"unknown site {key!r}")
        return self._sites[key]

    def pairs_at(self, key):
        return list(self.site(key).pairs)

    def trainable_pair(self, key):
        return self.site(key).trainable()

    def trainable_tensors(self):
        """Flat (a, b) tensors of every trainable pair, in site order."""
        out = []
        for key in self.sites():
            pair = self.site(key).trainable()
            if pair is not None:
                out.extend([pair.a, pair.b])
        return out


def add_pair(stack: LoRAStack, site, rank: int, seed: int, step: int = 0,
             dtype=np.float32) -> LoRAStack:
    """Attach a fresh trainable pair: A gaussian, B zero, so B @ A = 0.

    Any previous trainable pair at the site must have been frozen first.
    """
    s = stack.site(site)
    if s.trainable() is not None:
        raise StateError(f"site {site}: trainable pair already present; freeze it first")
    d = stack.dim
    if rank < 1 or rank > d // 4:
        raise ConfigError(f"rank {rank} outside [1, d/4] for d={d}")
    rng = T.make_rng(seed)
    a = T.randn((rank, d), rng, scale=INIT_STD, requires_grad=True, dtype=dtype)
    b = T.zeros((d, rank), requires_grad=True, dtype=dtype)
    s.pairs.append(LoRAPair(a=a, b=b, rank=rank, created_at_step=step))
    return stack


def apply(stack: LoRAStack, site, w_init: Tensor, x: Tensor) -> Tensor:
    """Effective projection (W + sum of B @ A) applied to column input x.

    Computed factor-first as W x + sum B (A x); dense d x d deltas are never
    materialized.
    """
    d = w_init.shape[0]
    if w_init.shape != (d, d):
        raise ShapeError(f"apply: base weight must be square, got {w_init.shape}")
    if x.shape[0] != d:
        raise ShapeError(f"apply: weight {w_init.shape} incompatible with input {x.shape}")
    out = T.matmul(w_init, x)
    for pair in stack.site(site).pairs:
        out = T.add(out, T.matmul(pair.b, T.matmul(pair.a, x)))
    return out


def apply_tokens(stack: LoRAStack, site, w_init: Tensor, tokens: Tensor) -> Tensor:
    """Same operator for row-major token layouts: tokens @ W^T + (tokens @ A^T) @ B^T."""
    d = w_init.shape[0]
    if tokens.shape[-1] != d:
        raise ShapeError(f"apply_tokens: weight {w_init.shape} incompatible with {tokens.shape}")
    out = T.matmul(tokens, T.transpose(w_init, (1, 0)))
    for pair in stack.site(site).pairs:
        down = T.matmul(tokens, T.transpose(pair.a, (1, 0)))
        out = T.add(out, T.matmul(down, T.transpose(pair.b, (1, 0))))
    return out


def freeze_pair(stack: LoRAStack, site) -> None:
    """Freeze the trainable pair without merging (transient state)."""
    pair = stack.site(site).trainable()
    if pair is None:
        raise StateError(f"site {site}: no trainable pair to freeze")
    pair.freeze()


def freeze_and_merge(stack: LoRAStack, site, w_init: Tensor):
    """Fold every pair at the site into the base weight and drop the pairs.

    The trainable pair is frozen first; W gains sum of B @ A in place.
    Forward outputs before and after agree to float32 rounding.
    """
    s = stack.site(site)
    if s.trainable() is None:
        raise StateError(f"site {site}: no trainable pair to merge")
    d = w_init.shape[0]
    if w_init.shape != (d, d):
        raise ShapeError(f"freeze_and_merge: base weight must be square, got {w_init.shape}")
    for pair in s.pairs:
        pair.freeze()
        delta = pair.b.nd.astype(w_init.dtype) @ pair.a.nd.astype(w_init.dtype)
        w_init.data += delta.reshape(-1)
    s.merged_count += len(s.pairs)
    s.pairs.clear()
    return stack, w_init


def lora_param_count(num_layers: int, d: int, r: int) -> int:
    """Total adapter parameters over all layers and both projections."""
    if num_layers < 0 or d < 0 or r < 0:
        raise ConfigError("lora_param_count: arguments must be non-negative")
    return num_layers * 2 * (d * r + r * d)


# ---------------------------------------------------------------------------
# serialization (shared checkpoint format)
# ---------------------------------------------------------------------------

def stack_tensors(stack: LoRAStack) -> dict:
    """Flatten to checkpoint entries: lora.{layer}.{q|v}.{index}.{a|b} etc."""
    out = {}
    for (layer, proj) in stack.sites():
        s = stack.site((layer, proj))
        prefix = f"lora.{layer}.{proj}"
        out[f"{prefix}.merged_count"] = np.array([s.merged_count], dtype=np.float32)
        for i, pair in enumerate(s.pairs):
            out[f"{prefix}.{i}.a"] = pair.a.nd
            out[f"{prefix}.{i}.b"] = pair.b.nd
            out[f"{prefix}.{i}.frozen"] = np.array([1.0 if pair.frozen else 0.0], dtype=np.float32)
            out[f"{prefix}.{i}.step"] = np.array([pair.created_at_step], dtype=np.float32)
    return out


def stack_from_tensors(num_layers: int, dim: int, tensors: dict) -> LoRAStack:
    stack = LoRAStack(num_layers, dim)
    for (layer, proj) in stack.sites():
        s = stack.site((layer, proj))
        prefix = f"lora.{layer}.{proj}"
        s.merged_count = int(tensors[f"{prefix}.merged_count"][0])
        i = 0
        while f"{prefix}.{i}.a" in tensors:
            a = tensors[f"{prefix}.{i}.a"]
            b = tensors[f"{prefix}.{i}.b"]
            frozen = bool(tensors[f"{prefix}.{i}.frozen"][0])
            pair = LoRAPair(
                a=Tensor(a, requires_grad=not frozen),
                b=Tensor(b, requires_grad=not frozen),
                rank=a.shape[0],
                frozen=frozen,
                created_at_step=int(tensors[f"{prefix}.{i}.step"][0]),
            )
            s.pairs.append(pair)
            i += 1
    return stack
