"""Dense tensors with reverse-mode automatic differentiation.

Values are stored as flat row-major numpy arrays next to an explicit shape.
Every operation builds the result eagerly and records vector-Jacobian
closures, so ``backward`` on a scalar loss populates ``grad`` on every
reachable tensor that requires gradients. Gradients accumulate across
repeated ``backward`` calls until explicitly reset.

Tensors are immutable once created, with two documented exceptions: grad
accumulation, and in-place parameter updates performed by the optimizer
between graph constructions. A graph instance belongs to a single thread.

Default dtype is float32; constructors accept float64 so the gradient-check
suite can re-run any graph at double precision.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import ContractError, ShapeError

GELU_C = math.sqrt(2.0 / math.pi)
GELU_A = 0.044715


def make_rng(seed: int) -> np.random.Generator:
    """Seeded 64-bit generator (PCG64); the only randomness source used."""
    return np.random.Generator(np.random.PCG64(seed))


class Tensor:
    __slots__ = ("data", "shape", "requires_grad", "grad", "_vjps")

    def __init__(self, values, requires_grad=False, dtype=np.float32):
        arr = np.asarray(values, dtype=dtype)
        self.data = arr.reshape(-1)
        self.shape = arr.shape
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._vjps = ()

    @property
    def nd(self) -> np.ndarray:
        """The value as an n-dimensional view of the flat buffer."""
        return self.data.reshape(self.shape)

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.size != 1:
            raise ContractError(f"item() requires a scalar, got shape {self.shape}")
        return float(self.data[0])

    def grad_nd(self) -> np.ndarray:
        if self.grad is None:
            raise ContractError("tensor has no gradient; call backward first")
        return self.grad.reshape(self.shape)

    def detach(self) -> "Tensor":
        """Copy of the value with no graph history and no gradient."""
        t = Tensor.__new__(Tensor)
        t.data = self.data.copy()
        t.shape = self.shape
        t.requires_grad = False
        t.grad = None
        t._vjps = ()
        return t

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


def _result(arr: np.ndarray, vjps) -> Tensor:
    """Wrap an op result, keeping only vjps of grad-requiring parents."""
    t = Tensor.__new__(Tensor)
    arr = np.asarray(arr)
    t.data = arr.reshape(-1)
    t.shape = arr.shape
    live = tuple((p, fn) for p, fn in vjps if p.requires_grad)
    t.requires_grad = bool(live)
    t.grad = None
    t._vjps = live
    return t


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to the original operand shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def zeros(shape, requires_grad=False, dtype=np.float32) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad, dtype=dtype)


def zeros_like(t: Tensor) -> Tensor:
    return zeros(t.shape, dtype=t.dtype)


def randn(shape, rng: np.random.Generator, scale=1.0, requires_grad=False, dtype=np.float32) -> Tensor:
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=requires_grad, dtype=dtype)


# ---------------------------------------------------------------------------
# arithmetic
# ---------------------------------------------------------------------------

def _check_same_shape(op: str, a: Tensor, b: Tensor):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: operand shapes differ: {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("add", a, b)
    return _result(a.nd + b.nd, [(a, lambda g: g), (b, lambda g: g)])


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("sub", a, b)
    return _result(a.nd - b.nd, [(a, lambda g: g), (b, lambda g: -g)])


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("mul", a, b)
    an, bn = a.nd, b.nd
    return _result(an * bn, [(a, lambda g: g * bn), (b, lambda g: g * an)])


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return _result(a.nd * s, [(a, lambda g: g * s)])


def gelu(a: Tensor) -> Tensor:
    """GELU with the tanh approximation (pinned; not the erf form)."""
    x = a.nd
    inner = GELU_C * (x + GELU_A * x**3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def vjp(g):
        dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
        return g * (0.5 * (1.0 + t) + 0.5 * x * dt)

    return _result(out, [(a, vjp)])


_ELEMENTWISE = {"add": add, "sub": sub, "mul": mul, "scale": scale, "gelu": gelu}


def elementwise(kind: str, *args) -> Tensor:
    """Dispatch helper: kind in {add, sub, mul, scale, gelu}."""
    if kind not in _ELEMENTWISE:
        raise ContractError(f"unknown elementwise kind {kind!r}")
    return _ELEMENTWISE[kind](*args)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; stacked (batched) operands broadcast numpy-style."""
    if a.nd.ndim < 2 or b.nd.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-d: {a.shape} x {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions disagree: {a.shape} x {b.shape}")
    an, bn = a.nd, b.nd
    out = an @ bn

    def vjp_a(g):
        return _unbroadcast(g @ bn.swapaxes(-1, -2), a.shape)

    def vjp_b(g):
        return _unbroadcast(an.swapaxes(-1, -2) @ g, b.shape)

    return _result(out, [(a, vjp_a), (b, vjp_b)])


# ---------------------------------------------------------------------------
# shape plumbing
# ---------------------------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if math.prod(shape) != a.size:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}")
    return _result(a.nd.reshape(shape), [(a, lambda g: g.reshape(a.shape))])


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(len(a.shape))):
        raise ShapeError(f"transpose: invalid permutation {axes} for shape {a.shape}")
    inverse = tuple(np.argsort(axes))
    return _result(np.transpose(a.nd, axes), [(a, lambda g: np.transpose(g, inverse))])


def broadcast_to(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        out = np.broadcast_to(a.nd, shape)
    except ValueError as e:
        raise ShapeError(f"broadcast_to: cannot broadcast {a.shape} to {shape}") from e
    return _result(out.copy(), [(a, lambda g: _unbroadcast(g, a.shape))])


def concat(tensors, axis: int) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat: need at least one tensor")
    rank = len(tensors[0].shape)
    if not -rank <= axis < rank:
        raise IndexError(f"concat: axis {axis} out of range for rank {rank}")
    axis = axis % rank
    out = np.concatenate([t.nd for t in tensors], axis=axis)
    vjps = []
    start = 0
    for t in tensors:
        stop = start + t.shape[axis]
        sl = tuple(slice(None) if i != axis else slice(start, stop) for i in range(rank))
        vjps.append((t, lambda g, sl=sl: g[sl]))
        start = stop
    return _result(out, vjps)


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    rank = len(a.shape)
    if not -rank <= axis < rank:
        raise IndexError(f"slice_axis: axis {axis} out of range for rank {rank}")
    axis = axis % rank
    sl = tuple(slice(None) if i != axis else slice(start, stop) for i in range(rank))

    def vjp(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        full[sl] = g
        return full

    return _result(a.nd[sl].copy(), [(a, vjp)])


# ---------------------------------------------------------------------------
# reductions and normalizations
# ---------------------------------------------------------------------------

def tensor_sum(a: Tensor) -> Tensor:
    return _result(np.asarray(a.nd.sum()), [(a, lambda g: np.broadcast_to(g, a.shape))])


def tensor_mean(a: Tensor) -> Tensor:
    n = a.size
    return _result(np.asarray(a.nd.mean()), [(a, lambda g: np.broadcast_to(g / n, a.shape))])


def softmax(a: Tensor, axis: int) -> Tensor:
    """Row-stochastic along ``axis``; stabilized by max subtraction."""
    rank = len(a.shape)
    if not -rank <= axis < rank:
        raise IndexError(f"softmax: axis {axis} out of range for rank {rank}")
    x = a.nd
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return y * (g - (g * y).sum(axis=axis, keepdims=True))

    return _result(y, [(a, vjp)])


def layer_norm(a: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    feat = a.shape[-1]
    if gamma.shape != (feat,) or beta.shape != (feat,):
        raise ShapeError(
            f"layer_norm: gamma/beta shapes {gamma.shape}/{beta.shape} "
            f"do not match last axis of {a.shape}"
        )
    if eps <= 0:
        raise ContractError("layer_norm: eps must be positive")
    x = a.nd
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv
    gn, bn = gamma.nd, beta.nd
    out = xhat * gn + bn

    lead = tuple(range(x.ndim - 1))

    def vjp_x(g):
        dxhat = g * gn
        return inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )

    return _result(
        out,
        [
            (a, vjp_x),
            (gamma, lambda g: (g * xhat).sum(axis=lead)),
            (beta, lambda g: g.sum(axis=lead)),
        ],
    )


def cross_entropy_per_sample(logits: Tensor, labels) -> Tensor:
    """Per-sample negative log softmax probability of the true class.

    The negation of each entry is the per-sample log-likelihood used for
    importance estimation.
    """
    if len(logits.shape) != 2:
        raise ShapeError(f"cross_entropy: logits must be 2-d, got {logits.shape}")
    n, c = logits.shape
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.shape != (n,):
        raise ShapeError(f"cross_entropy: {n} rows but {labels.shape[0]} labels")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise IndexError(f"cross_entropy: label out of range [0, {c})")
    x = logits.nd
    shifted = x - x.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    losses = lse - shifted[np.arange(n), labels]

    def vjp(g):
        p = np.exp(shifted - lse[:, None])
        p[np.arange(n), labels] -= 1.0
        return p * g[:, None]

    return _result(losses, [(logits, vjp)])


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over the batch of the per-sample cross-entropy."""
    return tensor_mean(cross_entropy_per_sample(logits, labels))


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------

def _topo_order(root: Tensor):
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent, _ in node._vjps:
            stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(tensor) into ``grad`` across the whole graph.

    Repeated calls keep adding; use reset_grads between independent passes.
    """
    if loss.size != 1:
        raise ContractError(f"backward: root must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topo_order(loss)
    flowing = {id(loss): np.ones(loss.shape, dtype=loss.dtype)}
    for node in reversed(order):
        g = flowing.pop(id(node), None)
        if g is None:
            continue
        if node.grad is None:
            node.grad = g.reshape(-1).astype(node.dtype, copy=True)
        else:
            node.grad = node.grad + g.reshape(-1)
        for parent, vjp in node._vjps:
            contrib = vjp(g)
            key = id(parent)
            if key in flowing:
                flowing[key] = flowing[key] + contrib
            else:
                flowing[key] = contrib


def reset_grads(tensors) -> None:
    for t in tensors:
        t.grad = None
