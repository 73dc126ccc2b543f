"""Shared test utilities: numeric-gradient oracle and comparison helpers."""

import numpy as np

from olora import tensor as T


def central_diff(f, tensors, h=1e-4):
    """Numeric gradient of the scalar ``f()`` w.r.t. each tensor's flat data.

    ``f`` must rebuild its graph from the same leaf tensors on every call.
    """
    grads = []
    for t in tensors:
        g = np.zeros_like(t.data)
        for i in range(t.data.size):
            orig = t.data[i]
            t.data[i] = orig + h
            fp = f().item()
            t.data[i] = orig - h
            fm = f().item()
            t.data[i] = orig
            g[i] = (fp - fm) / (2.0 * h)
        grads.append(g)
    return grads


def analytic_grads(f, tensors):
    """Analytic gradients of the scalar graph built by ``f()``."""
    T.reset_grads(tensors)
    loss = f()
    T.backward(loss)
    return [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in tensors]


def assert_grads_close(analytic, numeric, rel=1e-3, atol=1e-6):
    for a, n in zip(analytic, numeric):
        bound = atol + rel * np.maximum(np.abs(a), np.abs(n))
        if not np.all(np.abs(a - n) <= bound):
            worst = np.abs(a - n).max()
            raise AssertionError(
                f"gradient mismatch: max abs diff {worst:.3e}, "
                f"analytic range [{a.min():.3e}, {a.max():.3e}]"
            )


def check_gradients(f, tensors, h=1e-4, rel=1e-3, atol=1e-6):
    assert_grads_close(analytic_grads(f, tensors), central_diff(f, tensors, h=h), rel=rel, atol=atol)


def leaf(rng, shape, scale=1.0, dtype=np.float64):
    return T.Tensor(rng.standard_normal(shape) * scale, requires_grad=True, dtype=dtype)
