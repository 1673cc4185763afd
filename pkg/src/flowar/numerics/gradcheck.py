"""Central finite-difference gradient checks."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward, no_grad


def numerical_grad(f: Callable[[], Tensor], x: Tensor, h: float = 1e-5, indices=None) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. ``x`` (modified in place, then restored).

    With ``indices`` given, only those flat positions are evaluated; the
    returned array then has one entry per index.
    """
    flat = x.data.reshape(-1)
    idx = range(flat.size) if indices is None else indices
    out = []
    with no_grad():
        for i in idx:
            old = flat[i]
            flat[i] = old + h
            fp = float(f().data)
            flat[i] = old - h
            fm = float(f().data)
            flat[i] = old
            out.append((fp - fm) / (2 * h))
    out = np.asarray(out)
    return out.reshape(x.shape) if indices is None else out


def analytic_grads(f: Callable[[], Tensor], xs: Sequence[Tensor]) -> list[np.ndarray]:
    for x in xs:
        x.grad = None
    backward(f())
    return [np.zeros_like(x.data) if x.grad is None else x.grad.copy() for x in xs]


def relative_error(a: np.ndarray, n: np.ndarray, floor: float = 1e-8) -> np.ndarray:
    """|a - n| / max(|a|, |n|), with entries where both are below ``floor`` reported as 0."""
    a = np.asarray(a, dtype=np.float64)
    n = np.asarray(n, dtype=np.float64)
    denom = np.maximum(np.abs(a), np.abs(n))
    err = np.abs(a - n) / np.where(denom < floor, 1.0, denom)
    return np.where(denom < floor, 0.0, err)


def check_gradients(f: Callable[[], Tensor], xs: Sequence[Tensor], h: float = 1e-5,
                    max_entries: int | None = None, rng: np.random.Generator | None = None,
                    floor: float = 1e-8) -> float:
    """Return the worst relative error between backward() and finite differences.

    ``max_entries`` limits the number of checked positions per tensor (chosen
    with ``rng``); ``None`` checks every entry.
    """
    grads = analytic_grads(f, xs)
    worst = 0.0
    for x, g in zip(xs, grads):
        if max_entries is None or x.size <= max_entries:
            idx = np.arange(x.size)
        else:
            rng = rng or np.random.default_rng(0)
            idx = rng.choice(x.size, size=max_entries, replace=False)
        num = numerical_grad(f, x, h, indices=idx)
        err = relative_error(g.reshape(-1)[idx], num, floor)
        worst = max(worst, float(err.max(initial=0.0)))
    return worst
