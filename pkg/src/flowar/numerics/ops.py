"""Differentiable ops on :class:`Tensor`.

Every op computes its forward value with numpy and registers a closure that
maps the output gradient to one gradient per input (``None`` where an input
does not need one).
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .tensor import Tensor, unbroadcast

LAYERNORM_EPS = 1e-6


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product ``a[..., m, k] @ b[..., k, n]``."""
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs operands of rank >= 2, got shapes {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    shared = b.ndim == 2
    if shared:
        # fold leading axes into rows so numpy issues one GEMM instead of a loop
        out = (a.data.reshape(-1, a.shape[-1]) @ b.data).reshape(a.shape[:-1] + (b.shape[-1],))
    else:
        try:
            out = np.matmul(a.data, b.data)
        except ValueError as exc:
            raise ValueError(f"matmul batch dimensions not broadcastable: {a.shape} @ {b.shape}") from exc

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            if shared:
                ga = (g.reshape(-1, g.shape[-1]) @ b.data.T).reshape(a.shape)
            else:
                ga = unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            if shared:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return Tensor._make(out, (a, b), bw)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return Tensor._make(out, (x,), lambda g: (g * out,))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return Tensor._make(out, (x,), lambda g: (g * (1.0 - out * out),))


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return Tensor._make(out, (x,), lambda g: (g * 0.5 / out,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    xd = x.data
    inner = _GELU_C * (xd + 0.044715 * (xd * xd * xd))  # x**3 is slow for float32
    th = np.tanh(inner)
    out = 0.5 * xd * (1.0 + th)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * xd * xd)
        return (g * (0.5 * (1.0 + th) + 0.5 * xd * (1.0 - th * th) * dinner),)

    return Tensor._make(out, (x,), bw)


def silu(x: Tensor) -> Tensor:
    xd = x.data
    sig = 1.0 / (1.0 + np.exp(-xd))
    out = xd * sig

    def bw(g):
        return (g * (sig * (1.0 + xd * (1.0 - sig))),)

    return Tensor._make(out, (x,), bw)


def layernorm(x: Tensor, eps: float = LAYERNORM_EPS) -> Tensor:
    """Normalize the last axis to zero mean and unit variance. No affine."""
    if x.ndim == 0 or x.shape[-1] < 1:
        raise ValueError(f"layernorm needs a non-empty last axis, got shape {x.shape}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv

    def bw(g):
        gm = g.mean(axis=-1, keepdims=True)
        gy = (g * y).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - y * gy),)

    return Tensor._make(y, (x,), bw)


def softmax_attention(q: Tensor, k: Tensor, v: Tensor, mask=None) -> Tensor:
    """Scaled dot-product attention over the last two axes.

    ``q[..., Lq, d]``, ``k[..., Lk, d]``, ``v[..., Lk, dv]``; ``mask`` is a
    boolean ``[Lq, Lk]`` array (True = may attend) broadcast over leading
    axes. Masked keys are removed before normalization. A query row with
    every key masked produces a zero output row.
    """
    d = q.shape[-1]
    scale = 1.0 / math.sqrt(d)
    scores = np.matmul(q.data, np.swapaxes(k.data, -1, -2)) * scale
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        scores = np.where(mask, scores, -np.inf)
    m = scores.max(axis=-1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(scores - m)
    s = e.sum(axis=-1, keepdims=True)
    p = e / np.where(s == 0.0, 1.0, s)
    out = np.matmul(p, v.data)

    def bw(g):
        gv = unbroadcast(np.matmul(np.swapaxes(p, -1, -2), g), v.shape) if v.requires_grad else None
        gq = gk = None
        if q.requires_grad or k.requires_grad:
            dp = np.matmul(g, np.swapaxes(v.data, -1, -2))
            ds = p * (dp - (dp * p).sum(axis=-1, keepdims=True)) * scale
            if q.requires_grad:
                gq = unbroadcast(np.matmul(ds, k.data), q.shape)
            if k.requires_grad:
                gk = unbroadcast(np.matmul(np.swapaxes(ds, -1, -2), q.data), k.shape)
        return gq, gk, gv

    return Tensor._make(out, (q, k, v), bw)


def avg_pool(x: Tensor, r: int) -> Tensor:
    """Average over non-overlapping r x r blocks of the last two axes."""
    h, w = x.shape[-2:]
    if r < 1 or h % r or w % r:
        raise ValueError(f"pool factor {r} does not divide spatial size {h}x{w}")
    if r == 1:
        return x
    lead = x.shape[:-2]
    out = x.data.reshape(*lead, h // r, r, w // r, r).mean(axis=(-3, -1))

    def bw(g):
        gg = np.repeat(np.repeat(g, r, axis=-2), r, axis=-1) / (r * r)
        return (gg,)

    return Tensor._make(out, (x,), bw)


def upsample_nearest(x: Tensor, r: int) -> Tensor:
    """Replicate every element of the last two axes into an r x r block."""
    if r < 1:
        raise ValueError(f"upsample factor must be >= 1, got {r}")
    if r == 1:
        return x
    out = np.repeat(np.repeat(x.data, r, axis=-2), r, axis=-1)
    h, w = x.shape[-2:]
    lead = x.shape[:-2]

    def bw(g):
        return (g.reshape(*lead, h, r, w, r).sum(axis=(-3, -1)),)

    return Tensor._make(out, (x,), bw)


def embedding(table: Tensor, idx) -> Tensor:
    """Row lookup ``table[idx]`` with scatter-add backward."""
    idx = np.asarray(idx, dtype=np.int64)
    n = table.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"embedding index out of range [0, {n}): {idx.min()}..{idx.max()}")

    def bw(g):
        full = np.zeros(table.shape, dtype=g.dtype)
        np.add.at(full, idx.reshape(-1), g.reshape(-1, table.shape[-1]))
        return (full,)

    return Tensor._make(table.data[idx], (table,), bw)


def mse(pred: Tensor, target) -> Tensor:
    """Mean over all elements of the squared difference."""
    target = _as_tensor(target, pred)
    diff = pred.data - target.data
    n = diff.size

    def bw(g):
        gp = g * 2.0 * diff / n
        return (gp if pred.requires_grad else None, -gp if target.requires_grad else None)

    return Tensor._make(np.asarray(np.mean(diff * diff)), (pred, target), bw)


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [_as_tensor(x, xs[0] if isinstance(xs[0], Tensor) else None) for x in xs]
    out = np.concatenate([x.data for x in xs], axis=axis)
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor._make(out, tuple(xs), bw)


def split(x: Tensor, sizes: Sequence[int], axis: int = -1) -> list[Tensor]:
    """Split along ``axis`` into consecutive chunks of the given sizes."""
    axis = axis % x.ndim
    out = []
    start = 0
    for n in sizes:
        sl = [slice(None)] * x.ndim
        sl[axis] = slice(start, start + n)
        out.append(take_slice(x, tuple(sl)))
        start += n
    if start != x.shape[axis]:
        raise ValueError(f"split sizes {list(sizes)} do not cover axis of length {x.shape[axis]}")
    return out


def take_slice(x: Tensor, sl: tuple) -> Tensor:
    """Basic (non-fancy) slicing with a dense backward."""

    def bw(g):
        full = np.zeros(x.shape, dtype=g.dtype)
        full[sl] = g
        return (full,)

    return Tensor._make(x.data[sl], (x,), bw)


def where(cond, a: Tensor, b: Tensor) -> Tensor:
    cond = np.asarray(cond, dtype=bool)
    a = _as_tensor(a)
    b = _as_tensor(b, a)

    def bw(g):
        return unbroadcast(np.where(cond, g, 0.0), a.shape), unbroadcast(np.where(cond, 0.0, g), b.shape)

    return Tensor._make(np.where(cond, a.data, b.data), (a, b), bw)
