"""Small module system: parameter discovery and the common layers."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import ops
from .tensor import Tensor


def parameter(data, dtype=np.float32) -> Tensor:
    return Tensor(np.array(data, dtype=dtype), requires_grad=True)


class Module:
    """Base class. Parameters are ``Tensor`` attributes with ``requires_grad``.

    Submodules may be attributes or live in lists. Names follow attribute
    insertion order, which keeps checkpoint layouts stable.
    """

    training = True

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor):
                if value.requires_grad:
                    yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={missing} unexpected={unexpected}")
        for k, p in own.items():
            arr = np.asarray(state[k])
            if arr.shape != p.shape:
                raise ValueError(f"shape mismatch for {k}: {arr.shape} vs {p.shape}")
            p.data = arr.astype(p.dtype, copy=True)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, dtype=np.float32,
                 bias: bool = True, zero: bool = False):
        if zero:
            w = np.zeros((d_in, d_out))
        else:
            # xavier-uniform
            lim = np.sqrt(6.0 / (d_in + d_out))
            w = rng.uniform(-lim, lim, size=(d_in, d_out))
        self.weight = parameter(w, dtype)
        self.bias = parameter(np.zeros(d_out), dtype) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        y = ops.matmul(x, self.weight)
        if self.bias is not None:
            y = y + self.bias
        return y


class LayerNorm(Module):
    def __init__(self, dim: int, dtype=np.float32, affine: bool = True):
        self.gain = parameter(np.ones(dim), dtype) if affine else None
        self.shift = parameter(np.zeros(dim), dtype) if affine else None

    def forward(self, x: Tensor) -> Tensor:
        y = ops.layernorm(x)
        if self.gain is not None:
            y = y * self.gain + self.shift
        return y


class MLP(Module):
    def __init__(self, dim: int, hidden: int, rng, dtype=np.float32, zero_out: bool = False):
        self.fc1 = Linear(dim, hidden, rng, dtype)
        self.fc2 = Linear(hidden, dim, rng, dtype, zero=zero_out)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(ops.gelu(self.fc1(x)))


class MultiHeadAttention(Module):
    """Self- or cross-attention with fused QKV for the self case."""

    def __init__(self, dim: int, heads: int, rng, dtype=np.float32, kv_dim: int | None = None,
                 zero_out: bool = False):
        if dim % heads:
            raise ValueError(f"width {dim} not divisible by heads {heads}")
        self.heads = heads
        self.cross = kv_dim is not None
        if self.cross:
            self.q = Linear(dim, dim, rng, dtype)
            self.kv = Linear(kv_dim, 2 * dim, rng, dtype)
        else:
            self.qkv = Linear(dim, 3 * dim, rng, dtype)
        self.proj = Linear(dim, dim, rng, dtype, zero=zero_out)

    def _heads(self, x: Tensor) -> Tensor:
        b, n, d = x.shape
        return x.reshape(b, n, self.heads, d // self.heads).transpose(0, 2, 1, 3)

    def project_qkv(self, x: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        b, n, d = x.shape
        h = self.heads
        qkv = self.qkv(x).reshape(b, n, 3, h, d // h).transpose(2, 0, 3, 1, 4)
        return qkv[0], qkv[1], qkv[2]

    def merge(self, o: Tensor) -> Tensor:
        b, h, n, dh = o.shape
        return self.proj(o.transpose(0, 2, 1, 3).reshape(b, n, h * dh))

    def forward(self, x: Tensor, mask=None, context: Tensor | None = None) -> Tensor:
        if self.cross:
            b, m, _ = context.shape
            d = x.shape[-1]
            q = self._heads(self.q(x))
            kv = self.kv(context).reshape(b, m, 2, self.heads, d // self.heads).transpose(2, 0, 3, 1, 4)
            k, v = kv[0], kv[1]
        else:
            q, k, v = self.project_qkv(x)
        return self.merge(ops.softmax_attention(q, k, v, mask))
