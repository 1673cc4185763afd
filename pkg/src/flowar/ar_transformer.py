"""Scale-wise autoregressive transformer producing per-scale semantics.

Sequence layout for a schedule with n scales (scale k has ``N_k`` tokens)::

    block 0      : class token(s)                      N_0 tokens
    block k >= 1 : Up(s^{k-1}) at scale k resolution   N_k tokens

Block k is projected to the semantics for scale k, so a single masked
forward pass (teacher forcing) yields every scale's semantics. Tokens
attend bidirectionally inside their block and to every earlier block.
Semantics are returned token-major, ``[B, N_k, W]`` in row-major (h, w)
order; ``semantics_map`` converts to ``[B, W, h, w]``.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import numerics as nx
from .numerics import Tensor
from .numerics.nn import LayerNorm, Linear, MLP, Module, MultiHeadAttention, parameter
from .pyramid import ScaleSchedule, resample

# depth, width, heads; S/B/L/H follow the published variant table, "tiny" is the desk preset
AR_PRESETS = {
    "tiny": (4, 128, 4),
    "S": (12, 768, 12),
    "B": (16, 768, 12),
    "L": (16, 1024, 16),
    "H": (30, 1536, 24),
}


@dataclass
class ARConfig:
    depth: int = 4
    width: int = 128
    heads: int = 4
    mlp_ratio: float = 4.0
    num_classes: int = 4
    schedule: tuple = (1, 2, 4)
    latent_channels: int = 48
    resample: str = "nearest"

    def __post_init__(self):
        self.schedule = tuple(ScaleSchedule.of(self.schedule).sizes)
        if self.width % self.heads:
            raise ValueError(f"width {self.width} not divisible by heads {self.heads}")

    @classmethod
    def preset(cls, name: str, **overrides) -> "ARConfig":
        depth, width, heads = AR_PRESETS[name]
        return cls(**{"depth": depth, "width": width, "heads": heads, **overrides})

    @property
    def null_class(self) -> int:
        return self.num_classes


def block_ids(schedule) -> np.ndarray:
    schedule = ScaleSchedule.of(schedule)
    return np.concatenate([np.full(schedule.tokens(k), k) for k in range(len(schedule))])


def build_block_causal_mask(schedule) -> np.ndarray:
    """``mask[q, k]`` is True iff block(k) <= block(q)."""
    b = block_ids(schedule)
    return b[None, :] <= b[:, None]


def to_tokens(x) -> np.ndarray:
    """``[B, c, h, w]`` -> ``[B, h*w, c]``."""
    b, c, h, w = x.shape
    return np.ascontiguousarray(np.asarray(x).reshape(b, c, h * w).transpose(0, 2, 1))


def semantics_map(sem: Tensor | np.ndarray, size: int) -> np.ndarray:
    data = sem.data if isinstance(sem, Tensor) else sem
    b, n, w = data.shape
    return data.transpose(0, 2, 1).reshape(b, w, size, size)


class KVCache:
    """Per-layer keys/values accumulated over completed scales.

    Single consumer: one cache per generation, never shared across threads.
    """

    def __init__(self, num_layers: int):
        self.keys: list[np.ndarray | None] = [None] * num_layers
        self.values: list[np.ndarray | None] = [None] * num_layers
        self.step = 0

    @property
    def filled_length(self) -> int:
        return 0 if self.keys[0] is None else self.keys[0].shape[-2]

    def append(self, layer: int, k: np.ndarray, v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        if self.keys[layer] is None:
            self.keys[layer], self.values[layer] = k, v
        else:
            self.keys[layer] = np.concatenate([self.keys[layer], k], axis=-2)
            self.values[layer] = np.concatenate([self.values[layer], v], axis=-2)
        return self.keys[layer], self.values[layer]


class ARBlock(Module):
    def __init__(self, width, heads, mlp_ratio, rng, dtype):
        self.ln1 = LayerNorm(width, dtype)
        self.attn = MultiHeadAttention(width, heads, rng, dtype)
        self.ln2 = LayerNorm(width, dtype)
        self.mlp = MLP(width, int(width * mlp_ratio), rng, dtype)

    def forward(self, x: Tensor, mask=None, cache: KVCache | None = None, layer: int = 0) -> Tensor:
        q, k, v = self.attn.project_qkv(self.ln1(x))
        if cache is not None:
            kd, vd = cache.append(layer, k.data, v.data)
            k, v = Tensor(kd), Tensor(vd)
        x = x + self.attn.merge(nx.softmax_attention(q, k, v, mask))
        return x + self.mlp(self.ln2(x))


class ARTransformer(Module):
    def __init__(self, cfg: ARConfig, rng: np.random.Generator, dtype=np.float32):
        self.cfg = cfg
        self.schedule = ScaleSchedule.of(cfg.schedule)
        self.dtype = np.dtype(dtype)
        w = cfg.width
        self.class_emb = parameter(rng.normal(0, 0.02, (cfg.num_classes + 1, w)), dtype)
        self.in_proj = Linear(cfg.latent_channels, w, rng, dtype)
        self.scale_emb = parameter(rng.normal(0, 0.02, (len(self.schedule), w)), dtype)
        for k in range(len(self.schedule)):
            setattr(self, f"pos_{k}", parameter(rng.normal(0, 0.02, (self.schedule.tokens(k), w)), dtype))
        self.blocks = [ARBlock(w, cfg.heads, cfg.mlp_ratio, rng, dtype) for _ in range(cfg.depth)]
        self.norm_out = LayerNorm(w, dtype)
        self.head = Linear(w, w, rng, dtype)
        self._mask = build_block_causal_mask(self.schedule)

    def _pos(self, k: int) -> Tensor:
        return getattr(self, f"pos_{k}") + self.scale_emb[k]

    def _check_classes(self, class_ids) -> np.ndarray:
        ids = np.asarray(class_ids, dtype=np.int64).reshape(-1)
        if ids.size and (ids.min() < 0 or ids.max() > self.cfg.num_classes):
            raise ValueError(f"class id out of range [0, {self.cfg.num_classes}]: {ids.min()}..{ids.max()}")
        return ids

    def _class_block(self, ids: np.ndarray) -> Tensor:
        c = nx.embedding(self.class_emb, ids).reshape(len(ids), 1, self.cfg.width)
        return c + self._pos(0)

    def _scale_block(self, prev: np.ndarray, k: int) -> Tensor:
        """Input block k: previous scale upsampled to scale k, projected to width."""
        x = resample(np.asarray(prev, dtype=self.dtype), self.schedule[k], self.cfg.resample)
        return self.in_proj(Tensor(to_tokens(x))) + self._pos(k)

    def _run(self, x: Tensor, mask=None, cache=None) -> Tensor:
        for i, blk in enumerate(self.blocks):
            x = blk(x, mask, cache, i)
        return self.head(self.norm_out(x))

    def training_forward(self, class_ids, scales) -> list[Tensor]:
        """Teacher-forced semantics for every scale from ground-truth ``scales`` (coarsest first)."""
        ids = self._check_classes(class_ids)
        n = len(self.schedule)
        if len(scales) != n or any(s.shape[-1] != size for s, size in zip(scales, self.schedule)):
            got = [s.shape[-1] for s in scales]
            raise ValueError(f"pyramid sizes {got} do not match schedule {list(self.schedule)}")
        parts = [self._class_block(ids)]
        parts += [self._scale_block(scales[k - 1], k) for k in range(1, n)]
        out = self._run(nx.concat(parts, axis=1), self._mask)
        return nx.split(out, [self.schedule.tokens(k) for k in range(n)], axis=1)

    def new_cache(self) -> KVCache:
        return KVCache(len(self.blocks))

    def prefill_step(self, cache: KVCache, class_ids=None, prev_scale=None) -> Tensor:
        """Process the next input block against the cache; return that scale's semantics.

        Step 0 takes ``class_ids``; step k >= 1 takes the generated scale
        ``s^{k-1}`` (``[B, c, h, w]`` at scale k-1 resolution).
        """
        k = cache.step
        if k >= len(self.schedule):
            raise RuntimeError(f"cache already holds all {len(self.schedule)} scales")
        expected = sum(self.schedule.tokens(j) for j in range(k))
        if cache.filled_length != expected:
            raise RuntimeError(f"cache holds {cache.filled_length} tokens, step {k} expects {expected}")
        with nx.no_grad():
            if k == 0:
                if class_ids is None:
                    raise ValueError("step 0 needs class ids")
                x = self._class_block(self._check_classes(class_ids))
            else:
                if prev_scale is None or prev_scale.shape[-1] != self.schedule[k - 1]:
                    got = None if prev_scale is None else prev_scale.shape
                    raise ValueError(f"step {k} needs scale of size {self.schedule[k - 1]}, got {got}")
                x = self._scale_block(prev_scale, k)
            out = self._run(x, None, cache)
        cache.step += 1
        return out


def with_schedule(cfg: ARConfig, schedule) -> ARConfig:
    return replace(cfg, schedule=tuple(schedule))


__all__ = [
    "AR_PRESETS", "ARConfig", "ARTransformer", "KVCache", "block_ids", "build_block_causal_mask",
    "semantics_map", "to_tokens", "with_schedule",
]
