"""Scale-wise flow-matching head conditioned on AR semantics.

One parameter set serves every scale. The head sees the ``h*w`` tokens of
a single scale; how the semantics enter is set by ``injection_mode``:

- ``spatial_adaln``: per-token scale/shift/gate from an MLP over
  (semantics + time embedding)
- ``adaln``: the same, from the spatially averaged semantics
- ``addition`` / ``channel_concat`` / ``seq_concat`` / ``cross_attention``:
  semantics enter the token stream; blocks are modulated by time only

``granularity="per_token"`` restricts every attention to the token itself,
so each output token depends only on its own input token.

Time convention: ``F_t = t * s + (1 - t) * F_0`` with ``t = 0`` pure noise
and ``t = 1`` data. The diffusion variant uses a noise level ``tau`` with
``tau = 1`` pure noise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import numerics as nx
from .ar_transformer import to_tokens
from .numerics import Tensor
from .numerics.nn import Linear, MLP, Module, MultiHeadAttention

INJECTION_MODES = ("spatial_adaln", "adaln", "addition", "cross_attention", "seq_concat", "channel_concat")
TARGET_MODES = ("flow_velocity", "diffusion_epsilon")
GRANULARITIES = ("per_scale", "per_token")

# depth, width, heads
FLOW_PRESETS = {
    "tiny": (2, 128, 4),
    "S": (2, 1024, 16),
    "B": (6, 1024, 16),
    "L": (12, 1024, 16),
    "H": (18, 1536, 24),
}


@dataclass
class FlowConfig:
    depth: int = 2
    width: int = 128
    heads: int = 4
    mlp_ratio: float = 4.0
    injection_mode: str = "spatial_adaln"
    target_mode: str = "flow_velocity"
    granularity: str = "per_scale"
    latent_channels: int = 48
    cond_width: int = 128
    freq_dim: int = 64
    loss_reduction: str = "mean"

    def __post_init__(self):
        for name, allowed in (("injection_mode", INJECTION_MODES), ("target_mode", TARGET_MODES),
                              ("granularity", GRANULARITIES), ("loss_reduction", ("mean", "sum"))):
            if getattr(self, name) not in allowed:
                raise ValueError(f"{name}={getattr(self, name)!r} not in {allowed}")
        if self.width % self.heads:
            raise ValueError(f"width {self.width} not divisible by heads {self.heads}")

    @classmethod
    def preset(cls, name: str, **overrides) -> "FlowConfig":
        depth, width, heads = FLOW_PRESETS[name]
        return cls(**{"depth": depth, "width": width, "heads": heads, **overrides})


# --- interpolant and targets ------------------------------------------------

def _bt(t, like: np.ndarray) -> np.ndarray:
    """Broadcast a scalar or per-sample ``t`` over the trailing axes of ``like``."""
    t = np.asarray(t, dtype=like.dtype)
    if t.ndim == 0:
        return t
    return t.reshape(t.shape + (1,) * (like.ndim - t.ndim))


def _check_t(t):
    t = np.asarray(t)
    if np.any(t < 0) or np.any(t > 1) or not np.all(np.isfinite(t)):
        raise ValueError(f"time must lie in [0, 1], got range {t.min()}..{t.max()}")


def interpolate(s: np.ndarray, f0: np.ndarray, t) -> np.ndarray:
    """``t * s + (1 - t) * f0``."""
    if np.shape(s) != np.shape(f0):
        raise ValueError(f"shape mismatch: {np.shape(s)} vs {np.shape(f0)}")
    _check_t(t)
    s = np.asarray(s)
    tb = _bt(t, s)
    return tb * s + (1 - tb) * np.asarray(f0)


def velocity_target(s: np.ndarray, f0: np.ndarray) -> np.ndarray:
    if np.shape(s) != np.shape(f0):
        raise ValueError(f"shape mismatch: {np.shape(s)} vs {np.shape(f0)}")
    return np.asarray(s) - np.asarray(f0)


def cosine_alpha_sigma(tau) -> tuple[np.ndarray, np.ndarray]:
    """Signal/noise coefficients of the cosine schedule; exactly (0, 1) at ``tau = 1``."""
    tau = np.asarray(tau, dtype=np.float64)
    alpha = np.where(tau >= 1.0, 0.0, np.cos(0.5 * np.pi * tau))
    sigma = np.where(tau >= 1.0, 1.0, np.sin(0.5 * np.pi * tau))
    return alpha, sigma


def diffuse(s: np.ndarray, eps: np.ndarray, tau) -> np.ndarray:
    _check_t(tau)
    a, sg = cosine_alpha_sigma(tau)
    s = np.asarray(s)
    return _bt(a, s) * s + _bt(sg, s) * np.asarray(eps)


def ddim_step(x: np.ndarray, eps_hat: np.ndarray, tau: float, tau_next: float,
              alpha_floor: float = 1e-2, clip: float = 5.0) -> np.ndarray:
    """Deterministic DDIM move from noise level ``tau`` to ``tau_next``.

    The data estimate divides by alpha, which vanishes at ``tau = 1``; alpha
    is floored and the estimate clipped to keep the first step bounded.
    """
    a, sg = cosine_alpha_sigma(tau)
    an, sn = cosine_alpha_sigma(tau_next)
    x0 = np.clip((x - sg * eps_hat) / max(float(a), alpha_floor), -clip, clip)
    return (an * x0 + sn * eps_hat).astype(x.dtype)


# --- network ------------------------------------------------------------------

def timestep_features(t, dim: int, dtype=np.float32, max_period: float = 10000.0) -> np.ndarray:
    """Sinusoidal features of ``1000 * t``; shape ``[B, dim]``."""
    t = np.asarray(t, dtype=np.float64).reshape(-1) * 1000.0
    half = dim // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half) / half)
    args = t[:, None] * freqs[None]
    return np.concatenate([np.cos(args), np.sin(args)], axis=-1).astype(dtype)


class TimestepEmbedder(Module):
    def __init__(self, freq_dim: int, width: int, rng, dtype):
        self.freq_dim = freq_dim
        self.fc1 = Linear(freq_dim, width, rng, dtype)
        self.fc2 = Linear(width, width, rng, dtype)

    def forward(self, t) -> Tensor:
        f = Tensor(timestep_features(t, self.freq_dim, self.fc1.weight.dtype))
        return self.fc2(nx.silu(self.fc1(f)))


def modulate(x: Tensor, shift: Tensor, scale: Tensor) -> Tensor:
    """``gamma * LN(x) + beta`` with ``gamma = 1 + scale`` so zero modulation is the identity."""
    return nx.layernorm(x) * (scale + 1.0) + shift


class FlowBlock(Module):
    """Transformer block whose six modulation vectors come from the condition.

    With a per-token condition ``[B, N, cw]`` every position gets its own
    shift/scale/gate (Spatial-adaLN); with ``[B, 1, cw]`` they are shared.
    """

    def __init__(self, width, heads, mlp_ratio, cond_width, rng, dtype, cross: bool = False):
        self.width = width
        self.modulation = Linear(cond_width, 6 * width, rng, dtype, zero=True)
        self.attn = MultiHeadAttention(width, heads, rng, dtype)
        self.cross = MultiHeadAttention(width, heads, rng, dtype, kv_dim=cond_width, zero_out=True) if cross else None
        self.mlp = MLP(width, int(width * mlp_ratio), rng, dtype)

    def modulation_params(self, cond: Tensor) -> list[Tensor]:
        """(shift1, scale1, gate1, shift2, scale2, gate2)."""
        return nx.split(self.modulation(nx.silu(cond)), [self.width] * 6, axis=-1)

    def forward(self, x: Tensor, cond: Tensor, mask=None, context: Tensor | None = None,
                cross_mask=None) -> Tensor:
        shift1, scale1, gate1, shift2, scale2, gate2 = self.modulation_params(cond)
        x = x + self.attn(modulate(x, shift1, scale1), mask) * gate1
        if self.cross is not None:
            x = x + self.cross(nx.layernorm(x), cross_mask, context=context)
        return x + self.mlp(modulate(x, shift2, scale2)) * gate2


class FlowHead(Module):
    def __init__(self, cfg: FlowConfig, rng: np.random.Generator, dtype=np.float32):
        self.cfg = cfg
        mode = cfg.injection_mode
        c, w, cw = cfg.latent_channels, cfg.width, cfg.cond_width
        self.time_embed = TimestepEmbedder(cfg.freq_dim, cw, rng, dtype)
        self.in_proj = Linear(c + cw if mode == "channel_concat" else c, w, rng, dtype)
        if mode in ("addition", "seq_concat"):
            self.sem_proj = Linear(cw, w, rng, dtype)
        self.blocks = [FlowBlock(w, cfg.heads, cfg.mlp_ratio, cw, rng, dtype, cross=mode == "cross_attention")
                       for _ in range(cfg.depth)]
        self.final_modulation = Linear(cw, 2 * w, rng, dtype, zero=True)
        self.out_proj = Linear(w, c, rng, dtype, zero=True)
        self.last_seq_len = None

    def condition(self, semantics: Tensor, t) -> Tensor:
        temb = self.time_embed(t)
        temb = temb.reshape(temb.shape[0], 1, temb.shape[1])
        mode = self.cfg.injection_mode
        if mode == "spatial_adaln":
            return semantics + temb
        if mode == "adaln":
            return semantics.mean(axis=1, keepdims=True) + temb
        return temb

    def _masks(self, n: int):
        if self.cfg.granularity == "per_scale":
            return None, None
        eye = np.eye(n, dtype=bool)
        if self.cfg.injection_mode == "seq_concat":
            return np.tile(eye, (2, 2)), None
        return eye, eye

    def forward(self, f_t, semantics: Tensor, t) -> Tensor:
        """Predict velocity (or noise) for ``f_t`` of shape ``[B, c, h, w]``."""
        f_t = f_t.data if isinstance(f_t, Tensor) else np.asarray(f_t)
        b, c, h, w = f_t.shape
        n = h * w
        if semantics.shape[:2] != (b, n):
            raise ValueError(f"semantics shape {semantics.shape} does not match latent tokens ({b}, {n})")
        x_tok = Tensor(to_tokens(f_t.astype(self.in_proj.weight.dtype, copy=False)))
        return self.forward_tokens(x_tok, semantics, t).transpose(0, 2, 1).reshape(b, c, h, w)

    def forward_tokens(self, x_tok: Tensor, semantics: Tensor, t) -> Tensor:
        """Token-major core: ``x_tok[B, N, c]`` -> prediction ``[B, N, c]``."""
        b, n, _ = x_tok.shape
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (b,))
        mode = self.cfg.injection_mode
        cond = self.condition(semantics, t)
        context = None
        if mode == "channel_concat":
            x = self.in_proj(nx.concat([x_tok, semantics], axis=-1))
        elif mode == "addition":
            x = self.in_proj(x_tok) + self.sem_proj(semantics)
        elif mode == "seq_concat":
            x = nx.concat([self.sem_proj(semantics), self.in_proj(x_tok)], axis=1)
        else:
            x = self.in_proj(x_tok)
            if mode == "cross_attention":
                context = semantics
        mask, cross_mask = self._masks(n)
        self.last_seq_len = x.shape[1]
        for blk in self.blocks:
            x = blk(x, cond, mask, context, cross_mask)
        if mode == "seq_concat":
            x = nx.take_slice(x, (slice(None), slice(n, None)))
        shift, scale = nx.split(self.final_modulation(nx.silu(cond)), [self.cfg.width] * 2, axis=-1)
        return self.out_proj(modulate(x, shift, scale))


# --- objective ----------------------------------------------------------------

Predictor = Callable[[np.ndarray, Tensor, np.ndarray], Tensor]


def sample_noise(rng: np.random.Generator, scales: Sequence[np.ndarray]) -> tuple[list, list]:
    """Independent ``t ~ U[0, 1]`` per sample and ``F_0 ~ N(0, 1)`` for every scale."""
    ts, f0s = [], []
    for s in scales:
        ts.append(rng.random(s.shape[0]))
        f0s.append(rng.standard_normal(s.shape).astype(s.dtype))
    return ts, f0s


def noised_input_and_target(s: np.ndarray, f0: np.ndarray, t, target_mode: str):
    if target_mode == "flow_velocity":
        return interpolate(s, f0, t), velocity_target(s, f0)
    # diffusion: t is the noise level, f0 the injected noise
    return diffuse(s, f0, t), np.asarray(f0)


def fm_loss(predictor: Predictor, scales: Sequence[np.ndarray], semantics: Sequence[Tensor],
            ts: Sequence, f0s: Sequence[np.ndarray], target_mode: str = "flow_velocity",
            reduction: str = "mean") -> Tensor:
    """Sum over scales of the squared prediction error.

    ``reduction="mean"`` averages within a scale before summing, weighting
    scales equally; ``"sum"`` sums every element.
    """
    total = None
    for s, sem, t, f0 in zip(scales, semantics, ts, f0s):
        x, target = noised_input_and_target(s, f0, t, target_mode)
        pred = predictor(x, sem, t)
        term = nx.mse(pred, Tensor(target.astype(pred.dtype, copy=False)))
        if reduction == "sum":
            term = term * float(target.size)
        total = term if total is None else total + term
    return total
