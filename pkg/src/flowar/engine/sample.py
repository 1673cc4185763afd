"""Scale-by-scale generation with KV-cached semantics, Euler integration and CFG."""

from __future__ import annotations

import numpy as np

from .. import numerics as nx
from ..flow_head import ddim_step
from .config import SampleConfig
from .model import FlowARModel


def guided_velocity(model: FlowARModel, x: np.ndarray, sem_cond, sem_null, t: float, cfg_scale: float) -> np.ndarray:
    """``v_null + w (v_cond - v_null)``; with ``w == 1`` only the conditional pass runs."""
    b = x.shape[0]
    t_b = np.full(b, t)
    if sem_null is None or cfg_scale == 1.0:
        return model.head(x, sem_cond, t_b).data
    both = model.head(np.concatenate([x, x]), nx.concat([sem_cond, sem_null], axis=0), np.full(2 * b, t)).data
    v_cond, v_null = both[:b], both[b:]
    return v_null + cfg_scale * (v_cond - v_null)


def integrate_scale(model: FlowARModel, f0: np.ndarray, sem_cond, sem_null, steps: int,
                    cfg_scale: float) -> np.ndarray:
    """Carry noise ``f0`` to a scale latent along the learned field."""
    x = f0
    if model.config.flow.target_mode == "flow_velocity":
        dt = 1.0 / steps
        for k in range(steps):
            x = x + dt * guided_velocity(model, x, sem_cond, sem_null, k * dt, cfg_scale)
        return x
    taus = np.linspace(1.0, 0.0, steps + 1)
    for k in range(steps):
        eps = guided_velocity(model, x, sem_cond, sem_null, float(taus[k]), cfg_scale)
        x = ddim_step(x, eps, float(taus[k]), float(taus[k + 1]))
    return x


def generate_latents(model: FlowARModel, class_ids, cfg: SampleConfig,
                     rng: np.random.Generator | None = None) -> list[np.ndarray]:
    """Generated normalized latents for every scale, coarsest first."""
    problems = cfg.problems()
    if problems:
        raise ValueError("; ".join(problems))
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    ids = np.asarray(class_ids, dtype=np.int64).reshape(-1)
    b = len(ids)
    ar = model.ar
    guided = cfg.cfg_scale != 1.0
    cache = ar.new_cache()
    if guided:
        ids = np.concatenate([ids, np.full(b, model.config.ar.null_class)])
    c = model.config.ar.latent_channels
    out = []
    prev = None
    with nx.no_grad():
        for k, size in enumerate(model.config.schedule):
            if k == 0:
                sem = ar.prefill_step(cache, class_ids=ids)
            else:
                sem = ar.prefill_step(cache, prev_scale=np.concatenate([prev, prev]) if guided else prev)
            sem_cond, sem_null = (sem[:b], sem[b:]) if guided else (sem, None)
            f0 = rng.standard_normal((b, c, size, size)).astype(model.dtype)
            prev = integrate_scale(model, f0, sem_cond, sem_null, cfg.euler_steps, cfg.cfg_scale)
            out.append(prev)
    return out


def sample(model: FlowARModel, class_ids, cfg: SampleConfig, rng: np.random.Generator | None = None,
           batch_size: int = 64) -> np.ndarray:
    """Decode generated finest latents to images ``[B, 3, H, W]`` (unclipped)."""
    ids = np.asarray(class_ids, dtype=np.int64).reshape(-1)
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    images = []
    for start in range(0, len(ids), batch_size):
        latents = generate_latents(model, ids[start:start + batch_size], cfg, rng)
        images.append(model.decode(latents[-1]))
    return np.concatenate(images) if images else np.zeros((0, 3, model.config.image_size, model.config.image_size))
