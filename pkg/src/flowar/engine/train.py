"""Training loop: label dropout, flow-matching loss, clipping, AdamW, warmup + cosine LR.

Randomness is keyed by ``(seed, step)`` for noise/dropout and
``(seed, epoch)`` for data order, so a run resumed from a checkpoint
follows the same trajectory as an uninterrupted one.
"""

from __future__ import annotations

from dataclasses import asdict
from pathlib import Path

import numpy as np

from ..flow_head import sample_noise
from ..numerics import NonFiniteError, backward
from ..numerics.optim import AdamW, clip_grad_norm, cosine_lr
from .checkpoint import read_checkpoint, write_checkpoint
from .config import ModelConfig, TrainConfig
from .model import FlowARModel


class TrainingDiverged(NonFiniteError):
    def __init__(self, message: str, diagnostics: dict):
        super().__init__(message)
        self.diagnostics = diagnostics


class Trainer:
    def __init__(self, model: FlowARModel, cfg: TrainConfig, images: np.ndarray, labels: np.ndarray,
                 prepare: bool = True):
        problems = cfg.problems()
        if problems:
            raise ValueError("invalid train config: " + "; ".join(problems))
        self.model = model
        self.cfg = cfg
        self.labels = np.asarray(labels, dtype=np.int64)
        self.images = images
        if prepare:
            model.prepare_codec(images)
        self.scales = model.pyramid(images)
        n = len(self.labels)
        self.batch_size = min(cfg.batch_size, n)
        self.steps_per_epoch, self.warmup_steps, self.total_steps = cfg.steps(n)
        self.optimizer = AdamW(list(model.named_parameters()), lr=cfg.peak_lr,
                               betas=(cfg.beta1, cfg.beta2), weight_decay=cfg.weight_decay)
        self.step = 0
        self._perm_epoch = None
        self._perm = None

    def lr_at(self, step: int) -> float:
        return cosine_lr(step, self.total_steps, self.warmup_steps, self.cfg.peak_lr, self.cfg.min_lr)

    def batch_indices(self, step: int) -> np.ndarray:
        epoch, pos = divmod(step, self.steps_per_epoch)
        if self._perm_epoch != epoch:
            self._perm = np.random.default_rng([self.cfg.seed, 1, epoch]).permutation(len(self.labels))
            self._perm_epoch = epoch
        return self._perm[pos * self.batch_size:(pos + 1) * self.batch_size]

    def batch(self, step: int):
        """``(labels, scales, ts, f0s)`` for ``step``; labels already carry the null-class dropout."""
        idx = self.batch_indices(step)
        rng = np.random.default_rng([self.cfg.seed, 2, step])
        labels = self.labels[idx].copy()
        labels[rng.random(len(labels)) < self.cfg.label_dropout] = self.model.config.ar.null_class
        scales = [s[idx] for s in self.scales]
        ts, f0s = sample_noise(rng, scales)
        return labels, scales, ts, f0s

    def train_step(self) -> dict:
        model, cfg = self.model, self.cfg
        loss = model.loss(*self.batch(self.step))
        lr = self.lr_at(self.step)
        model.zero_grad()
        loss_value = float(loss.data)
        if not np.isfinite(loss_value):
            raise self._diverged("non-finite loss", loss_value, lr)
        backward(loss)
        params = model.parameters()
        grad_norm = clip_grad_norm(params, cfg.grad_clip_norm)
        if not np.isfinite(grad_norm):
            raise self._diverged("non-finite gradient norm", loss_value, lr)
        self.optimizer.step(lr)
        record = {"step": self.step, "loss": loss_value, "lr": lr, "grad_norm": grad_norm}
        self.step += 1
        return record

    def _diverged(self, why: str, loss: float, lr: float) -> TrainingDiverged:
        norms = {n: (float(np.sqrt(np.sum(p.grad.astype(np.float64) ** 2))) if p.grad is not None else None)
                 for n, p in self.model.named_parameters()}
        diag = {"step": self.step, "lr": lr, "loss": loss, "grad_norms": norms}
        return TrainingDiverged(f"{why} at step {self.step} (lr={lr:g}, loss={loss!r})", diag)

    def run(self, steps: int | None = None, callback=None) -> list[dict]:
        """Train until ``steps`` more steps are done (default: to ``total_steps``)."""
        end = self.total_steps if steps is None else self.step + steps
        history = []
        while self.step < end:
            rec = self.train_step()
            history.append(rec)
            if callback is not None:
                callback(rec)
        return history

    # --- persistence ------------------------------------------------------------
    def save(self, path, extra_config: dict | None = None) -> None:
        arrays = dict(self.model.state_arrays())
        arrays.update({f"optim/{k}": v for k, v in self.optimizer.state().items()})
        arrays["meta/step"] = np.asarray([self.step], dtype=np.int64)
        config = {"model": model_config_dict(self.model.config), "train": asdict(self.cfg), **(extra_config or {})}
        write_checkpoint(path, config, arrays)

    def load(self, path) -> None:
        _, arrays = read_checkpoint(path)
        self.model.load_state_arrays(arrays)
        self.optimizer.load_state({k[len("optim/"):]: v for k, v in arrays.items() if k.startswith("optim/")})
        self.step = int(arrays["meta/step"][0])
        # latents depend on the restored normalizer and codec
        self.scales = self.model.pyramid(self.images)
        self._perm_epoch = None


def model_config_dict(cfg: ModelConfig) -> dict:
    d = asdict(cfg)
    d["schedule"] = list(cfg.schedule)
    d["ar"]["schedule"] = list(cfg.ar.schedule)
    return d


def model_config_from_dict(d: dict) -> ModelConfig:
    from ..ar_transformer import ARConfig
    from ..flow_head import FlowConfig
    from .config import CodecConfig

    d = dict(d)
    return ModelConfig(**{**d, "schedule": tuple(d["schedule"]), "codec": CodecConfig(**d["codec"]),
                          "ar": ARConfig(**d["ar"]), "flow": FlowConfig(**d["flow"])})


def save_model(path, model: FlowARModel, extra_config: dict | None = None) -> None:
    write_checkpoint(path, {"model": model_config_dict(model.config), **(extra_config or {})},
                     model.state_arrays())


def load_model(path) -> FlowARModel:
    if not Path(path).exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    config, arrays = read_checkpoint(path)
    model = FlowARModel(model_config_from_dict(config["model"]))
    model.load_state_arrays(arrays)
    return model
