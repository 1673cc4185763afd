"""Command bodies, callable without argparse (the ablation driver and tests use them directly)."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from ..engine import SampleConfig, Trainer, evaluate, load_model, sample
from ..engine.checkpoint import read_checkpoint
from ..engine.data import GENERATOR_VERSION, class_rule, classify_by_hue, make_dataset
from ..engine.model import FlowARModel
from ..engine.train import TrainingDiverged, model_config_dict
from . import config as run_config
from .ppm import contact_sheet, from_uint8, read_ppm, to_uint8, write_ppm, encode_ppm

RESOLVED_NAME = "config.resolved"
CHECKPOINT_NAME = "checkpoint.flowar"
METRICS_NAME = "metrics.log"
MANIFEST_NAME = "manifest.txt"


def format_metrics(rec: dict) -> str:
    """The frozen metrics-log record: ``step=<int> loss=<%.6e> lr=<%.6e> grad_norm=<%.6e>``."""
    return f"step={rec['step']} loss={rec['loss']:.6e} lr={rec['lr']:.6e} grad_norm={rec['grad_norm']:.6e}"


def parse_metrics(line: str) -> dict:
    fields_ = dict(item.split("=", 1) for item in line.split())
    return {"step": int(fields_["step"]), "loss": float(fields_["loss"]), "lr": float(fields_["lr"]),
            "grad_norm": float(fields_["grad_norm"])}


def write_resolved(out_dir, cfg: run_config.RunConfig, extra: dict | None = None) -> Path:
    """Write the fully resolved config (plus any command arguments) into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    text = run_config.dump(cfg)
    if extra:
        text += "".join(f"# {k} = {v}\n" for k, v in extra.items())
    path = out / RESOLVED_NAME
    path.write_text(text, encoding="utf-8")
    return path


# --- dataset ----------------------------------------------------------------------
def synth(out_dir, classes: int, count: int, size: int, seed: int) -> dict:
    """Render the procedural dataset as PPM files plus a manifest; returns the manifest fields."""
    if classes < 1 or count < 1 or size < 4:
        raise run_config.ConfigError([f"need classes >= 1, count >= 1, size >= 4; got {classes}, {count}, {size}"])
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    images, labels = make_dataset(count, classes, size, seed)
    pixels = [to_uint8(img) for img in images]
    quantized = np.stack([from_uint8(p) for p in pixels])
    matches = int(np.sum(classify_by_hue(quantized, classes) == labels))
    lines = [f"generator_version = {GENERATOR_VERSION}", f"classes = {classes}", f"count = {count}",
             f"size = {size}", f"seed = {seed}"]
    for k in range(classes):
        shape, hue = class_rule(k, classes)
        lines.append(f"class.{k} = shape={shape} hue={hue:g}")
    lines.append(f"rule_check = {matches}/{count}")
    for i, (p, label) in enumerate(zip(pixels, labels)):
        name = f"{i:05d}.ppm"
        data = encode_ppm(p)
        (out / name).write_bytes(data)
        lines.append(f"file.{i:05d} = {name} label={int(label)} sha256={hashlib.sha256(data).hexdigest()}")
    body = "\n".join(lines) + "\n"
    digest = hashlib.sha256(body.encode("utf-8")).hexdigest()
    (out / MANIFEST_NAME).write_text(body + f"digest = {digest}\n", encoding="utf-8")
    return {"count": count, "classes": classes, "rule_matches": matches, "digest": digest}


def read_manifest(data_dir) -> dict[str, str]:
    path = Path(data_dir) / MANIFEST_NAME
    out = {}
    for line in path.read_text(encoding="utf-8").splitlines():
        if " = " in line:
            k, v = line.split(" = ", 1)
            out[k] = v
    return out


def load_dataset(cfg: run_config.RunConfig) -> tuple[np.ndarray, np.ndarray]:
    """Training images: PPMs from ``data.dir`` if set, otherwise rendered in memory."""
    m = cfg.model
    if not cfg.data.dir:
        return make_dataset(cfg.data.count, m.num_classes, m.image_size, cfg.data.seed)
    manifest = read_manifest(cfg.data.dir)
    problems = []
    if int(manifest["size"]) != m.image_size:
        problems.append(f"dataset size {manifest['size']} != model.image_size {m.image_size}")
    if int(manifest["classes"]) != m.num_classes:
        problems.append(f"dataset classes {manifest['classes']} != model.num_classes {m.num_classes}")
    if problems:
        raise run_config.ConfigError(problems)
    images, labels = [], []
    for key in sorted(k for k in manifest if k.startswith("file.")):
        name, label = manifest[key].split()[:2]
        images.append(from_uint8(read_ppm(Path(cfg.data.dir) / name)))
        labels.append(int(label.split("=", 1)[1]))
    return np.stack(images), np.asarray(labels, dtype=np.int64)


def eval_dataset(cfg: run_config.RunConfig) -> tuple[np.ndarray, np.ndarray]:
    m = cfg.model
    return make_dataset(cfg.data.eval_count, m.num_classes, m.image_size, cfg.data.eval_seed)


# --- training -----------------------------------------------------------------------
def train_run(cfg: run_config.RunConfig, resume=None, max_steps: int | None = None, echo=None) -> dict:
    """Train per ``cfg`` into ``cfg.out_dir``; returns a summary dict.

    ``max_steps`` stops early without changing the LR schedule, which is
    how an interrupted run is simulated. The single checkpoint file is
    rewritten every ``train.checkpoint_every`` steps and at the end.
    """
    out = Path(cfg.out_dir)
    write_resolved(out, cfg, {"resume": resume} if resume else None)
    images, labels = load_dataset(cfg)
    model = FlowARModel(cfg.model)
    trainer = Trainer(model, cfg.train, images, labels)
    if resume is not None:
        stored, _ = read_checkpoint(resume)
        if stored.get("model") != model_config_dict(model.config):
            raise run_config.ConfigError([f"checkpoint {resume} was trained with a different model config"])
        trainer.load(resume)
    end = trainer.total_steps if max_steps is None else min(max_steps, trainer.total_steps)
    ckpt = out / CHECKPOINT_NAME
    extra = {"run": run_config.dump(cfg)}
    history = []
    with open(out / METRICS_NAME, "a" if resume is not None else "w", encoding="utf-8") as log:
        try:
            while trainer.step < end:
                rec = trainer.train_step()
                history.append(rec)
                if rec["step"] % cfg.train.log_every == 0 or trainer.step == end:
                    line = format_metrics(rec)
                    log.write(line + "\n")
                    log.flush()
                    if echo:
                        echo(line)
                if trainer.step % cfg.train.checkpoint_every == 0 and trainer.step < end:
                    trainer.save(ckpt, extra)
        except TrainingDiverged as exc:
            (out / "diverged.json").write_text(json.dumps(exc.diagnostics, indent=2, default=float), encoding="utf-8")
            raise
    trainer.save(ckpt, extra)
    return {"steps": trainer.step, "total_steps": trainer.total_steps, "checkpoint": str(ckpt),
            "first_loss": history[0]["loss"] if history else None,
            "last_loss": history[-1]["loss"] if history else None, "history": history}


# --- sampling and evaluation ---------------------------------------------------------
def run_config_from_checkpoint(path) -> run_config.RunConfig:
    """The run config stored in a checkpoint, or defaults around its model config."""
    stored, _ = read_checkpoint(path)
    if "run" in stored:
        return run_config.parse_text(stored["run"])
    cfg = run_config.RunConfig()
    cfg.model = load_model(path).config
    return cfg


def _class_ids(class_arg, n: int, num_classes: int) -> np.ndarray:
    if class_arg in (None, "all"):
        return np.arange(n) % num_classes
    cid = int(class_arg)
    if not 0 <= cid < num_classes:
        raise run_config.ConfigError([f"--class must be in [0, {num_classes}) or 'all', got {cid}"])
    return np.full(n, cid)


def sample_run(checkpoint, out_dir, n: int = 16, class_id="all", cfg_scale: float = 1.0, steps: int = 25,
               seed: int = 0) -> list[Path]:
    """Write ``n`` PPM samples and an 8-column contact sheet; returns the sample paths."""
    if not Path(checkpoint).exists():
        raise FileNotFoundError(f"checkpoint not found: {checkpoint}")
    model = load_model(checkpoint)
    cfg = run_config_from_checkpoint(checkpoint)
    scfg = SampleConfig(euler_steps=steps, cfg_scale=cfg_scale, seed=seed,
                        class_id=-1 if class_id in (None, "all") else int(class_id))
    problems = scfg.problems() + ([] if n >= 1 else [f"--n must be >= 1, got {n}"])
    if problems:
        raise run_config.ConfigError(problems)
    ids = _class_ids(class_id, n, model.config.num_classes)
    cfg.sample = scfg
    cfg.out_dir = str(out_dir)
    write_resolved(out_dir, cfg, {"checkpoint": checkpoint, "n": n, "class": class_id})
    images = sample(model, ids, scfg, np.random.default_rng(seed))
    paths = []
    for i, img in enumerate(images):
        path = Path(out_dir) / f"sample_{i:04d}_c{int(ids[i])}.ppm"
        write_ppm(path, img)
        paths.append(path)
    write_ppm(Path(out_dir) / "sheet.ppm", contact_sheet(images, columns=8))
    return paths


def evaluate_run(checkpoint, out_dir=None, n: int = 256, cfg_scale: float = 1.0, steps: int = 25,
                 seed: int = 0) -> dict:
    if not Path(checkpoint).exists():
        raise FileNotFoundError(f"checkpoint not found: {checkpoint}")
    model = load_model(checkpoint)
    cfg = run_config_from_checkpoint(checkpoint)
    scfg = SampleConfig(euler_steps=steps, cfg_scale=cfg_scale, seed=seed)
    problems = scfg.problems() + ([] if n >= 1 else [f"--n must be >= 1, got {n}"])
    if problems:
        raise run_config.ConfigError(problems)
    images, labels = eval_dataset(cfg)
    report = evaluate(model, images, labels, n, scfg, seed).as_dict()
    if out_dir is not None:
        cfg.sample = scfg
        cfg.out_dir = str(out_dir)
        write_resolved(out_dir, cfg, {"checkpoint": checkpoint, "n": n})
        text = "".join(f"{k} = {v!r}\n" for k, v in report.items())
        (Path(out_dir) / "metrics.txt").write_text(text, encoding="utf-8")
    return report
