"""Ablation matrix: one model per axis value under an identical budget and seed."""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

from ..flow_head import GRANULARITIES, INJECTION_MODES, TARGET_MODES
from . import config as run_config
from .runs import eval_dataset, train_run


@dataclass(frozen=True)
class Axis:
    key: str
    values: tuple[str, ...]
    base: tuple[tuple[str, str], ...] = ()  # settings shared by every run of this axis


AXES = {
    "injection": Axis("flow.injection_mode", INJECTION_MODES),
    "granularity": Axis("flow.granularity", GRANULARITIES),
    "target": Axis("flow.target_mode", TARGET_MODES),
    # all three schedules end at 16 latent tokens per side, i.e. 64 px under a 4x codec
    "schedule": Axis("model.schedule", ("1,2,4,8,16", "1,4,8,16", "1,4,16"), (("model.image_size", "64"),)),
    "pyramid_mode": Axis("model.pyramid_mode", ("latent", "image")),
}

# (axis, expected winner, expected loser): reported, never enforced
DIRECTION_CHECKS = {
    "pyramid_mode": ("latent", "image"),
    "granularity": ("per_scale", "per_token"),
}

REPORT_COLUMNS = ("rank", "value", "energy_ratio", "energy_distance", "class_consistency", "heldout_loss",
                  "final_train_loss")


def variant_configs(axis: str, budget: int, base_overrides: list[str] | None = None, config_path=None,
                    out_dir="runs/ablate") -> list[tuple[str, run_config.RunConfig]]:
    """One resolved config per axis value; raises if anything but the axis differs."""
    if axis not in AXES:
        raise run_config.ConfigError([f"unknown axis {axis!r}; choose from {sorted(AXES)}"])
    if budget < 1:
        raise run_config.ConfigError([f"--budget must be >= 1, got {budget}"])
    spec = AXES[axis]
    shared = list(base_overrides or []) + [f"{k}={v}" for k, v in spec.base]
    probe = run_config.load(config_path, shared + [f"{spec.key}={spec.values[0]}"])
    per_epoch = max(probe.data.count // min(probe.train.batch_size, probe.data.count), 1)
    # warm up over the first 5% of the budget
    shared += [f"train.total_steps={budget}", f"train.warmup_epochs={0.05 * budget / per_epoch!r}"]
    variants = []
    for value in spec.values:
        cfg = run_config.load(config_path, shared + [f"{spec.key}={value}",
                                                     f"out_dir={Path(out_dir) / axis / _slug(value)}"])
        variants.append((value, cfg))
    reference = variants[0][1]
    for value, cfg in variants[1:]:
        changed = set(run_config.diff(reference, cfg)) - {"out_dir"}
        if not changed <= {spec.key}:
            raise AssertionError(f"ablation {axis}={value} differs from the reference in {sorted(changed)}")
    for _, cfg in variants:
        if cfg.train.steps(cfg.data.count)[2] != budget:
            raise AssertionError("ablation budget does not translate to the requested step count")
    return variants


def _slug(value: str) -> str:
    return value.replace(",", "-")


def run_variant(value: str, cfg_text: str, eval_samples: int) -> dict:
    """Train and score one variant; takes the config as text so it can cross process boundaries."""
    from ..engine import SampleConfig, evaluate, load_model

    cfg = run_config.parse_text(cfg_text)
    summary = train_run(cfg)
    model = load_model(summary["checkpoint"])
    images, labels = eval_dataset(cfg)
    scfg = SampleConfig(euler_steps=cfg.sample.euler_steps, cfg_scale=cfg.sample.cfg_scale, seed=cfg.sample.seed)
    rep = evaluate(model, images, labels, eval_samples, scfg, cfg.sample.seed)
    ratio = rep.energy_distance / rep.energy_baseline if rep.energy_baseline > 0 else math.inf
    return {"value": value, "energy_ratio": ratio, "energy_distance": rep.energy_distance,
            "class_consistency": rep.class_consistency, "heldout_loss": rep.heldout_loss,
            "final_train_loss": summary["last_loss"]}


def rank(rows: list[dict]) -> list[dict]:
    """Order by energy ratio (lower is better), then held-out loss; NaN sorts last."""
    def key(r):
        ratio = r["energy_ratio"]
        return (math.isnan(ratio), ratio, r["heldout_loss"])
    ranked = sorted(rows, key=key)
    return [{**r, "rank": i + 1} for i, r in enumerate(ranked)]


def direction_checks(axis: str, ranked: list[dict]) -> list[str]:
    if axis not in DIRECTION_CHECKS:
        return []
    winner, loser = DIRECTION_CHECKS[axis]
    pos = {r["value"]: r["rank"] for r in ranked}
    holds = pos[winner] < pos[loser]
    return [f"{winner} ranks above {loser}: {'holds' if holds else 'does not hold'} at this budget"]


def format_report(axis: str, budget: int, ranked: list[dict]) -> str:
    lines = [f"# ablation axis={axis} budget={budget} steps runs={len(ranked)}", "\t".join(REPORT_COLUMNS)]
    for r in ranked:
        cells = []
        for col in REPORT_COLUMNS:
            v = r[col]
            cells.append(f"{v:.6g}" if isinstance(v, float) else str(v))
        lines.append("\t".join(cells))
    lines += [f"# direction: {c}" for c in direction_checks(axis, ranked)]
    return "\n".join(lines) + "\n"


def ablate(axis: str, budget: int, out_dir="runs/ablate", base_overrides: list[str] | None = None,
           config_path=None, eval_samples: int = 64, jobs: int = 1, echo=None) -> list[dict]:
    """Run every value of ``axis`` and write ``report.tsv`` under ``out_dir/axis``; returns ranked rows."""
    variants = variant_configs(axis, budget, base_overrides, config_path, out_dir)
    texts = [(value, run_config.dump(cfg)) for value, cfg in variants]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(run_variant, [v for v, _ in texts], [t for _, t in texts],
                                 [eval_samples] * len(texts)))
    else:
        rows = []
        for value, text in texts:
            if echo:
                echo(f"ablate {axis}={value}")
            rows.append(run_variant(value, text, eval_samples))
    ranked = rank(rows)
    report = format_report(axis, budget, ranked)
    path = Path(out_dir) / axis
    path.mkdir(parents=True, exist_ok=True)
    (path / "report.tsv").write_text(report, encoding="utf-8")
    return ranked
