"""Plain-text ``key = value`` run configuration.

Format::

    # comment
    include base.cfg          # path relative to the including file
    model.schedule = 1,2,4
    ar.preset = tiny
    flow.injection_mode = adaln
    train.peak_lr = 1e-3

Later assignments override earlier ones, including those pulled in by an
``include``. Keys are ``section.field`` where the section is one of
``model``, ``codec``, ``ar``, ``flow``, ``train``, ``sample`` or ``data``;
``out_dir`` is the only top-level key. ``ar.preset`` / ``flow.preset``
fill depth, width and heads before any explicit field is applied.
Unknown keys and unparsable values are errors, and every problem found is
reported together.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, fields
from pathlib import Path

from ..ar_transformer import AR_PRESETS, ARConfig
from ..engine.config import DataConfig, ModelConfig, SampleConfig, TrainConfig
from ..flow_head import FLOW_PRESETS, FlowConfig

ENV_VAR = "FLOWAR_CONFIG"

# fields filled in from shared model settings; setting them directly is an error
_DERIVED = {
    "ar": {"num_classes", "schedule", "latent_channels", "resample"},
    "flow": {"latent_channels", "cond_width"},
}


class ConfigError(ValueError):
    """Carries every problem found while loading or validating a config."""

    def __init__(self, problems: list[str]):
        self.problems = list(problems)
        super().__init__("\n".join(self.problems))


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=lambda: ModelConfig(ar=ARConfig.preset("tiny"),
                                                                   flow=FlowConfig.preset("tiny")))
    train: TrainConfig = field(default_factory=TrainConfig)
    sample: SampleConfig = field(default_factory=SampleConfig)
    data: DataConfig = field(default_factory=DataConfig)
    out_dir: str = "runs/default"

    def problems(self) -> list[str]:
        out = []
        out += self.model.problems()
        out += [f"train: {p}" for p in self.train.problems()]
        out += [f"sample: {p}" for p in self.sample.problems()]
        if self.data.count < 1:
            out.append(f"data.count must be >= 1, got {self.data.count}")
        if self.data.eval_count < 2:
            out.append(f"data.eval_count must be >= 2, got {self.data.eval_count}")
        if self.train.checkpoint_every < 1:
            out.append(f"train.checkpoint_every must be >= 1, got {self.train.checkpoint_every}")
        if self.train.log_every < 1:
            out.append(f"train.log_every must be >= 1, got {self.train.log_every}")
        if not self.out_dir:
            out.append("out_dir must not be empty")
        return out


def _section_objects(cfg: RunConfig) -> dict:
    return {"model": cfg.model, "codec": cfg.model.codec, "ar": cfg.model.ar, "flow": cfg.model.flow,
            "train": cfg.train, "sample": cfg.sample, "data": cfg.data}


def _settable(section: str, obj) -> dict:
    skip = _DERIVED.get(section, set())
    if section == "model":
        skip = {"codec", "ar", "flow"}
    return {f.name: f for f in fields(obj) if f.name not in skip}


def known_keys() -> list[str]:
    cfg = RunConfig()
    keys = ["out_dir", "ar.preset", "flow.preset"]
    for section, obj in _section_objects(cfg).items():
        keys += [f"{section}.{name}" for name in _settable(section, obj)]
    return sorted(keys)


def _parse_value(raw: str, current):
    if isinstance(current, bool):
        low = raw.lower()
        if low in ("true", "yes", "1", "on"):
            return True
        if low in ("false", "no", "0", "off"):
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if isinstance(current, int):
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    if isinstance(current, tuple):
        return tuple(int(v) for v in raw.replace(" ", "").split(",") if v)
    return raw


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def read_assignments(path, _seen: tuple = ()) -> list[tuple[str, str, str]]:
    """Flatten a config file and its includes into ``(key, value, origin)`` triples."""
    path = Path(path).resolve()
    if path in _seen:
        chain = " -> ".join(str(p) for p in (*_seen, path))
        raise ConfigError([f"include cycle: {chain}"])
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError([f"cannot read config {path}: {exc.strerror or exc}"]) from exc
    out: list[tuple[str, str, str]] = []
    problems = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        origin = f"{path.name}:{lineno}"
        if line.startswith("include ") or line == "include":
            target = line[len("include"):].strip()
            if not target:
                problems.append(f"{origin}: include needs a path")
                continue
            try:
                out += read_assignments(path.parent / target, (*_seen, path))
            except ConfigError as exc:
                problems += exc.problems
            continue
        if "=" not in line:
            problems.append(f"{origin}: expected 'key = value', got {line!r}")
            continue
        key, value = (part.strip() for part in line.split("=", 1))
        out.append((key, value, origin))
    if problems:
        raise ConfigError(problems)
    return out


def build(assignments: list[tuple[str, str, str]]) -> RunConfig:
    """Apply assignments over the defaults; raise :class:`ConfigError` listing all problems."""
    cfg = RunConfig()
    problems: list[str] = []
    values = {}
    origins = {}
    for key, value, origin in assignments:
        values[key] = value
        origins[key] = origin

    known = set(known_keys())
    for key in values:
        if key not in known:
            section = key.split(".", 1)[0]
            derived = _DERIVED.get(section, set())
            if "." in key and key.split(".", 1)[1] in derived:
                problems.append(f"{origins[key]}: {key} is derived from model settings and cannot be set")
            else:
                problems.append(f"{origins[key]}: unknown key {key!r}")

    for section, presets in (("ar", AR_PRESETS), ("flow", FLOW_PRESETS)):
        name = values.get(f"{section}.preset")
        if name is None:
            continue
        if name not in presets:
            problems.append(f"{origins[f'{section}.preset']}: {section}.preset must be one of "
                            f"{sorted(presets)}, got {name!r}")
            continue
        depth, width, heads = presets[name]
        obj = _section_objects(cfg)[section]
        obj.depth, obj.width, obj.heads = depth, width, heads

    for key, raw in values.items():
        if key not in known or key.endswith(".preset"):
            continue
        if key == "out_dir":
            cfg.out_dir = raw
            continue
        section, name = key.split(".", 1)
        obj = _section_objects(cfg)[section]
        try:
            setattr(obj, name, _parse_value(raw, getattr(obj, name)))
        except ValueError as exc:
            problems.append(f"{origins[key]}: {key}: {exc}")

    # re-run the sub-config checks that normally happen at construction
    model = cfg.model
    for section, cls in (("ar", ARConfig), ("flow", FlowConfig)):
        obj = getattr(model, section)
        try:
            setattr(model, section, cls(**{f.name: getattr(obj, f.name) for f in fields(obj)}))
        except ValueError as exc:
            problems.append(f"{section}: {exc}")
    problems += cfg.problems()
    if problems:
        raise ConfigError(problems)
    return cfg


def load(path=None, overrides: list[str] | None = None) -> RunConfig:
    """Load ``path`` (or ``$FLOWAR_CONFIG`` when no path is given) plus ``key=value`` overrides."""
    path = path or os.environ.get(ENV_VAR)
    assignments = read_assignments(path) if path else []
    problems = []
    for i, item in enumerate(overrides or []):
        if "=" not in item:
            problems.append(f"override {item!r}: expected key=value")
            continue
        key, value = (p.strip() for p in item.split("=", 1))
        assignments.append((key, value, f"--set[{i}]"))
    if problems:
        raise ConfigError(problems)
    return build(assignments)


def dump(cfg: RunConfig) -> str:
    """Every settable key with its resolved value; :func:`build` of the result reproduces ``cfg``."""
    lines = [f"out_dir = {cfg.out_dir}"]
    for section, obj in _section_objects(cfg).items():
        for name in _settable(section, obj):
            lines.append(f"{section}.{name} = {_format_value(getattr(obj, name))}")
    return "\n".join(lines) + "\n"


def parse_text(text: str) -> RunConfig:
    assignments = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if line:
            if "=" not in line:
                raise ConfigError([f"line {lineno}: expected 'key = value', got {line!r}"])
            key, value = (p.strip() for p in line.split("=", 1))
            assignments.append((key, value, f"line {lineno}"))
    return build(assignments)


def diff(a: RunConfig, b: RunConfig) -> dict[str, tuple[str, str]]:
    """Keys whose resolved values differ between two configs."""
    da = dict(line.split(" = ", 1) for line in dump(a).splitlines())
    db = dict(line.split(" = ", 1) for line in dump(b).splitlines())
    return {k: (da[k], db[k]) for k in da if da[k] != db[k]}
