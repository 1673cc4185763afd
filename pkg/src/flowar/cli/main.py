"""``flowar`` command line.

Exit codes: 0 ok, 2 config or argument error, 3 numeric failure
(non-finite loss or gradients), 4 I/O error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from ..numerics import NonFiniteError
from . import ablate as ablate_mod
from . import config as run_config
from . import runs

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4

log = logging.getLogger("flowar")


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="flowar", description="Scale-wise autoregressive flow-matching generator.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="render the procedural shapes dataset")
    s.add_argument("--classes", type=int, default=4)
    s.add_argument("--count", type=int, default=512)
    s.add_argument("--size", type=int, default=16)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)

    def config_args(sp):
        sp.add_argument("--config", help=f"key=value config file (default: ${run_config.ENV_VAR})")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key; repeatable")

    t = sub.add_parser("train", help="train a model")
    config_args(t)
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--out", help="output directory (overrides out_dir)")
    t.add_argument("--max-steps", type=int, help="stop after this step without changing the LR schedule")

    def sampling_args(sp, n_default):
        sp.add_argument("--checkpoint", required=True)
        sp.add_argument("--n", type=int, default=n_default)
        sp.add_argument("--cfg", type=float, default=1.0, help="classifier-free guidance scale")
        sp.add_argument("--steps", type=int, default=25, help="Euler steps per scale")
        sp.add_argument("--seed", type=int, default=0)

    sm = sub.add_parser("sample", help="write PPM samples and a contact sheet")
    sampling_args(sm, 16)
    sm.add_argument("--class", dest="class_id", default="all", help="class id or 'all' to cycle classes")
    sm.add_argument("--out", required=True)

    e = sub.add_parser("evaluate", help="held-out loss, energy distance and class consistency")
    sampling_args(e, 256)
    e.add_argument("--out")

    a = sub.add_parser("ablate", help="train one model per value of an ablation axis")
    config_args(a)
    a.add_argument("--axis", required=True, choices=sorted(ablate_mod.AXES))
    a.add_argument("--budget", type=int, default=200, help="training steps per run")
    a.add_argument("--eval-samples", type=int, default=64)
    a.add_argument("--jobs", type=int, default=1, help="run variants in this many processes")
    a.add_argument("--out", default="runs/ablate")
    return p


def _cmd_synth(args) -> int:
    info = runs.synth(args.out, args.classes, args.count, args.size, args.seed)
    print(f"wrote {info['count']} images to {args.out} (rule check {info['rule_matches']}/{info['count']}, "
          f"digest {info['digest'][:16]})")
    return EXIT_OK


def _cmd_train(args) -> int:
    overrides = list(args.set) + ([f"out_dir={args.out}"] if args.out else [])
    cfg = run_config.load(args.config, overrides)
    summary = runs.train_run(cfg, resume=args.resume, max_steps=args.max_steps, echo=print)
    print(f"trained to step {summary['steps']}/{summary['total_steps']}; checkpoint {summary['checkpoint']}")
    return EXIT_OK


def _cmd_sample(args) -> int:
    paths = runs.sample_run(args.checkpoint, args.out, args.n, args.class_id, args.cfg, args.steps, args.seed)
    print(f"wrote {len(paths)} samples and sheet.ppm to {args.out}")
    return EXIT_OK


def _cmd_evaluate(args) -> int:
    report = runs.evaluate_run(args.checkpoint, args.out, args.n, args.cfg, args.steps, args.seed)
    for k, v in report.items():
        print(f"{k} = {v}")
    return EXIT_OK


def _cmd_ablate(args) -> int:
    ranked = ablate_mod.ablate(args.axis, args.budget, args.out, args.set, args.config, args.eval_samples,
                               args.jobs, echo=print)
    print((Path(args.out) / args.axis / "report.tsv").read_text(encoding="utf-8"), end="")
    return EXIT_OK if len(ranked) == len(ablate_mod.AXES[args.axis].values) else EXIT_NUMERIC


COMMANDS = {"synth": _cmd_synth, "train": _cmd_train, "sample": _cmd_sample, "evaluate": _cmd_evaluate,
            "ablate": _cmd_ablate}


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    args = _build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except run_config.ConfigError as exc:
        print("config error:", file=sys.stderr)
        for problem in exc.problems:
            print(f"  - {problem}", file=sys.stderr)
        return EXIT_CONFIG
    except NonFiniteError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:  # includes CheckpointError and missing files
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
