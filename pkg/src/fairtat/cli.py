"""Command line entry point: ``fairtat run|eval|verify``."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import config as cf
from . import model as md
from . import report as rp


def _load_config(path: str, args) -> dict:
    values = cf.parse_text(Path(path).read_text())
    overrides = {
        "run.mode": getattr(args, "mode", None),
        "run.seeds": [args.seed] if getattr(args, "seed", None) is not None else None,
        "train.epochs": getattr(args, "epochs", None),
        "output.dir": getattr(args, "out", None),
    }
    if getattr(args, "no_figures", False):
        overrides["output.figures"] = False
    return cf.apply_overrides(values, overrides)


def cmd_run(args) -> int:
    values = _load_config(args.config, args)
    if args.dry_run:
        sys.stdout.write(cf.render(values))
        print(f"# resolved {len(values)} keys; nothing was run")
        return 0
    progress = None if args.quiet else print
    try:
        rp.run_experiment(values, values["output.dir"], progress=progress)
    except rp.ExperimentFailed as exc:
        print(f"error: {exc} (partial report at {exc.report_path})", file=sys.stderr)
        return 3
    print(f"wrote {values['output.dir']}/report.json")
    return 0


def cmd_eval(args) -> int:
    values = _load_config(args.config, args)
    params, meta = md.load_checkpoint(args.checkpoint)
    seed = args.seed if args.seed is not None else meta["seed"]
    _, test = rp.build_datasets(values, seed)
    tables, _ = rp.evaluate_model(params, test, values)
    text = rp._dump({"checkpoint": str(args.checkpoint), "seed": seed, "tables": tables})
    if args.output:
        Path(args.output).write_text(text)
    else:
        print(text)
    return 0


def cmd_verify(args) -> int:
    checked, problems = rp.verify_report(args.report, retrain=not args.no_retrain, tol=args.tol)
    for p in problems[:50]:
        print(f"mismatch: {p}")
    if problems:
        print(f"verify FAILED: {len(problems)} mismatches ({checked} numbers compared)")
        return 1
    print(f"verify ok: {checked} numbers reproduced within {args.tol:g}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fairtat", description="Fair targeted adversarial training experiments.")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="train, evaluate and write a report")
    run.add_argument("config", help="config file (section.key = value lines)")
    run.add_argument("--mode", choices=["fair_tat", "untargeted_at"], help="overrides run.mode")
    run.add_argument("--seed", type=int, help="run a single seed instead of run.seeds")
    run.add_argument("--epochs", type=int, help="overrides train.epochs")
    run.add_argument("--out", help="overrides output.dir")
    run.add_argument("--no-figures", action="store_true", help="skip the PNG figures")
    run.add_argument("--dry-run", action="store_true", help="validate and print the resolved config, run nothing")
    run.add_argument("--quiet", action="store_true", help="no per-epoch progress lines")
    run.set_defaults(func=cmd_run)

    ev = sub.add_parser("eval", help="evaluate a saved checkpoint under the config's evaluation block")
    ev.add_argument("checkpoint")
    ev.add_argument("config")
    ev.add_argument("--seed", type=int, help="data seed for the test set (default: the checkpoint's seed)")
    ev.add_argument("--output", help="write JSON here instead of stdout")
    ev.set_defaults(func=cmd_eval)

    ver = sub.add_parser("verify", help="recompute a report's numbers from its checkpoints")
    ver.add_argument("report", help="report.json or the directory holding it")
    ver.add_argument("--no-retrain", action="store_true", help="skip retraining; only re-evaluate checkpoints")
    ver.add_argument("--tol", type=float, default=1e-9)
    ver.set_defaults(func=cmd_verify)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except cf.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
