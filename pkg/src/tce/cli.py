"""Command-line entry point.

Exit codes: 0 success, 1 contract violation or bad input, 2 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import datasets as dsio
from .config import ExperimentConfig, load as load_config, profile
from .errors import ContractViolation, FormatError, NumericFailure
from .pipeline import STAGES, SWEEP_AXES, Pipeline, StageError, report_errors, sweep

log = logging.getLogger("tce")

STAGE_COMMANDS = {
    "collect": ("collect", "collect"),
    "select": ("select", "select"),
    "train-score": ("train-models", "train-models"),
    "generate": ("generate", "generate"),
    "train-policy": ("build", "train-policy"),
    "evaluate": ("evaluate", "evaluate"),
    "run": (None, None),
}


def _json_out(obj) -> None:
    json.dump(obj, sys.stdout, indent=2, sort_keys=True, default=str)
    sys.stdout.write("\n")


def build_config(args) -> ExperimentConfig:
    cfg = profile(args.profile)
    if args.config:
        cfg = load_config(args.config, base=cfg)
    overrides = {}
    for item in args.set or []:
        if "=" not in item:
            raise ContractViolation(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    if args.seed is not None:
        overrides["run.seed"] = args.seed
    return cfg.with_values(overrides) if overrides else cfg


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--profile", choices=("desk", "paper"), default="desk")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", default="runs/default", help="run directory")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override; repeatable")


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tce", description="Target-aligned coverage expansion toolkit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    for name in STAGE_COMMANDS:
        p = sub.add_parser(name, help=f"run the {name} stage" if name != "run" else "run the full pipeline")
        _add_common(p)
        if name == "run":
            p.add_argument("--stage", choices=STAGES, default="collect", help="first stage to (re)run")
            p.add_argument("--stop", choices=STAGES, help="last stage to run")

    p = sub.add_parser("verify-bounds", help="bound checks on random tabular MDPs")
    p.add_argument("--instances", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--rows", action="store_true", help="include per-instance rows")

    p = sub.add_parser("report-errors", help="action/reward/transition errors of a generated set")
    p.add_argument("gen", help="generated TCED file")
    p.add_argument("--domain", required=True, help="domain pair name")
    p.add_argument("--holdout", help="held-out target TCED file")
    p.add_argument("--models", help="model directory holding inv.ckpt")

    p = sub.add_parser("sweep", help="pipeline runs over one axis and several seeds")
    _add_common(p)
    p.add_argument("--axis", choices=sorted(SWEEP_AXES), required=True)
    p.add_argument("--values", required=True, help="comma-separated axis values")
    p.add_argument("--seeds", default="0", help="comma-separated seeds")

    p = sub.add_parser("inspect", help="print metadata and statistics of a TCED file")
    p.add_argument("path")
    return parser


def _parse_values(axis: str, text: str):
    conv = int if axis in ("K", "target_size") else float
    try:
        return [conv(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise ContractViolation(f"bad --values for {axis}: {exc}") from exc


def dispatch(args) -> int:
    cmd = args.command
    if cmd == "verify-bounds":
        from .theory import verify_bounds

        rep = verify_bounds(args.instances, args.seed)
        if not args.rows:
            rep.pop("rows")
        _json_out(rep)
        return 0
    if cmd == "inspect":
        _json_out(dsio.summary(dsio.read(args.path)))
        return 0
    if cmd == "report-errors":
        _json_out(report_errors(args.gen, args.domain, args.holdout, args.models))
        return 0
    cfg = build_config(args)
    if cmd == "sweep":
        rows = sweep(cfg, args.axis, _parse_values(args.axis, args.values),
                     [int(s) for s in args.seeds.split(",") if s.strip()], args.out)
        _json_out(rows)
        return 0
    pipe = Pipeline(cfg, args.out)
    if cmd == "run":
        result = pipe.run(args.stage, args.stop)
    else:
        first, last = STAGE_COMMANDS[cmd]
        result = pipe.run(first, last)
    if cmd == "select":
        name = "selection_mix.json" if cfg.variant == "SM" else "selection_cov.json"
        result = json.loads(Path(args.out, name).read_text(encoding="utf-8"))
    if result is not None:
        _json_out(result)
    return 0


def main(argv=None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return dispatch(args)
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2 if isinstance(exc.cause, NumericFailure) else 1
    except NumericFailure as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 2
    except (ContractViolation, FormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
