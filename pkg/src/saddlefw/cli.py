"""Command-line entry point.

    saddlefw solve --config run.json --out results/
    saddlefw gen --spec '{"kind": "submodular_grid", "W": 8, "H": 8, "seed": 0}' --out inst.json
    saddlefw fit --log results/run.csv --field dual_H --ref -12.5

Errors are written to stderr as a single JSON object
``{"error": <type>, "message": ..., "context": ...}`` and the process exits
with a nonzero status.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .bench import ConfigError, RunConfig, fit_rate, generate_instance, run

__all__ = ["main", "build_parser"]

EXIT_CONFIG = 2
EXIT_RUNTIME = 3


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="saddlefw", description="Frank-Wolfe saddle-point solvers")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("solve", help="run a solver from a JSON config")
    p.add_argument("--config", required=True, help="path of a JSON file mirroring RunConfig fields")
    p.add_argument("--out", required=True, help="output directory for run.csv, ergodic.csv, summary.json")

    p = sub.add_parser("gen", help="write an instance document")
    p.add_argument("--spec", required=True, help="generator spec as JSON text or a path to a JSON file")
    p.add_argument("--out", required=True, help="output path of the instance JSON")

    p = sub.add_parser("fit", help="fit a log-log rate slope to a run CSV")
    p.add_argument("--log", required=True, help="run CSV")
    p.add_argument("--field", default="dual_H")
    p.add_argument("--ref", type=float, default=None, help="reference value; gap = ref - value by default")
    p.add_argument("--mode", choices=("below", "above", "abs"), default="below")
    p.add_argument("--window", type=float, default=0.5, help="trailing fraction of rows")
    return parser


def _read_spec(text: str) -> dict:
    path = Path(text)
    if not text.lstrip().startswith("{") and path.exists():
        text = path.read_text()
    try:
        spec = json.loads(text)
    except json.JSONDecodeError as err:
        raise ConfigError(f"spec is neither a JSON object nor a readable file: {err}", "--spec") from err
    if not isinstance(spec, dict):
        raise ConfigError("spec must be a JSON object", "--spec")
    return spec


def _cmd_solve(args) -> dict:
    config = RunConfig.from_file(args.config)
    log = run(config, args.out)
    s = log.summary
    return {"out": str(args.out), "iterations": s["iterations"], "lmo_calls_total": s["lmo_calls_total"], "final": s["final"]}


def _cmd_gen(args) -> dict:
    doc = generate_instance(_read_spec(args.spec))
    out = Path(args.out)
    if out.parent and not out.parent.exists():
        out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(doc) + "\n")
    return {"out": str(out), "type": doc["type"]}


def _cmd_fit(args) -> dict:
    try:
        slope = fit_rate(args.log, args.field, args.ref, window=args.window, mode=args.mode)
    except OSError as err:
        raise ConfigError(f"cannot read log: {err}", args.log) from err
    except KeyError as err:
        raise ConfigError(f"log has no column {err}", args.log) from err
    return {"field": args.field, "reference": args.ref, "window": args.window, "slope": slope}


COMMANDS = {"solve": _cmd_solve, "gen": _cmd_gen, "fit": _cmd_fit}


def _fail(kind: str, err: Exception, code: int) -> int:
    payload = {"error": kind, "message": str(err), "context": getattr(err, "context", None)}
    sys.stderr.write(json.dumps(payload) + "\n")
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        result = COMMANDS[args.command](args)
    except ConfigError as err:
        return _fail("ConfigError", err, EXIT_CONFIG)
    except ValueError as err:
        return _fail(type(err).__name__, err, EXIT_RUNTIME)
    sys.stdout.write(json.dumps(result, default=float) + "\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())
