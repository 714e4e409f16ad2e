"""Command-line entry point.

Exit codes: 0 on success, 2 for an invalid experiment specification, 3 for a
numerical failure.  Failures also write ``error.json`` into the output
directory and print the same record to stderr.
"""
from __future__ import annotations

import argparse
import json
import sys
import traceback
from pathlib import Path

import numpy as np

from .errors import (ConditionViolation, DegenerateData, DegenerateFit, DegenerateState, DegenerateTestFunction,
                     NonFiniteLoss, StepSizeUnderflow, ZeroReference)
from .experiments import ExperimentSpec, run

EXIT_OK, EXIT_SPEC, EXIT_NUMERIC = 0, 2, 3

_NUMERIC = (NonFiniteLoss, StepSizeUnderflow, DegenerateData, DegenerateState, DegenerateFit, ZeroReference,
            DegenerateTestFunction, ConditionViolation, FloatingPointError, ArithmeticError)
_SPEC = (ValueError, KeyError, TypeError, FileNotFoundError, json.JSONDecodeError)


def _floats(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def _range_or_list(text: str) -> list[float]:
    """``a,b,c`` or a log range ``lo..hi`` (one point per factor-of-two step, both ends included)."""
    if ".." in text:
        lo, hi = (float(v) for v in text.split(".."))
        n = max(2, int(round(np.log2(hi / lo))) + 1)
        return [float(v) for v in np.geomspace(lo, hi, n)]
    return _floats(text)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="master seed (default 0)")
    common.add_argument("--out", default=None, help="output directory (default ./out/<subcommand>)")
    common.add_argument("--config", default=None, help="JSON file with experiment parameters")

    p = argparse.ArgumentParser(prog="weakdyn", parents=[common],
                                description="Strong- vs weak-form learning experiments.")
    sub = p.add_subparsers(dest="kind", required=True)

    g = sub.add_parser("gen-data", parents=[common], help="noisy damped-oscillator trajectories as CSV")
    g.add_argument("--noise", type=float)
    g.add_argument("--n-traj", type=int, dest="n_traj")
    g.add_argument("--K", type=int)
    g.add_argument("--dt", type=float)

    s = sub.add_parser("estimate-strong", parents=[common], help="Monte-Carlo sweep of the strong estimator")
    s.add_argument("--lambda", type=float, dest="lam")
    s.add_argument("--sigmas", type=_floats)
    s.add_argument("--dts", type=_range_or_list)
    s.add_argument("--runs", type=int)

    w = sub.add_parser("estimate-weak", parents=[common], help="Monte-Carlo sweep of the weak estimator")
    w.add_argument("--lambda", type=float, dest="lam")
    w.add_argument("--sigmas", type=_floats)
    w.add_argument("--S", type=_range_or_list)
    w.add_argument("--runs", type=int)

    c = sub.add_parser("crossing", parents=[common], help="step sizes where the strong estimate is exact")
    c.add_argument("--lambda", type=float, dest="lam")
    c.add_argument("--sigma", type=float)
    c.add_argument("--streams", type=int)

    t = sub.add_parser("train-compare", parents=[common], help="train strong- and weak-form models on one dataset")
    t.add_argument("--noise", type=float)
    t.add_argument("--iters", type=int)
    t.add_argument("--n-train", type=int, dest="n_train")

    e = sub.add_parser("evaluate", parents=[common], help="evaluate a saved model against trajectory CSVs")
    e.add_argument("--model")
    e.add_argument("--data")
    e.add_argument("--anchor-entropy", action="store_true", default=None, dest="anchor_entropy")
    return p


_GLOBAL = ("kind", "seed", "out", "config")


def spec_from_args(args: argparse.Namespace) -> ExperimentSpec:
    params, seed = {}, 0
    if args.config:
        cfg = json.loads(Path(args.config).read_text())
        if not isinstance(cfg, dict):
            raise ValueError("config file must hold a JSON object")
        seed = int(cfg.pop("seed", 0))
        params.update(cfg)
    params.update({k: v for k, v in vars(args).items() if k not in _GLOBAL and v is not None})
    if args.seed is not None:
        seed = args.seed
    out = args.out or str(Path("out") / args.kind)
    return ExperimentSpec(args.kind, params, out, seed)


def _fail(code: int, exc: BaseException, out) -> int:
    record = {"status": "error", "exit_code": code, "type": type(exc).__name__, "message": str(exc),
              "traceback": traceback.format_exc()}
    if isinstance(exc, NonFiniteLoss):
        record["iteration"] = exc.iteration
    if isinstance(exc, ConditionViolation):
        record["violations"] = {str(k): v for k, v in exc.violations.items()}
    if out is not None:
        try:
            Path(out).mkdir(parents=True, exist_ok=True)
            (Path(out) / "error.json").write_text(json.dumps(record, indent=2))
        except OSError:
            pass
    print(json.dumps({k: v for k, v in record.items() if k != "traceback"}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    out = None
    try:
        spec = spec_from_args(args)
        out = spec.out
    except _SPEC as exc:
        return _fail(EXIT_SPEC, exc, args.out)
    try:
        manifest = run(spec)
    except _NUMERIC as exc:
        return _fail(EXIT_NUMERIC, exc, out)
    except _SPEC as exc:
        return _fail(EXIT_SPEC, exc, out)
    print(json.dumps({"status": "ok", "out": out, "outputs": len(manifest["outputs"])}))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
