"""Command line entry point: ``mindmeld <command> ...``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys

import numpy as np

from . import metrics as mt
from . import pipeline as pl


def _series(path) -> np.ndarray:
    """One numeric column from a CSV; the last column when there are several."""
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r]
    if not rows:
        raise ValueError(f"{path}: empty file")
    try:
        float(rows[0][-1])
    except ValueError:
        rows = rows[1:]
    return np.array([float(r[-1]) for r in rows])


def _config(args) -> pl.ExperimentConfig:
    overrides = dict(kv.split("=", 1) for kv in args.set or [])
    if args.config:
        return pl.ExperimentConfig.load(args.config, **overrides)
    return pl.ExperimentConfig.from_strings(overrides)


def cmd_gen(args) -> int:
    run = pl.generate(_config(args), args.out)
    print(f"generated {run.root}")
    return 0


def cmd_train(args) -> int:
    _, _, cal, hold = pl.run_calibration_phase(pl.RunDir(args.run))
    print(f"calibration improvement {cal.mean:.3f} (pooled {cal.pooled:.3f})")
    print(f"holdout improvement     {hold.mean:.3f} (pooled {hold.pooled:.3f})")
    return 0


def cmd_infer(args) -> int:
    emb, rep = pl.run_test_phase(pl.RunDir(args.run))
    if not emb:
        print("no test demonstrators")
    else:
        print(f"test improvement {rep.mean:.3f} over {len(emb)} demonstrators")
    return 0


def cmd_conditions(args) -> int:
    rows = pl.run_conditions(pl.RunDir(args.run))
    for r in rows:
        print(f"p={r['demonstrator_id']:>3} {r['condition']:<9} success {r['final_success']:.2f}")
    return 0


def cmd_report(args) -> int:
    bundle = pl.report(pl.RunDir(args.run))
    for name, ok in bundle.checks.items():
        print(f"{'PASS' if ok else 'FAIL'} {name} = {bundle.summary.get(name)}")
    print(f"content hash {bundle.content_hash}")
    return 0 if bundle.passed else 1


def cmd_run(args) -> int:
    bundle = pl.run_all(_config(args), args.out, conditions=not args.skip_conditions)
    print(json.dumps(bundle.checks, indent=1))
    return 0 if bundle.passed else 1


def cmd_dtw(args) -> int:
    a, o = _series(args.a), _series(args.o)
    res = mt.analyse(a, o)
    print(f"cost {res.cost:.6g}")
    print(f"amplitude_D {res.amplitude_D:.6g} (per step {res.amplitude_norm:.6g})")
    print(f"timing {res.timing_offset:.6g}")
    print(f"path_length {len(res.path)}")
    return 0


def cmd_grad_check(args) -> int:
    from .model import gradient_check

    worst = gradient_check(seed=args.seed, per_tensor=args.entries)
    ok = True
    for name, err in worst.items():
        flag = err < args.tol
        ok &= flag
        print(f"{'PASS' if flag else 'FAIL'} {name:<11} max rel err {err:.3e}")
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mindmeld", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("--config", help="key=value config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config value")
        p.add_argument("--holdout-mode", choices=["frozen", "joint"])

    p = sub.add_parser("gen", help="generate worlds, rollouts and styled labels")
    with_config(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen)

    for name, func, help_ in (
        ("train", cmd_train, "calibration phase: train the corrector"),
        ("infer", cmd_infer, "test phase: infer embeddings for new demonstrators"),
        ("conditions", cmd_conditions, "BC / DAgger / corrected DAgger comparison"),
        ("report", cmd_report, "write tables; exit 1 if a threshold is missed"),
    ):
        p = sub.add_parser(name, help=help_)
        p.add_argument("run")
        p.set_defaults(func=func)

    p = sub.add_parser("run", help="all stages in one go")
    with_config(p)
    p.add_argument("--out", required=True)
    p.add_argument("--skip-conditions", action="store_true")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("dtw", help="style metrics of a label series against ground truth")
    p.add_argument("a")
    p.add_argument("o")
    p.set_defaults(func=cmd_dtw)

    p = sub.add_parser("grad-check", help="finite-difference check of the full network")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--entries", type=int, default=300, help="entries per tensor (0 = all)")
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(func=cmd_grad_check)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if getattr(args, "holdout_mode", None):
        args.set = (args.set or []) + [f"holdout_mode={args.holdout_mode}"]
    try:
        return args.func(args)
    except (pl.StageError, ValueError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
