"""Command line interface.

  efsim run    --config run.toml --out metrics.csv [--seed S] [--workers N]
  efsim sweep  --grid grid.toml --out-dir results/
  efsim verify --suite all|compressors|sketch|reductions|rowspace

Exit codes: 0 success, 1 config error, 2 divergence, 3 verification failure.
"""

from __future__ import annotations

import argparse
import json
import sys

from .config import ConfigError, apply_overrides, load_config
from .optim import DivergenceError
from .runner import load_grid, run, run_summary, sweep
from .verify import SUITES, run_suites

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_DIVERGED = 2
EXIT_VERIFY = 3


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="efsim",
        description="gradient-compression training simulator",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute one training run")
    p_run.add_argument("--config", required=True)
    p_run.add_argument("--out", required=True)
    p_run.add_argument("--seed", type=int, default=None, help="master seed override")
    p_run.add_argument("--workers", type=int, default=None, help="worker count override")

    p_sweep = sub.add_parser("sweep", help="run a config grid")
    p_sweep.add_argument("--grid", required=True)
    p_sweep.add_argument("--out-dir", required=True)

    p_verify = sub.add_parser("verify", help="run verification suites")
    p_verify.add_argument("--suite", default="all",
                          choices=["all", *SUITES])
    p_verify.add_argument("--seed", type=int, default=2025)
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "run":
            config = load_config(args.config)
            config = apply_overrides(config, seed=args.seed, workers=args.workers)
            records = run(config, out_path=args.out)
            print(json.dumps({"status": "ok", **run_summary(records)}))
            return EXIT_OK
        if args.command == "sweep":
            base, grid = load_grid(args.grid)
            rows = sweep(base, grid, args.out_dir)
            n_ok = sum(1 for r in rows if r.get("status") == "ok")
            print(json.dumps({"cells": len(rows), "ok": n_ok}))
            return EXIT_OK
        if args.command == "verify":
            names = list(SUITES) if args.suite == "all" else [args.suite]
            results = run_suites(names, seed=args.seed)
            for r in results:
                print(json.dumps(
                    {"suite": r.suite, "check": r.name,
                     "passed": bool(r.passed), "detail": r.detail}
                ))
            failed = [r for r in results if not r.passed]
            print(json.dumps({"checks": len(results), "failed": len(failed)}))
            return EXIT_VERIFY if failed else EXIT_OK
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    raise AssertionError("unreachable")


if __name__ == "__main__":
    sys.exit(main())
