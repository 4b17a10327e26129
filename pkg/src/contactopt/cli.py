"""Command line entry points: optimize, evaluate, verify."""

from __future__ import annotations

import argparse
import sys

from .optimize import OptimizationConfig, evaluate_only, run
from .verify import run_all, write_checks_csv


def _load_config(args) -> OptimizationConfig:
    cfg = OptimizationConfig.from_json(args.config)
    if args.max_iters is not None:
        cfg.max_iters = args.max_iters
    if args.model is not None:
        cfg.model = args.model
    if args.seed is not None:
        cfg.seed = args.seed
    cfg.validate()
    return cfg


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="contactopt",
        description="Shape optimization of elastic bodies in frictional contact")
    sub = parser.add_subparsers(dest="command", required=True)

    for name in ("optimize", "evaluate"):
        p = sub.add_parser(name)
        p.add_argument("config", help="JSON configuration file")
        p.add_argument("--output-dir", default=None)
        p.add_argument("--max-iters", type=int, default=None)
        p.add_argument("--model", choices=("none", "sliding", "tresca"), default=None)
        p.add_argument("--seed", type=int, default=None)
        if name == "optimize":
            p.add_argument("--vtk-every", type=int, default=0, metavar="N")

    v = sub.add_parser("verify")
    v.add_argument("--output-dir", default=None)
    v.add_argument("--seed", type=int, default=42)

    args = parser.parse_args(argv)

    if args.command == "verify":
        reports = run_all(args.seed)
        for r in reports:
            print(f"{r.name:30s} {r.status:8s} measured={r.measured:.6g} "
                  f"target={r.target:.6g} tol={r.tolerance:.6g} ({r.runtime:.2f}s)")
        if args.output_dir is not None:
            from pathlib import Path
            out = Path(args.output_dir)
            out.mkdir(parents=True, exist_ok=True)
            write_checks_csv(out / "checks.csv", reports)
        return 0 if all(r.passed for r in reports) else 1

    cfg = _load_config(args)
    if args.command == "optimize":
        result = run(cfg, output_dir=args.output_dir, vtk_every=args.vtk_every)
        last = result.history[-1]
        print(f"status={result.status} iterations={len(result.history)} "
              f"J={last.J:.6g} compliance={last.compliance:.6g} "
              f"volume={last.volume:.6g}")
        return 0
    record = evaluate_only(cfg, output_dir=args.output_dir)
    print(f"J={record.J:.6g} compliance={record.compliance:.6g} "
          f"volume={record.volume:.6g} grad_norm={record.grad_norm:.6g}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
