"""Command-line harness.

    kdvconserve converge <config> [--workers n] [--out dir]
    kdvconserve conserve <config> [--out dir]
    kdvconserve run      <config> [--out dir]
    kdvconserve selftest

Results are written as CSV (canonical) plus a JSON mirror next to it, named
from the config's out_prefix. Exit codes: 0 success, 1 configuration error,
2 solver failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .config import ConfigError, load_spec
from .experiments import run_conservation, run_convergence, run_single
from .newton import NewtonError


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="kdvconserve",
                                 description="Conservative DG harness for the "
                                             "gKdV equation and the HS-KdV system")
    sub = ap.add_subparsers(dest="command", required=True)
    for name, needs_cfg in (("converge", True), ("conserve", True),
                            ("run", True), ("selftest", False)):
        p = sub.add_parser(name)
        if needs_cfg:
            p.add_argument("config", help="path to a key = value config file")
            p.add_argument("--out", default=".", help="output directory")
            p.add_argument("--workers", type=int, default=1,
                           help="parallel sweep workers (converge only)")
    return ap


def main(argv=None) -> int:
    args = _parser().parse_args(argv)

    if args.command == "selftest":
        from .selftest import run_selftest
        return run_selftest()

    try:
        spec = load_spec(args.config)
    except (ConfigError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    base = out_dir / spec.out_prefix

    try:
        if args.command == "converge":
            table = run_convergence(spec, workers=max(1, args.workers))
            table.to_csv(f"{base}_convergence.csv")
            table.to_json(f"{base}_convergence.json")
            print(f"# {spec.id}  spec {spec.spec_hash()}  wall {table.wall_time:.1f}s")
            print(table.formatted())
            if table.partial:
                print("warning: sweep aborted early; partial table saved",
                      file=sys.stderr)
                return 2
        elif args.command == "conserve":
            series = run_conservation(spec)
            series.to_csv(f"{base}_conservation.csv")
            series.to_json(f"{base}_conservation.json")
            dm, de, dh = series.deviations()
            print(f"# {spec.id}  spec {spec.spec_hash()}  samples {len(series.times)}")
            print(f"max |dmass| {max(map(abs, dm)):.3e}  "
                  f"max |denergy| {max(map(abs, de)):.3e}  "
                  f"max |dhamiltonian| {max(map(abs, dh)):.3e}")
            if series.failed:
                print("warning: solver failure; last good samples retained",
                      file=sys.stderr)
                return 2
        elif args.command == "run":
            result = run_single(spec, out_dir)
            print(f"# {spec.id}  k={result.k} N={result.N} steps={result.steps} "
                  f"t={result.t_final:.6g}")
    except NewtonError as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
