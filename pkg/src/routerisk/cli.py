"""Command-line entry point.

Three subcommands drive the pipeline: `assess` (baseline plus attacks),
`mitigate` (adds trust and/or random-update mitigation columns) and `sweep`
(gamma or trust-score grids). Exit status: 0 success, 1 validation or
infeasibility error, 2 solver non-convergence.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .attack import InfeasibleAttackError
from .equilibrium import ConvergenceError
from .network import DomainError, NetworkFormatError
from .pipeline import MITIGATION_METHODS, RunManifest, cmd_assess, cmd_mitigate, cmd_sweep


def _add_manifest_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--network", required=True, type=Path, help="network document (JSON)")
    parser.add_argument("--scenario", action="append", type=Path, default=[],
                        help="attack scenario document (repeatable)")
    parser.add_argument("--trust", type=Path, default=None, help="trust document (JSON)")
    parser.add_argument("--out", type=Path, default=Path("reports"), help="report output directory")
    parser.add_argument("--seed", type=int, default=0, help="global seed")
    parser.add_argument("--workers", type=int, default=1, help="parallel scenario workers")
    parser.add_argument("--tol", type=float, default=None, help="solver relative-gap tolerance")
    parser.add_argument("--ni-scope", choices=("all", "feasible"), default="all",
                        help="roads averaged into NI: all, or only roads on feasible paths")


def _manifest(args: argparse.Namespace) -> RunManifest:
    return RunManifest(
        network=args.network,
        scenarios=tuple(args.scenario),
        trust=args.trust,
        out=args.out,
        seed=args.seed,
        tol=args.tol,
        workers=args.workers,
        ni_scope=args.ni_scope,
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="routerisk",
        description="Quantify how fabricated navigation demand shifts equilibrium "
                    "route recommendations, and how much trust constraints help.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_assess = sub.add_parser("assess", help="run baseline and attack scenarios, write risk reports")
    _add_manifest_args(p_assess)

    p_mit = sub.add_parser("mitigate", help="assess with mitigation columns")
    _add_manifest_args(p_mit)
    p_mit.add_argument("--method", action="append", choices=MITIGATION_METHODS, default=[],
                       help="mitigation to apply (repeatable; default: both)")

    p_sweep = sub.add_parser("sweep", help="grid sweep over gamma or trust scores")
    _add_manifest_args(p_sweep)
    p_sweep.add_argument("--parameter", choices=("gamma", "trust"), required=True)
    p_sweep.add_argument("--grid", required=True,
                         help="comma-separated ascending grid values, e.g. 0.1,0.2,0.3")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        manifest = _manifest(args)
        if args.command == "assess":
            return cmd_assess(manifest)
        if args.command == "mitigate":
            methods = tuple(args.method) or MITIGATION_METHODS
            return cmd_mitigate(manifest, methods)
        if args.command == "sweep":
            try:
                grid = tuple(float(v) for v in args.grid.split(",") if v.strip())
            except ValueError as exc:
                raise DomainError(f"bad grid value: {exc}") from exc
            return cmd_sweep(manifest, args.parameter, grid)
        raise DomainError(f"unknown command {args.command!r}")
    except (NetworkFormatError, DomainError, InfeasibleAttackError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except ConvergenceError as exc:
        print(f"solver error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
