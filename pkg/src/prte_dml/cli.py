"""Command-line entry point: estimate on a CSV sample or run a replication study.

Exit codes: 0 success, 2 invalid configuration, 3 ingestion failure,
4 numerical failure, 5 output failure.
"""

from __future__ import annotations

import argparse
import os
import sys
from typing import Optional, Sequence

from .estimator import EstimationConfig, estimate
from .io import IngestionError, ReportWriteError, emit_report, ingest_csv, render_report
from .kernel_smoothing import Bandwidths
from .montecarlo import InstrumentShift, MCConfig, TooManyFailures, run_replications
from .nuisance import ProportionalShift, ZShift
from .score import IdentificationError, NumericalFailure

EXIT_OK, EXIT_CONFIG, EXIT_INGEST, EXIT_NUMERIC, EXIT_OUTPUT = 0, 2, 3, 4, 5
THREADS_ENV = "PRTE_DML_THREADS"


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="prte-dml",
        description="Cross-fitted orthogonal-score estimation of a policy relevant treatment effect.")
    ap.add_argument("--mode", choices=("estimate", "simulate"), default="simulate")
    ap.add_argument("--n", type=int, default=500, help="sample size per replication")
    ap.add_argument("--folds", type=int, default=5, help="number of cross-fitting folds L")
    ap.add_argument("--reps", type=int, default=1000, help="Monte Carlo replications")
    ap.add_argument("--a", type=float, default=0.5, help="policy intensity")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--h1", type=float, default=2.5, help="instrument bandwidth")
    ap.add_argument("--h2", type=float, default=0.25, help="propensity-axis bandwidth")
    ap.add_argument("--delta", type=float, default=0.01, help="central-difference step")
    ap.add_argument("--alpha", type=float, default=0.25, help="density-ratio shrinkage exponent")
    ap.add_argument("--policy", choices=("pshift", "zshift"), default="pshift",
                    help="pshift: P* = P + a(1-P); zshift: first instrument moved by a")
    ap.add_argument("--input", help="CSV sample for --mode estimate")
    ap.add_argument("--output", help="output file (default: standard output)")
    ap.add_argument("--format", choices=("csv", "json"), default=None,
                    help="default: json for estimate, csv for simulate")
    ap.add_argument("--threads", type=int, default=None,
                    help=f"worker processes (default: ${THREADS_ENV} or 1)")
    return ap


def _threads(arg: Optional[int]) -> int:
    if arg is not None:
        return arg
    env = os.environ.get(THREADS_ENV)
    if env is None or not env.strip():
        return 1
    try:
        return int(env)
    except ValueError:
        raise ValueError(f"{THREADS_ENV} must be an integer, got {env!r}") from None


def _policy(args):
    if args.policy == "zshift":
        return ZShift(InstrumentShift(args.a))
    return ProportionalShift(args.a)


def _write(report, fmt: str, output: Optional[str]) -> None:
    if output:
        emit_report(report, fmt, output)
    else:
        sys.stdout.write(render_report(report, fmt))


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    fmt = args.format or ("json" if args.mode == "estimate" else "csv")
    try:
        threads = _threads(args.threads)
        if threads < 1:
            raise ValueError("threads must be at least 1")
        bw = Bandwidths(h1=args.h1, h2=args.h2, delta=args.delta, alpha=args.alpha)
        policy = _policy(args)
        if args.mode == "estimate":
            if not args.input:
                raise ValueError("--mode estimate requires --input")
            config = EstimationConfig(L=args.folds, bw=bw, policy=policy, seed=args.seed)
        else:
            if args.policy == "zshift":
                raise ValueError("simulate mode supports only --policy pshift "
                                 "(the true effect of an instrument shift is not tabulated)")
            config = MCConfig(n=args.n, L=args.folds, replications=args.reps, a=args.a,
                              seed=args.seed, bw=bw)
    except ValueError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    try:
        if args.mode == "estimate":
            try:
                data = ingest_csv(args.input)
            except (IngestionError, OSError) as exc:
                print(f"ingestion error: {exc}", file=sys.stderr)
                return EXIT_INGEST
            report = estimate(data, config)
        else:
            report = run_replications(config, threads=threads)
    except TooManyFailures as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        _write(exc.report, fmt, args.output)
        return EXIT_NUMERIC
    except (NumericalFailure, IdentificationError, ArithmeticError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    try:
        _write(report, fmt, args.output)
    except ReportWriteError as exc:
        print(f"output error: {exc}", file=sys.stderr)
        return EXIT_OUTPUT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
