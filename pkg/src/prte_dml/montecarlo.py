"""Monte Carlo replication study on the simulation design.

Every replication draws its own sample from a seed derived from the master
seed and the replication index, so the report does not depend on how the
replications are scheduled across workers.
"""

from __future__ import annotations

import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .dgp import DgpParams, generate_sample, true_prte
from .estimator import EstimationConfig, estimate
from .kernel_smoothing import Bandwidths
from .nuisance import Policy, ProportionalShift, ZShift

__all__ = [
    "MCConfig",
    "InstrumentShift",
    "identity_zshift",
    "MCReport",
    "ReplicationOutcome",
    "TooManyFailures",
    "MAX_FAILURE_SHARE",
    "replication_seed",
    "run_one",
    "run_replications",
    "summarize",
]

MAX_FAILURE_SHARE = 0.05
# errors that mark a single replication as failed instead of stopping the study
_RECOVERABLE = (ArithmeticError, np.linalg.LinAlgError, ValueError)


@dataclass(frozen=True)
class MCConfig:
    """Design of a replication study.

    ``policy`` overrides the proportional shift built from ``a``; the true
    effect is then taken from ``truth`` (required for non-proportional
    policies).
    """

    n: int = 500
    L: int = 5
    replications: int = 1000
    a: float = 0.5
    seed: int = 0
    bw: Bandwidths = Bandwidths()
    z_quantile: float = 1.959964
    policy: Optional[Policy] = None
    truth: Optional[float] = None
    params: DgpParams = DgpParams()

    def __post_init__(self) -> None:
        if int(self.replications) != self.replications or self.replications < 1:
            raise ValueError("replications must be a positive integer")
        if int(self.n) != self.n or self.n < 1:
            raise ValueError("n must be a positive integer")
        if self.policy is not None and not isinstance(self.policy, ProportionalShift) \
                and self.truth is None:
            raise ValueError("a true effect must be supplied for this policy")

    @property
    def effective_policy(self) -> Policy:
        return ProportionalShift(self.a) if self.policy is None else self.policy

    def true_effect(self) -> float:
        if self.truth is not None:
            return float(self.truth)
        return true_prte(self.effective_policy.a, self.params)


@dataclass(frozen=True)
class ReplicationOutcome:
    index: int
    estimate: float = np.nan
    se: float = np.nan
    error: Optional[str] = None
    equation_residual: float = np.nan

    @property
    def failed(self) -> bool:
        return self.error is not None


@dataclass(frozen=True)
class MCReport:
    """Aggregate of a replication study.

    ``mean``, ``bias``, ``rmse`` and ``coverage`` use the non-failed
    replications only. ``estimates`` and ``std_errors`` keep the per
    replication values in index order (NaN for failures).
    """

    n: int
    L: int
    replications: int
    true_prte: float
    mean: float
    bias: float
    rmse: float
    coverage: float
    failures: int
    wall_time: float
    max_equation_residual: float = float("nan")
    estimates: tuple = field(default=(), repr=False)
    std_errors: tuple = field(default=(), repr=False)

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "L": self.L,
            "replications": self.replications,
            "true_prte": self.true_prte,
            "mean": self.mean,
            "bias": self.bias,
            "rmse": self.rmse,
            "coverage": self.coverage,
            "failures": self.failures,
            "wall_time": self.wall_time,
            "max_equation_residual": self.max_equation_residual,
        }


class TooManyFailures(RuntimeError):
    """More than ``MAX_FAILURE_SHARE`` of the replications failed."""

    def __init__(self, report: MCReport):
        super().__init__(f"{report.failures} of {report.replications} replications failed")
        self.report = report


def replication_seed(master_seed: int, index: int) -> np.random.SeedSequence:
    """Seed sequence of replication ``index``, independent of scheduling."""
    return np.random.SeedSequence(master_seed, spawn_key=(index,))


def run_one(config: MCConfig, index: int) -> ReplicationOutcome:
    """Draw, estimate and record one replication."""
    rng = np.random.default_rng(replication_seed(config.seed, index))
    data = generate_sample(config.n, rng, config.params)
    fold_seed = int(rng.integers(2**63 - 1))
    est_config = EstimationConfig(L=config.L, bw=config.bw, policy=config.effective_policy,
                                  seed=fold_seed, z_quantile=config.z_quantile)
    try:
        res = estimate(data, est_config)
    except _RECOVERABLE as exc:
        return ReplicationOutcome(index, error=f"{type(exc).__name__}: {exc}")
    if not (np.isfinite(res.prte_hat) and np.isfinite(res.se)):
        return ReplicationOutcome(index, error="non-finite estimate")
    return ReplicationOutcome(index, res.prte_hat, res.se,
                              equation_residual=res.equation_residual)


def summarize(config: MCConfig, outcomes: list[ReplicationOutcome], truth: float,
              wall_time: float = 0.0) -> MCReport:
    """Ordered reduction of replication outcomes into a report."""
    outcomes = sorted(outcomes, key=lambda o: o.index)
    est = np.array([o.estimate for o in outcomes], dtype=float)
    se = np.array([o.se for o in outcomes], dtype=float)
    ok = np.array([not o.failed for o in outcomes])
    if ok.any():
        e, s = est[ok], se[ok]
        mean = float(np.mean(e))
        rmse = float(np.sqrt(np.mean((e - truth) ** 2)))
        coverage = float(np.mean(np.abs(e - truth) <= config.z_quantile * s))
        max_resid = float(max(o.equation_residual for o in outcomes if not o.failed))
    else:
        mean = rmse = coverage = max_resid = float("nan")
    return MCReport(n=config.n, L=config.L, replications=len(outcomes), true_prte=truth,
                    mean=mean, bias=mean - truth, rmse=rmse, coverage=coverage,
                    failures=int((~ok).sum()), wall_time=wall_time,
                    max_equation_residual=max_resid,
                    estimates=tuple(est.tolist()), std_errors=tuple(se.tolist()))


def _run_index(args):
    config, index = args
    return run_one(config, index)


def run_replications(config: MCConfig, threads: int = 1) -> MCReport:
    """Run the study, in parallel worker processes when ``threads > 1``.

    Raises
    ------
    TooManyFailures
        If more than 5% of the replications fail; the partial report is
        attached to the exception.
    """
    if threads < 1:
        raise ValueError("threads must be at least 1")
    truth = config.true_effect()
    start = time.perf_counter()
    jobs = [(config, r) for r in range(config.replications)]
    if threads == 1:
        outcomes = [_run_index(job) for job in jobs]
    else:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            outcomes = list(pool.map(_run_index, jobs, chunksize=max(1, len(jobs) // (4 * threads))))
    report = summarize(config, outcomes, truth, time.perf_counter() - start)
    if report.failures > MAX_FAILURE_SHARE * report.replications:
        raise TooManyFailures(report)
    return report


@dataclass(frozen=True)
class InstrumentShift:
    """Picklable ``Z* = Z + amount * e_k``: moves one instrument by a constant."""

    amount: float = 0.0
    column: int = 0

    def __call__(self, z):
        z = np.array(z, dtype=float, copy=True)
        if self.amount:
            z[..., self.column] += self.amount
        return z


def identity_zshift() -> ZShift:
    """Null instrument policy ``Z* = Z``."""
    return ZShift(InstrumentShift(0.0))
