"""Cross-fitted estimation of the policy relevant treatment effect.

Two passes over the folds:

1. For each fold, fit the propensity, the conditional means, ``zeta`` and the
   density ratio on the complement, then average the first two score blocks
   over the held-out fold. Their fold-weighted average gives ``theta1`` and
   ``theta2``; ``beta`` follows from ``theta1``.
2. Compute outcome residuals for every observation with that ``beta``, fit
   the residual regression on each complement and average the third block to
   get ``theta3``.

Every score block is affine in its own parameter, so the averages solve the
cross-fitted estimating equation exactly.
"""

from __future__ import annotations

import dataclasses
from collections import Counter
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .kernel_smoothing import Bandwidths
from .nuisance import (
    DEFAULT_EPS_P,
    Dataset,
    NuisanceSet,
    Policy,
    ProportionalShift,
    ZShift,
    fit_conditional_means,
    fit_density_ratio,
    fit_g_u_given_p,
    fit_propensity,
    fit_zeta,
    fit_zshift_nuisances,
)
from .score import (
    NumericalFailure,
    ThetaEstimate,
    d_transform,
    first_block_components,
    lambda_gradient,
    lambda_map,
    m_hat_matrix,
    numeric_jacobian_d,
    residual_u,
    sandwich_variance,
    score_rows,
    third_block_components,
)

__all__ = [
    "InsufficientSample",
    "EstimationConfig",
    "FoldPlan",
    "make_folds",
    "CrossFit",
    "EstimateResult",
    "fit_crossfit",
    "estimate",
    "estimating_equation_residual",
    "RESIDUAL_TOL",
]

RESIDUAL_TOL = 1e-10


class InsufficientSample(ValueError):
    """Fewer than two observations per fold."""


@dataclass(frozen=True)
class EstimationConfig:
    """Settings of one estimation run.

    ``kde_normalizer`` selects the constant dividing both kernel density sums
    in the density ratio: ``"train"`` (complement size) or ``"total"``
    (full sample size). The ratio does not depend on it.
    """

    L: int = 5
    bw: Bandwidths = Bandwidths()
    policy: Policy = ProportionalShift(0.5)
    seed: Optional[int] = 0
    z_quantile: float = 1.959964
    eps_p: float = DEFAULT_EPS_P
    kde_normalizer: str = "train"
    jacobian_step: Optional[float] = None

    def __post_init__(self) -> None:
        if int(self.L) != self.L or self.L < 2:
            raise ValueError("L must be an integer of at least 2")
        if not self.z_quantile > 0:
            raise ValueError("z_quantile must be positive")
        if not (0.0 <= self.eps_p < 0.5):
            raise ValueError("eps_p must lie in [0, 0.5)")
        if self.kde_normalizer not in ("train", "total"):
            raise ValueError("kde_normalizer must be 'train' or 'total'")

    @property
    def step(self) -> float:
        return self.bw.delta if self.jacobian_step is None else self.jacobian_step


@dataclass(frozen=True)
class FoldPlan:
    """Fold label (``0 .. L-1``) of every observation."""

    assignments: np.ndarray
    L: int

    @property
    def folds(self) -> list[np.ndarray]:
        return [np.flatnonzero(self.assignments == k) for k in range(self.L)]


def make_folds(n: int, L: int, rng: np.random.Generator) -> FoldPlan:
    """Random split of ``range(n)`` into ``L`` folds whose sizes differ by at most one."""
    if L < 2:
        raise ValueError("L must be at least 2")
    if n < 2 * L:
        raise InsufficientSample(f"need at least {2 * L} observations for {L} folds, got {n}")
    labels = np.empty(n, dtype=int)
    labels[rng.permutation(n)] = np.arange(n) % L
    return FoldPlan(labels, L)


@dataclass
class CrossFit:
    """Per-fold nuisance fits and parameter-free score pieces."""

    data: Dataset
    plan: FoldPlan
    policy: Policy
    nuisances: list[NuisanceSet]
    phat_train: list[np.ndarray]
    m11: list[np.ndarray]
    m21: list[np.ndarray]
    m31: list[np.ndarray] = field(default_factory=list)
    m32: list[np.ndarray] = field(default_factory=list)
    diagnostics: Counter = field(default_factory=Counter)

    def fold_average(self, per_fold: list[np.ndarray]) -> np.ndarray:
        """``(1/L) sum_l mean_{i in I_l}`` of a per-fold array list."""
        return np.mean([np.mean(v, axis=0) for v in per_fold], axis=0)

    def residual(self, theta: ThetaEstimate) -> np.ndarray:
        """Cross-fitted average score at ``theta``, evaluated directly."""
        rows = [np.mean(score_rows(self.data.subset(idx), theta, nuis, self.policy), axis=0)
                for idx, nuis in zip(self.plan.folds, self.nuisances)]
        return np.mean(rows, axis=0)

    def rows_at(self, theta: ThetaEstimate) -> np.ndarray:
        """Score rows in original observation order, assembled from the pieces."""
        k = theta.as_vector().shape[0]
        out = np.empty((self.data.n, k))
        beta = theta.beta
        for idx, a, b, c, d in zip(self.plan.folds, self.m11, self.m21, self.m31, self.m32):
            out[idx] = np.column_stack([a - theta.theta1, b - theta.theta2,
                                        c - theta.theta3 - d @ beta])
        return out


def _fit_first_pass(data: Dataset, config: EstimationConfig, plan: FoldPlan) -> CrossFit:
    diag: Counter = Counter()
    bw, policy = config.bw, config.policy
    nuisances, phat_train, m11, m21 = [], [], [], []
    for held_idx in plan.folds:
        train_idx = np.flatnonzero(plan.assignments != plan.assignments[held_idx[0]])
        if np.intersect1d(train_idx, held_idx).size:
            raise AssertionError("held-out observations leaked into the training fold")
        train, held = data.subset(train_idx), data.subset(held_idx)
        prop, loo = fit_propensity(train, bw, config.eps_p, diag)
        cond_means = fit_conditional_means(train, loo, bw, diag)
        base = NuisanceSet(propensity=prop, cond_means=cond_means, zeta_hat=None,
                           train_index=train_idx)
        zeta = fit_zeta(train, loo, base.xi1_hat, bw, diag)
        extra = {}
        if isinstance(policy, ZShift):
            zr, kappa = fit_zshift_nuisances(train, policy, bw, diag)
            extra = dict(z_density_ratio=zr, kappa=kappa)
        else:
            norm = train.n if config.kde_normalizer == "train" else data.n
            extra = dict(density_ratio=fit_density_ratio(
                loo, policy, bw, prop, z_train=train.z, normalizer=norm, diagnostics=diag))
        nuis = dataclasses.replace(base, zeta_hat=zeta, **extra)
        a, b = first_block_components(held, nuis, policy)
        nuisances.append(nuis)
        phat_train.append(loo)
        m11.append(a)
        m21.append(b)
    return CrossFit(data, plan, policy, nuisances, phat_train, m11, m21, diagnostics=diag)


def fit_crossfit(data: Dataset, config: EstimationConfig,
                 plan: Optional[FoldPlan] = None) -> tuple[CrossFit, ThetaEstimate]:
    """Run both passes and return the fits with the solved parameter vector."""
    if plan is None:
        plan = make_folds(data.n, config.L, np.random.default_rng(config.seed))
    cf = _fit_first_pass(data, config, plan)
    theta1 = cf.fold_average(cf.m11)
    theta2 = cf.fold_average(cf.m21)
    beta = d_transform(theta1)
    p = data.p
    u_all = residual_u(data, beta[:p], beta[p:])
    for k, (held_idx, nuis) in enumerate(zip(plan.folds, cf.nuisances)):
        g_u, d_u = fit_g_u_given_p(cf.phat_train[k], u_all[nuis.train_index], config.bw,
                                   cf.diagnostics)
        nuis = dataclasses.replace(nuis, g_u_given_p=g_u, delta_u_given_p=d_u)
        cf.nuisances[k] = nuis
        m31, m32 = third_block_components(data.subset(held_idx), nuis, config.policy)
        cf.m31.append(m31)
        cf.m32.append(m32)
    theta3 = float(cf.fold_average([c - d @ beta for c, d in zip(cf.m31, cf.m32)]))
    return cf, ThetaEstimate(theta1, theta2, theta3)


@dataclass(frozen=True)
class EstimateResult:
    prte_hat: float
    se: float
    ci_lo: float
    ci_hi: float
    theta: ThetaEstimate
    diagnostics: dict
    n: int
    L: int
    var_prte: float
    equation_residual: float
    crossfit: Optional[CrossFit] = field(default=None, repr=False, compare=False)

    def to_dict(self) -> dict:
        return {
            "prte_hat": self.prte_hat,
            "se": self.se,
            "ci_lo": self.ci_lo,
            "ci_hi": self.ci_hi,
            "theta1": self.theta.theta1.tolist(),
            "theta2": self.theta.theta2.tolist(),
            "theta3": self.theta.theta3,
            "beta0": self.theta.beta0.tolist(),
            "beta1": self.theta.beta1.tolist(),
            "n": self.n,
            "L": self.L,
            "diagnostics": dict(self.diagnostics),
        }


def estimate(data: Dataset, config: EstimationConfig = EstimationConfig(),
             keep_fits: bool = False) -> EstimateResult:
    """Point estimate, standard error and symmetric confidence interval."""
    cf, theta = fit_crossfit(data, config)
    prte = lambda_map(theta)
    resid = np.max(np.abs(cf.fold_average(
        [np.column_stack([a - theta.theta1, b - theta.theta2, c - theta.theta3 - d @ theta.beta])
         for a, b, c, d in zip(cf.m11, cf.m21, cf.m31, cf.m32)])))
    if not resid <= RESIDUAL_TOL:
        raise NumericalFailure(f"estimating equation residual {resid:g} exceeds tolerance")
    jac = numeric_jacobian_d(theta.theta1, config.step)
    m32_all = np.concatenate(cf.m32, axis=0)
    m_hat = m_hat_matrix(m32_all, theta, jac_d=jac)
    lam = lambda_gradient(theta, jac_d=jac)
    sw = sandwich_variance(cf.rows_at(theta), m_hat, lam)
    se = sw.se(data.n)
    half = config.z_quantile * se
    diagnostics = dict(cf.diagnostics)
    return EstimateResult(prte_hat=prte, se=se, ci_lo=prte - half, ci_hi=prte + half,
                          theta=theta, diagnostics=diagnostics, n=data.n, L=config.L,
                          var_prte=sw.var_prte, equation_residual=float(resid),
                          crossfit=cf if keep_fits else None)


def estimating_equation_residual(data: Dataset, config: EstimationConfig,
                                 theta: ThetaEstimate) -> np.ndarray:
    """Cross-fitted mean score at an arbitrary ``theta``.

    Refits the nuisances with the same folds and the slope estimate implied by
    the data, so at the returned estimate the result is numerically zero.
    """
    cf, _ = fit_crossfit(data, config)
    return cf.residual(theta)
