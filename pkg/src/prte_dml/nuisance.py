"""Observed data, counterfactual policies and the kernel fits of the nuisance
functions used by the orthogonal score.

All fitted objects are closures over copies of their training arrays; once
built they never change, so they can be evaluated from several threads.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Optional, Union

import numpy as np

from .kernel_smoothing import (
    Bandwidths,
    central_difference,
    kde,
    nw_from_weights,
    nw_regress,
    product_kernel_weights,
)

__all__ = [
    "Dataset",
    "identity_features",
    "ProportionalShift",
    "GeneralPShift",
    "ZShift",
    "Policy",
    "NuisanceSet",
    "DEFAULT_EPS_P",
    "fit_propensity",
    "fit_density_ratio",
    "fit_conditional_means",
    "xi1_eval",
    "fit_zeta",
    "fit_g_u_given_p",
    "fit_zshift_nuisances",
]

DEFAULT_EPS_P = 0.001


def identity_features(x: np.ndarray) -> np.ndarray:
    """Feature map returning the covariates unchanged."""
    return np.asarray(x, dtype=float)


@dataclass(frozen=True)
class Dataset:
    """Observed sample ``(Y, S, X, Z)`` plus the known feature maps.

    ``mu0`` and ``mu1`` are applied to the whole ``(n, d_x)`` covariate matrix
    at once and must return an ``(n, p)`` array.
    """

    y: np.ndarray
    s: np.ndarray
    x: np.ndarray
    z: np.ndarray
    mu0: Callable[[np.ndarray], np.ndarray] = identity_features
    mu1: Callable[[np.ndarray], np.ndarray] = identity_features

    def __post_init__(self) -> None:
        y = np.asarray(self.y, dtype=float).reshape(-1)
        s = np.asarray(self.s, dtype=float).reshape(-1)
        x = np.asarray(self.x, dtype=float)
        z = np.asarray(self.z, dtype=float)
        x = x[:, None] if x.ndim == 1 else x
        z = z[:, None] if z.ndim == 1 else z
        n = y.shape[0]
        if n < 1:
            raise ValueError("dataset is empty")
        if s.shape[0] != n or x.shape[0] != n or z.shape[0] != n:
            raise ValueError("y, s, x and z must have the same number of rows")
        if not np.all((s == 0.0) | (s == 1.0)):
            raise ValueError("treatment indicator must be 0 or 1")
        if not (np.all(np.isfinite(y)) and np.all(np.isfinite(x)) and np.all(np.isfinite(z))):
            raise ValueError("dataset contains non-finite values")
        # contiguous copies keep BLAS reductions independent of the caller's layout
        for name, value in (("y", y), ("s", s), ("x", x), ("z", z)):
            object.__setattr__(self, name, np.array(value, dtype=float, order="C"))

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @cached_property
    def features0(self) -> np.ndarray:
        return np.asarray(self.mu0(self.x), dtype=float).reshape(self.n, -1)

    @cached_property
    def features1(self) -> np.ndarray:
        return np.asarray(self.mu1(self.x), dtype=float).reshape(self.n, -1)

    @property
    def p(self) -> int:
        """Dimension of each feature map."""
        return self.features0.shape[1]

    def subset(self, index) -> "Dataset":
        index = np.asarray(index)
        return Dataset(y=self.y[index], s=self.s[index], x=self.x[index], z=self.z[index],
                       mu0=self.mu0, mu1=self.mu1)


@dataclass(frozen=True)
class ProportionalShift:
    """``P* = P + a (1 - P)``."""

    a: float = 0.5

    def __post_init__(self) -> None:
        if not (0.0 <= self.a < 1.0):
            raise ValueError(f"a must lie in [0, 1), got {self.a!r}")

    def pstar(self, p, z=None):
        p = np.asarray(p, dtype=float)
        return p + self.a * (1.0 - p)

    def dpstar(self, p, z=None):
        return np.full(np.shape(p), 1.0 - self.a)


@dataclass(frozen=True)
class GeneralPShift:
    """User-supplied ``P*(p, z)`` and its partial derivative in ``p``.

    Both callables receive ``p`` of shape ``(m,)`` and ``z`` of shape
    ``(m, d_z)`` and return arrays of shape ``(m,)``.
    """

    pstar_fn: Callable[[np.ndarray, np.ndarray], np.ndarray]
    dpstar_fn: Callable[[np.ndarray, np.ndarray], np.ndarray]

    def pstar(self, p, z):
        return np.asarray(self.pstar_fn(np.asarray(p, float), z), dtype=float)

    def dpstar(self, p, z):
        return np.broadcast_to(np.asarray(self.dpstar_fn(np.asarray(p, float), z), float),
                               np.shape(p)).copy()


@dataclass(frozen=True)
class ZShift:
    """Counterfactual policy acting on the instruments: ``P* = g(Z*(Z))``."""

    zstar: Callable[[np.ndarray], np.ndarray]

    def apply(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        return np.asarray(self.zstar(z), dtype=float).reshape(z.shape)


Policy = Union[ProportionalShift, GeneralPShift, ZShift]


def xi1_eval(mu0x, mu1x, y, p, means) -> np.ndarray:
    """Stacked residual outer product ``vec(v (v', r))``.

    ``v = ((1-p)(mu0x - m0); p (mu1x - m1))`` and ``r = y - gy`` where
    ``means = (m0, m1, gy)`` are the conditional means at ``p``. The layout is
    column major: the first ``4 p^2`` entries are ``vec(v v')`` and the last
    ``2p`` are ``v r``. Works on a single observation or on a batch.
    """
    m0, m1, gy = means
    mu0x = np.asarray(mu0x, dtype=float)
    single = mu0x.ndim == 1
    mu0x = np.atleast_2d(mu0x)
    mu1x = np.atleast_2d(np.asarray(mu1x, dtype=float))
    m0 = np.atleast_2d(np.asarray(m0, dtype=float))
    m1 = np.atleast_2d(np.asarray(m1, dtype=float))
    p = np.atleast_1d(np.asarray(p, dtype=float))[:, None]
    r = np.atleast_1d(np.asarray(y, dtype=float) - np.asarray(gy, dtype=float))
    v = np.concatenate([(1.0 - p) * (mu0x - m0), p * (mu1x - m1)], axis=1)
    outer = v[:, :, None] * v[:, None, :]
    m = v.shape[0]
    vec_b = outer.transpose(0, 2, 1).reshape(m, -1)
    out = np.concatenate([vec_b, v * r[:, None]], axis=1)
    return out[0] if single else out


@dataclass(frozen=True)
class NuisanceSet:
    """Fitted nuisance functions for one cross-fitting fold.

    ``train_index`` records the observations the functions were fit on so that
    callers can check that a held-out point never sits in its own training set.
    Residual-based members (``g_u_given_p``, ``delta_u_given_p``) are filled in
    by a second pass once slope estimates exist.
    """

    propensity: Callable[[np.ndarray], np.ndarray]
    cond_means: Callable[[np.ndarray], tuple]
    zeta_hat: Callable[[np.ndarray], np.ndarray]
    density_ratio: Optional[Callable[[np.ndarray], np.ndarray]] = None
    g_u_given_p: Optional[Callable[[np.ndarray], np.ndarray]] = None
    delta_u_given_p: Optional[Callable[[np.ndarray], np.ndarray]] = None
    z_density_ratio: Optional[Callable[[np.ndarray], np.ndarray]] = None
    kappa: Optional[Callable[[np.ndarray], np.ndarray]] = None
    train_index: Optional[np.ndarray] = field(default=None, repr=False)

    def cond_mean_mu0(self, p):
        return self.cond_means(p)[0]

    def cond_mean_mu1(self, p):
        return self.cond_means(p)[1]

    def cond_mean_y(self, p):
        return self.cond_means(p)[2]

    def xi1_hat(self, mu0x, mu1x, y, p) -> np.ndarray:
        return xi1_eval(mu0x, mu1x, y, p, self.cond_means(np.atleast_1d(p)))


def _as_z(z, d: int) -> tuple[np.ndarray, bool]:
    """Instruments as an ``(m, d)`` array plus a flag for single-point input."""
    z = np.asarray(z, dtype=float)
    if z.ndim == 0 or (z.ndim == 1 and d > 1):
        return z.reshape(1, d), True
    return z.reshape(-1, d), False


def _clamp(values: np.ndarray, eps_p: float, diagnostics: Optional[Counter]) -> np.ndarray:
    out = np.clip(values, eps_p, 1.0 - eps_p)
    if diagnostics is not None:
        diagnostics["propensity_clamp"] += int(np.count_nonzero(out != values))
    return out


def fit_propensity(train: Dataset, bw: Bandwidths, eps_p: float = DEFAULT_EPS_P,
                   diagnostics: Optional[Counter] = None):
    """Kernel regression of ``S`` on ``Z`` with bandwidth ``h1``.

    Returns
    -------
    propensity : callable
        Maps instruments of shape ``(m, d_z)`` to clamped scores using every
        training point.
    loo : ndarray, shape (n_train,)
        Leave-one-out fitted scores of the training points themselves.
    """
    if train.n < 2:
        raise ValueError("propensity fit needs at least two observations")
    z_tr = train.z.copy()
    s_tr = train.s.copy()
    w = product_kernel_weights(z_tr, z_tr, bw.h1)
    np.fill_diagonal(w, 0.0)
    loo = _clamp(nw_from_weights(w, s_tr, diagnostics), eps_p, diagnostics)

    def propensity(z):
        z2, single = _as_z(z, z_tr.shape[1])
        out = _clamp(nw_from_weights(product_kernel_weights(z_tr, z2, bw.h1), s_tr,
                                     diagnostics), eps_p, diagnostics)
        return float(out[0]) if single else out

    return propensity, loo


def _ratio(num, den, diagnostics: Optional[Counter]):
    num = np.asarray(num, dtype=float)
    den = np.asarray(den, dtype=float)
    bad = den <= 0.0
    if np.any(bad) and diagnostics is not None:
        diagnostics["ratio_fallback"] += int(bad.sum())
    return np.where(bad, 1.0, num / np.where(bad, 1.0, den))


def fit_density_ratio(phat_train, policy: Policy, bw: Bandwidths,
                      propensity: Callable, z_train=None,
                      normalizer: Optional[float] = None,
                      diagnostics: Optional[Counter] = None):
    """Shrunk ratio ``rho(f_{P*}(g(z)) / f_P(g(z)))`` of two kernel densities.

    The counterfactual sample is the policy applied to the training scores.
    Both densities share one normalizer, so its value does not affect the
    ratio. A zero denominator (query outside the support of the training
    scores) yields a ratio of one and is counted as ``ratio_fallback``.

    Returns a callable of the instruments; ``.at_p`` evaluates the same ratio
    directly at score values.
    """
    if isinstance(policy, ZShift):
        raise TypeError("instrument shifts use fit_zshift_nuisances")
    phat = np.asarray(phat_train, dtype=float).copy()
    if isinstance(policy, GeneralPShift):
        if z_train is None:
            raise ValueError("a general p-shift needs the training instruments")
        pstar_tr = policy.pstar(phat, np.asarray(z_train, dtype=float))
    else:
        pstar_tr = policy.pstar(phat)
    norm = float(phat.shape[0] if normalizer is None else normalizer)

    def at_p(p):
        p = np.atleast_1d(np.asarray(p, dtype=float))
        num = kde(pstar_tr, p, bw.h2, norm)
        den = kde(phat, p, bw.h2, norm)
        return bw.rho(_ratio(num, den, diagnostics))

    def density_ratio(z):
        z = np.asarray(z, dtype=float)
        single = np.ndim(propensity(z)) == 0
        out = at_p(propensity(z))
        return float(out[0]) if single else out

    density_ratio.at_p = at_p
    return density_ratio


def fit_conditional_means(train: Dataset, phat_train, bw: Bandwidths,
                          diagnostics: Optional[Counter] = None):
    """Kernel regressions of ``mu0(X)``, ``mu1(X)`` and ``Y`` on the fitted score.

    Returns one callable mapping scores ``(m,)`` to the tuple
    ``(E[mu0|P] (m, p), E[mu1|P] (m, p), E[Y|P] (m,))``; the three regressions
    share their kernel weights.
    """
    phat = np.asarray(phat_train, dtype=float).copy()
    p_dim = train.p
    targets = np.column_stack([train.features0, train.features1, train.y])

    def cond_means(p):
        p = np.atleast_1d(np.asarray(p, dtype=float))
        fit = nw_from_weights(product_kernel_weights(phat, p, bw.h2), targets, diagnostics)
        return fit[:, :p_dim], fit[:, p_dim:2 * p_dim], fit[:, 2 * p_dim]

    return cond_means


def fit_zeta(train: Dataset, phat_train, xi1_hat: Callable, bw: Bandwidths,
             diagnostics: Optional[Counter] = None):
    """Regression on ``Z`` of the ``p``-derivative of the fitted ``xi1``.

    The derivative is a central difference of step ``delta`` taken at each
    training point's own fitted score; the regression uses bandwidth ``h1``.
    """
    phat = np.asarray(phat_train, dtype=float)
    f0, f1, y = train.features0, train.features1, train.y
    xi2 = central_difference(lambda q: xi1_hat(f0, f1, y, q), phat, bw.delta)
    z_tr = train.z.copy()

    def zeta_hat(z):
        return nw_regress(z_tr, xi2, z, bw.h1, diagnostics)

    zeta_hat.targets = xi2
    return zeta_hat


def fit_g_u_given_p(phat_train, residuals_u, bw: Bandwidths,
                    diagnostics: Optional[Counter] = None):
    """Kernel regression of the outcome residuals on the fitted score.

    Returns ``(g, delta)`` where ``delta`` is the central difference of ``g``
    with step ``bw.delta``. Evaluating either at a counterfactual score is the
    caller's job, as is the chain-rule factor that goes with it.
    """
    phat = np.asarray(phat_train, dtype=float).copy()
    u = np.asarray(residuals_u, dtype=float).copy()

    def g_u_given_p(p):
        return nw_regress(phat, u, p, bw.h2, diagnostics)

    def delta_u_given_p(p):
        return central_difference(g_u_given_p, p, bw.delta)

    return g_u_given_p, delta_u_given_p


def fit_zshift_nuisances(train: Dataset, zstar: Union[ZShift, Callable], bw: Bandwidths,
                         diagnostics: Optional[Counter] = None):
    """Instrument density ratio and the diagonal scaling ``kappa``.

    ``z_density_ratio(z) = rho(f_{Z*(Z)}(z) / f_Z(z))`` with product-kernel
    densities of bandwidth ``h1``. ``kappa(z)`` returns the diagonal of
    ``diag(E[mu | Z = z])^{-1} diag(E[mu | Z*(Z) = z])`` as an ``(m, 2p)``
    array; a zero denominator entry is replaced by one and counted as
    ``kappa_fallback``.
    """
    shift = zstar if isinstance(zstar, ZShift) else ZShift(zstar)
    z_tr = train.z.copy()
    zs_tr = shift.apply(z_tr)
    mu = np.column_stack([train.features0, train.features1])

    def z_density_ratio(z):
        z2, _ = _as_z(z, z_tr.shape[1])
        num = kde(zs_tr, z2, bw.h1)
        den = kde(z_tr, z2, bw.h1)
        return bw.rho(_ratio(num, den, diagnostics))

    def kappa(z):
        z2, _ = _as_z(z, z_tr.shape[1])
        den = nw_from_weights(product_kernel_weights(z_tr, z2, bw.h1), mu, diagnostics)
        num = nw_from_weights(product_kernel_weights(zs_tr, z2, bw.h1), mu, diagnostics)
        bad = den == 0.0
        if np.any(bad) and diagnostics is not None:
            diagnostics["kappa_fallback"] += int(bad.sum())
        return np.where(bad, 1.0, num / np.where(bad, 1.0, den))

    return z_density_ratio, kappa
