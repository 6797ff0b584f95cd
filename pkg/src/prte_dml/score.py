"""Orthogonal moment function for the policy relevant treatment effect, the
maps from moments to the effect, and the sandwich variance.

The parameter vector is ``theta = (theta1, theta2, theta3)`` with
``theta1 = vec(B, A)`` of length ``2p(2p+1)``, ``theta2`` of length ``2p`` and
a scalar ``theta3``. Slopes are recovered as ``beta = B^{-1} A`` and the effect
is ``theta2[p:]' beta1 - theta2[:p]' beta0 + theta3``.

Score functions take a batch of observations as a :class:`Dataset` and return
one row per observation.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import NamedTuple, Optional

import numpy as np

from .kernel_smoothing import central_difference
from .nuisance import Dataset, NuisanceSet, Policy, ZShift

__all__ = [
    "IdentificationError",
    "NumericalFailure",
    "COND_LIMIT",
    "ThetaEstimate",
    "theta_dims",
    "split_theta1",
    "d_transform",
    "lambda_map",
    "residual_u",
    "score_m1",
    "score_m2",
    "score_m3",
    "score_m2_zshift",
    "score_m3_zshift",
    "Decomposed",
    "score_decomposed",
    "first_block_components",
    "third_block_components",
    "score_rows",
    "numeric_jacobian_d",
    "lambda_gradient",
    "m_hat_matrix",
    "SandwichResult",
    "sandwich_variance",
]

COND_LIMIT = 1e12


class IdentificationError(ArithmeticError):
    """The second-moment matrix of the residualised features is (near) singular."""


class NumericalFailure(ArithmeticError):
    """A variance computation produced non-finite or negative output."""


def theta_dims(p: int) -> tuple[int, int, int]:
    """Lengths of ``(theta1, theta2, theta3)`` for feature dimension ``p``."""
    return 2 * p * (2 * p + 1), 2 * p, 1


def _p_from_theta1(k1: int) -> int:
    # k1 = 2p(2p+1)  =>  q = 2p solves q^2 + q - k1 = 0
    q = int(round((-1 + np.sqrt(1 + 4 * k1)) / 2))
    if q * (q + 1) != k1 or q % 2:
        raise ValueError(f"length {k1} is not 2p(2p+1) for an integer p")
    return q // 2


def split_theta1(theta1) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(B, A)`` with ``B`` read column major from the leading entries."""
    theta1 = np.asarray(theta1, dtype=float)
    q = 2 * _p_from_theta1(theta1.shape[0])
    return theta1[: q * q].reshape(q, q, order="F"), theta1[q * q:]


def d_transform(theta1) -> np.ndarray:
    """Solve ``B beta = A`` for ``beta = (beta0; beta1)``.

    Raises :class:`IdentificationError` when the condition number of ``B``
    exceeds ``COND_LIMIT`` or ``B`` is singular.
    """
    b, a = split_theta1(theta1)
    if not (np.all(np.isfinite(b)) and np.all(np.isfinite(a))):
        raise IdentificationError("non-finite moment matrix")
    cond = np.linalg.cond(b)
    if not np.isfinite(cond) or cond > COND_LIMIT:
        raise IdentificationError(f"moment matrix is ill-conditioned (cond={cond:.3g})")
    try:
        return np.linalg.solve(b, a)
    except np.linalg.LinAlgError as exc:  # pragma: no cover - caught by cond check
        raise IdentificationError(str(exc)) from exc


@dataclass(frozen=True)
class ThetaEstimate:
    theta1: np.ndarray
    theta2: np.ndarray
    theta3: float

    def __post_init__(self) -> None:
        t1 = np.asarray(self.theta1, dtype=float).reshape(-1)
        t2 = np.asarray(self.theta2, dtype=float).reshape(-1)
        p = _p_from_theta1(t1.shape[0])
        if t2.shape[0] != 2 * p:
            raise ValueError(f"theta2 must have length {2 * p}")
        object.__setattr__(self, "theta1", t1)
        object.__setattr__(self, "theta2", t2)
        object.__setattr__(self, "theta3", float(self.theta3))

    @property
    def p(self) -> int:
        return self.theta2.shape[0] // 2

    @cached_property
    def beta(self) -> np.ndarray:
        return d_transform(self.theta1)

    @property
    def beta0(self) -> np.ndarray:
        return self.beta[: self.p]

    @property
    def beta1(self) -> np.ndarray:
        return self.beta[self.p:]

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.theta1, self.theta2, [self.theta3]])

    @classmethod
    def from_vector(cls, vec, p: int) -> "ThetaEstimate":
        vec = np.asarray(vec, dtype=float)
        k1, k2, _ = theta_dims(p)
        if vec.shape[0] != k1 + k2 + 1:
            raise ValueError(f"theta vector must have length {k1 + k2 + 1}")
        return cls(vec[:k1], vec[k1:k1 + k2], vec[k1 + k2])


def lambda_map(theta: ThetaEstimate) -> float:
    """Effect implied by the moments: ``theta2_1' beta1 - theta2_0' beta0 + theta3``."""
    p = theta.p
    return float(theta.theta2[p:] @ theta.beta1 - theta.theta2[:p] @ theta.beta0
                 + theta.theta3)


def residual_u(data: Dataset, beta0, beta1) -> np.ndarray:
    """``y - (1 - s) mu0(x)' beta0 - s mu1(x)' beta1`` per observation."""
    return (data.y - (1.0 - data.s) * (data.features0 @ np.asarray(beta0, float))
            - data.s * (data.features1 @ np.asarray(beta1, float)))


def _features(data: Dataset) -> np.ndarray:
    return np.column_stack([data.features0, data.features1])


def _selected_features(data: Dataset) -> np.ndarray:
    """``((1 - s) mu0(x)', s mu1(x)')`` per observation."""
    return np.column_stack([(1.0 - data.s)[:, None] * data.features0,
                            data.s[:, None] * data.features1])


def _vec(values, n: int) -> np.ndarray:
    return np.broadcast_to(np.asarray(values, dtype=float), (n,))


def score_m1(data: Dataset, theta: ThetaEstimate, nuisance: NuisanceSet,
             adjusted: bool = True) -> np.ndarray:
    """``xi1(X, Y, g(Z)) - theta1 + zeta(Z) (S - g(Z))``."""
    ph = _vec(nuisance.propensity(data.z), data.n)
    out = nuisance.xi1_hat(data.features0, data.features1, data.y, ph) - theta.theta1
    if adjusted:
        out = out + np.asarray(nuisance.zeta_hat(data.z)) * (data.s - ph)[:, None]
    return np.atleast_2d(out)


def score_m2(data: Dataset, theta: ThetaEstimate, nuisance: NuisanceSet, policy: Policy,
             adjusted: bool = True) -> np.ndarray:
    """``mu (P*(g) - g) - theta2 + mu (dP*(g) - 1)(S - g)`` with ``mu = (mu0', mu1')'``."""
    if isinstance(policy, ZShift):
        return score_m2_zshift(data, theta, nuisance, policy, adjusted)
    ph = _vec(nuisance.propensity(data.z), data.n)
    mu = _features(data)
    out = mu * (policy.pstar(ph, data.z) - ph)[:, None] - theta.theta2
    if adjusted:
        out = out + mu * ((policy.dpstar(ph, data.z) - 1.0) * (data.s - ph))[:, None]
    return out


def score_m3(data: Dataset, theta: ThetaEstimate, nuisance: NuisanceSet, policy: Policy,
             adjusted: bool = True) -> np.ndarray:
    """Third block of the score; see the module docstring for notation.

    ``g_U(P*) - U - theta3 + r (U - g_U(g)) + (D_U(P*) dP* - r D_U(g)) (S - g)``
    where ``r`` is the density ratio and ``D_U`` the derivative of ``g_U``.
    """
    if isinstance(policy, ZShift):
        return score_m3_zshift(data, theta, nuisance, policy, adjusted)
    ph = _vec(nuisance.propensity(data.z), data.n)
    ps = policy.pstar(ph, data.z)
    u = residual_u(data, theta.beta0, theta.beta1)
    g_u = nuisance.g_u_given_p
    out = g_u(ps) - u - theta.theta3
    if adjusted:
        ratio = _vec(nuisance.density_ratio(data.z), data.n)
        dps = policy.dpstar(ph, data.z)
        d_u = nuisance.delta_u_given_p
        out = (out + ratio * (u - g_u(ph))
               + (d_u(ps) * dps - ratio * d_u(ph)) * (data.s - ph))
    return out


def score_m2_zshift(data: Dataset, theta: ThetaEstimate, nuisance: NuisanceSet,
                    policy: ZShift, adjusted: bool = True) -> np.ndarray:
    """``mu (g(Z*) - g(Z)) - theta2 + mu o (kappa(Z) r(Z) - 1)(S - g(Z))``."""
    ph = _vec(nuisance.propensity(data.z), data.n)
    ph_star = _vec(nuisance.propensity(policy.apply(data.z)), data.n)
    mu = _features(data)
    out = mu * (ph_star - ph)[:, None] - theta.theta2
    if adjusted:
        ratio = _vec(nuisance.z_density_ratio(data.z), data.n)
        kap = np.asarray(nuisance.kappa(data.z)).reshape(data.n, -1)
        out = out + mu * (kap * ratio[:, None] - 1.0) * (data.s - ph)[:, None]
    return out


def score_m3_zshift(data: Dataset, theta: ThetaEstimate, nuisance: NuisanceSet,
                    policy: ZShift, adjusted: bool = True) -> np.ndarray:
    """``g_U(g(Z*)) - U - theta3 + r(Z) (U - g_U(g(Z)))``."""
    ph = _vec(nuisance.propensity(data.z), data.n)
    ph_star = _vec(nuisance.propensity(policy.apply(data.z)), data.n)
    u = residual_u(data, theta.beta0, theta.beta1)
    g_u = nuisance.g_u_given_p
    out = g_u(ph_star) - u - theta.theta3
    if adjusted:
        ratio = _vec(nuisance.z_density_ratio(data.z), data.n)
        out = out + ratio * (u - g_u(ph))
    return out


class Decomposed(NamedTuple):
    """Parameter-free pieces of the score.

    ``m1 = m11 - theta1``, ``m2 = m21 - theta2`` and
    ``m3 = m31 - theta3 - m32' beta``.
    """

    m11: np.ndarray
    m21: np.ndarray
    m31: np.ndarray
    m32: np.ndarray


def first_block_components(data: Dataset, nuisance: NuisanceSet,
                           policy: Policy) -> tuple[np.ndarray, np.ndarray]:
    """``(m11, m21)``; these do not need the residual regressions."""
    zero = ThetaEstimate(np.zeros(theta_dims(data.p)[0]), np.zeros(2 * data.p), 0.0)
    return score_m1(data, zero, nuisance), score_m2(data, zero, nuisance, policy)


def third_block_components(data: Dataset, nuisance: NuisanceSet,
                           policy: Policy) -> tuple[np.ndarray, np.ndarray]:
    """``(m31, m32)``."""
    ph = _vec(nuisance.propensity(data.z), data.n)
    g_u = nuisance.g_u_given_p
    y, s = data.y, data.s
    if isinstance(policy, ZShift):
        ph_star = _vec(nuisance.propensity(policy.apply(data.z)), data.n)
        ratio = _vec(nuisance.z_density_ratio(data.z), data.n)
        m31 = (g_u(ph_star) - y) + ratio * (y - g_u(ph))
    else:
        ps = policy.pstar(ph, data.z)
        dps = policy.dpstar(ph, data.z)
        ratio = _vec(nuisance.density_ratio(data.z), data.n)
        d_u = nuisance.delta_u_given_p
        m31 = ((g_u(ps) - y) + ratio * (y - g_u(ph))
               + d_u(ps) * dps * (s - ph) - ratio * d_u(ph) * (s - ph))
    m32 = (ratio - 1.0)[:, None] * _selected_features(data)
    return m31, m32


def score_decomposed(data: Dataset, nuisance: NuisanceSet, policy: Policy) -> Decomposed:
    m11, m21 = first_block_components(data, nuisance, policy)
    m31, m32 = third_block_components(data, nuisance, policy)
    return Decomposed(m11, m21, m31, m32)


def score_rows(data: Dataset, theta: ThetaEstimate, nuisance: NuisanceSet, policy: Policy,
               adjusted: bool = True) -> np.ndarray:
    """Full score ``(m1', m2', m3)`` per observation, shape ``(n, dim theta)``.

    ``adjusted=False`` drops every correction term and leaves the plain
    plug-in moments, which are not orthogonal.
    """
    m1 = score_m1(data, theta, nuisance, adjusted)
    m2 = score_m2(data, theta, nuisance, policy, adjusted)
    m3 = score_m3(data, theta, nuisance, policy, adjusted)
    return np.column_stack([m1, m2, m3])


def numeric_jacobian_d(theta1, step: float = 0.01) -> np.ndarray:
    """Central-difference Jacobian of :func:`d_transform`, shape ``(2p, 2p(2p+1))``."""
    theta1 = np.asarray(theta1, dtype=float)
    k1 = theta1.shape[0]
    q = 2 * _p_from_theta1(k1)
    jac = np.empty((q, k1))
    for k in range(k1):
        e = np.zeros(k1)
        e[k] = 1.0
        jac[:, k] = central_difference(lambda t: d_transform(theta1 + t * e), 0.0, step)
    return jac


def lambda_gradient(theta: ThetaEstimate, step: float = 0.01,
                    jac_d: Optional[np.ndarray] = None) -> np.ndarray:
    """Derivative of :func:`lambda_map` in ``theta``, as a flat vector.

    The ``theta1`` block goes through the numerical Jacobian of the slope map,
    the ``theta2`` block is ``(-beta0', beta1')`` and the ``theta3`` entry is 1.
    """
    p = theta.p
    if jac_d is None:
        jac_d = numeric_jacobian_d(theta.theta1, step)
    signed = np.concatenate([-theta.theta2[:p], theta.theta2[p:]])
    return np.concatenate([signed @ jac_d, -theta.beta0, theta.beta1, [1.0]])


def m_hat_matrix(m32, theta: ThetaEstimate, step: float = 0.01,
                 jac_d: Optional[np.ndarray] = None) -> np.ndarray:
    """Identity except for the lower-left row ``mean(m32) @ d'(theta1)``.

    Equals minus the Jacobian of the sample-mean score in ``theta``.
    """
    k1, k2, _ = theta_dims(theta.p)
    dim = k1 + k2 + 1
    if jac_d is None:
        jac_d = numeric_jacobian_d(theta.theta1, step)
    m32_bar = np.asarray(m32, dtype=float).reshape(-1, 2 * theta.p).mean(axis=0)
    m = np.eye(dim)
    m[-1, :k1] = m32_bar @ jac_d
    return m


class SandwichResult(NamedTuple):
    var_theta: np.ndarray
    var_prte: float
    sigma: np.ndarray

    def se(self, n: int) -> float:
        """Standard error of the effect estimate for sample size ``n``."""
        return float(np.sqrt(self.var_prte / n))


def sandwich_variance(score_rows_at_hat, m_hat, lambda_grad) -> SandwichResult:
    """``(M'M)^{-1} M' Sigma M (M'M)^{-1}`` and its projection on ``lambda``.

    ``Sigma`` is the average outer product of the score rows; the returned
    ``var_prte`` is the asymptotic variance of ``sqrt(n)`` times the effect
    estimate.
    """
    rows = np.asarray(score_rows_at_hat, dtype=float)
    m_hat = np.asarray(m_hat, dtype=float)
    lam = np.asarray(lambda_grad, dtype=float)
    sigma = rows.T @ rows / rows.shape[0]
    mtm = m_hat.T @ m_hat
    try:
        left = np.linalg.solve(mtm, m_hat.T)
    except np.linalg.LinAlgError as exc:
        raise NumericalFailure("M'M is singular") from exc
    var_theta = left @ sigma @ left.T
    var_prte = float(lam @ var_theta @ lam)
    if not (np.all(np.isfinite(var_theta)) and np.isfinite(var_prte)):
        raise NumericalFailure("non-finite variance")
    scale = float(np.abs(lam) @ np.abs(var_theta) @ np.abs(lam))
    if var_prte < -1e-12 * max(scale, 1e-300):
        raise NumericalFailure(f"negative variance {var_prte:g}")
    return SandwichResult(var_theta, max(var_prte, 0.0), sigma)
