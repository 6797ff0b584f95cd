"""Simulation design and its closed-form ground truths.

Design (all draws independent)::

    eps1, eps2, eps3 ~ N(0, 1)
    U0 = -0.050 eps1 + 0.020 eps3
    U1 =  0.012 eps1 + 0.010 eps2
    US = -1.000 eps1
    X1 ~ N(-2, 2^2),  X2 ~ N(2, 2^2),  Z1 ~ N(-1, 3^2),  Z2 ~ N(1, 3^2)
    Y1 = 0.240 + 0.800 X1 + 0.400 X2 + U1
    Y0 = 0.020 + 0.500 X1 + 0.100 X2 + U0
    S  = 1{0.200 + 0.300 Z1 + 0.100 Z2 - US > 0}
    Y  = S Y1 + (1 - S) Y0

The feature maps are ``mu0(x) = mu1(x) = (x1, x2)`` with no intercept, so the
outcome intercepts end up inside the residual ``Y - (1-S) mu0'b0 - S mu1'b1``.
Functions below that describe the structural error ``U = S U1 + (1-S) U0``
(``true_g_u_given_p``, ``true_delta_u_given_p``) exclude the intercepts; the
``true_residual_*`` helpers include them.

Coefficients may be overridden through :class:`DgpParams`; the closed forms
hold for any values that keep the single-index structure above.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import integrate
from scipy.special import ndtr, ndtri

from .nuisance import Dataset, identity_features

__all__ = [
    "DgpParams",
    "Latent",
    "QuadratureError",
    "generate_sample",
    "norm_pdf",
    "true_propensity",
    "true_fp",
    "true_fpstar",
    "true_density_ratio",
    "true_mte",
    "true_g_u_given_p",
    "true_delta_u_given_p",
    "true_residual_mean",
    "true_residual_slope",
    "true_prte",
    "true_zeta",
    "true_beta",
]

_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class QuadratureError(RuntimeError):
    """Adaptive quadrature did not reach the requested tolerance."""


def norm_pdf(x):
    x = np.asarray(x, dtype=float)
    out = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return out if out.ndim else float(out)


@dataclass(frozen=True)
class DgpParams:
    """Coefficients of the simulation design."""

    y1_coef: tuple = (0.240, 0.800, 0.400)
    y0_coef: tuple = (0.020, 0.500, 0.100)
    s_coef: tuple = (0.200, 0.300, 0.100)
    # rows: U0, U1, US; columns: eps1, eps2, eps3
    loadings: tuple = ((-0.050, 0.0, 0.020), (0.012, 0.010, 0.0), (-1.000, 0.0, 0.0))
    x_mean: tuple = (-2.0, 2.0)
    x_sd: tuple = (2.0, 2.0)
    z_mean: tuple = (-1.0, 1.0)
    z_sd: tuple = (3.0, 3.0)

    def __post_init__(self) -> None:
        us = self.loadings[2]
        if us[1] != 0.0 or us[2] != 0.0 or us[0] == 0.0:
            raise ValueError("US must load on eps1 only")

    @property
    def us_scale(self) -> float:
        return abs(self.loadings[2][0])

    @property
    def index_mean(self) -> float:
        """Mean of mu_S(Z) / |US loading|."""
        c = self.s_coef
        return (c[0] + c[1] * self.z_mean[0] + c[2] * self.z_mean[1]) / self.us_scale

    @property
    def index_sd(self) -> float:
        c = self.s_coef
        var = (c[1] * self.z_sd[0]) ** 2 + (c[2] * self.z_sd[1]) ** 2
        return float(np.sqrt(var)) / self.us_scale

    @property
    def u_slope(self) -> float:
        """Coefficient ``k`` in ``E[U1 - U0 | V = p] = k * Phi^{-1}(1 - p)``.

        With ``US = l eps1`` and ``V = Phi(US / |l|)``, ``eps1 = sign(l) Phi^{-1}(V)
        = -sign(l) Phi^{-1}(1 - V)``.
        """
        sign = -1.0 if self.loadings[2][0] < 0 else 1.0
        return -sign * (self.loadings[1][0] - self.loadings[0][0])

    @property
    def mte_constant(self) -> float:
        """Population mean of the covariate part of the MTE, intercepts included."""
        b1, b0 = self.y1_coef, self.y0_coef
        return (b1[0] - b0[0]) + sum(
            (b1[k + 1] - b0[k + 1]) * self.x_mean[k] for k in range(2))


@dataclass(frozen=True)
class Latent:
    """Unobserved draws kept alongside a generated sample, for oracle tests."""

    u: np.ndarray          # S U1 + (1 - S) U0
    u0: np.ndarray
    u1: np.ndarray
    v: np.ndarray          # innate resistance in (0, 1)
    p: np.ndarray          # true propensity
    eps: np.ndarray = field(repr=False)


def generate_sample(n: int, rng: np.random.Generator, params: DgpParams = DgpParams(),
                    return_latent: bool = False):
    """Draw ``n`` observations from the design.

    Draw order is fixed (eps, then X, then Z) so a seeded generator yields the
    same sample on every platform numpy supports.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    eps = rng.standard_normal((n, 3))
    x = np.asarray(params.x_mean) + np.asarray(params.x_sd) * rng.standard_normal((n, 2))
    z = np.asarray(params.z_mean) + np.asarray(params.z_sd) * rng.standard_normal((n, 2))
    lo = np.asarray(params.loadings, dtype=float)
    u0, u1, us = (eps @ lo.T).T
    b1, b0, c = params.y1_coef, params.y0_coef, params.s_coef
    y1 = b1[0] + b1[1] * x[:, 0] + b1[2] * x[:, 1] + u1
    y0 = b0[0] + b0[1] * x[:, 0] + b0[2] * x[:, 1] + u0
    index = c[0] + c[1] * z[:, 0] + c[2] * z[:, 1]
    s = (index - us > 0).astype(float)
    y = s * y1 + (1.0 - s) * y0
    data = Dataset(y=y, s=s, x=x, z=z, mu0=identity_features, mu1=identity_features)
    if not return_latent:
        return data
    v = ndtr(us / params.us_scale)
    latent = Latent(u=s * u1 + (1.0 - s) * u0, u0=u0, u1=u1, v=v,
                    p=ndtr(index / params.us_scale), eps=eps)
    return data, latent


def true_propensity(z1, z2, params: DgpParams = DgpParams()):
    """``Phi(mu_S(z) / |US loading|)``; ``Phi(0.2 + 0.3 z1 + 0.1 z2)`` by default."""
    c = params.s_coef
    out = ndtr((c[0] + c[1] * np.asarray(z1, float) + c[2] * np.asarray(z2, float))
               / params.us_scale)
    return out if np.ndim(out) else float(out)


def _check_open_unit(p) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    if np.any((p <= 0.0) | (p >= 1.0)):
        raise ValueError("p must lie strictly inside (0, 1)")
    return p


def _scalar(x):
    return x if np.ndim(x) else float(x)


def true_fp(p, params: DgpParams = DgpParams()):
    """CDF and density of the propensity score.

    With the default design ``F_P(p) = Phi(-(sqrt(10)/3) Phi^{-1}(1 - p))``.
    """
    p = _check_open_unit(p)
    q = ndtri(p)
    m, sd = params.index_mean, params.index_sd
    t = (q - m) / sd
    cdf = ndtr(t)
    pdf = norm_pdf(t) / (sd * norm_pdf(q))
    return _scalar(cdf), _scalar(pdf)


def true_fpstar(p, a: float, params: DgpParams = DgpParams()):
    """CDF and density of ``P* = P + a (1 - P)``; zero below ``a``."""
    if not (0.0 <= a < 1.0):
        raise ValueError("a must lie in [0, 1)")
    p = np.asarray(p, dtype=float)
    pt = (p - a) / (1.0 - a)
    inside = (pt > 0.0) & (pt < 1.0)
    safe = np.where(inside, pt, 0.5)
    cdf_in, pdf_in = true_fp(safe, params)
    cdf = np.where(inside, cdf_in, np.where(pt >= 1.0, 1.0, 0.0))
    pdf = np.where(inside, np.asarray(pdf_in) / (1.0 - a), 0.0)
    return _scalar(cdf), _scalar(pdf)


def true_density_ratio(p, a: float, params: DgpParams = DgpParams()):
    """``f_{P*}(p) / f_P(p)`` for the proportional shift."""
    _, num = true_fpstar(p, a, params)
    _, den = true_fp(p, params)
    return _scalar(np.asarray(num) / np.asarray(den))


def true_mte(x1, x2, p, params: DgpParams = DgpParams()):
    """``0.220 + 0.300 x1 + 0.300 x2 + 0.062 Phi^{-1}(1 - p)`` by default."""
    p = _check_open_unit(p)
    b1, b0 = params.y1_coef, params.y0_coef
    out = ((b1[0] - b0[0]) + (b1[1] - b0[1]) * np.asarray(x1, float)
           + (b1[2] - b0[2]) * np.asarray(x2, float)
           + params.u_slope * ndtri(1.0 - p))
    return _scalar(out)


def true_g_u_given_p(p, params: DgpParams = DgpParams()):
    """``E[U | P = p] = 0.062 phi(Phi^{-1}(1 - p))`` by default."""
    p = _check_open_unit(p)
    return _scalar(params.u_slope * norm_pdf(ndtri(1.0 - p)))


def true_delta_u_given_p(p, params: DgpParams = DgpParams()):
    """Derivative of :func:`true_g_u_given_p`: ``0.062 Phi^{-1}(1 - p)``."""
    p = _check_open_unit(p)
    return _scalar(params.u_slope * ndtri(1.0 - p))


def true_beta(params: DgpParams = DgpParams()) -> np.ndarray:
    """Slopes on the feature maps, stacked as ``(beta0; beta1)``."""
    return np.array([params.y0_coef[1], params.y0_coef[2],
                     params.y1_coef[1], params.y1_coef[2]])


def true_residual_mean(p, params: DgpParams = DgpParams()):
    """``E[Y - (1-S) mu0'b0 - S mu1'b1 | P = p]``; intercepts included."""
    b1, b0 = params.y1_coef, params.y0_coef
    g = np.asarray(true_g_u_given_p(p, params))
    return _scalar(b0[0] + (b1[0] - b0[0]) * np.asarray(p, float) + g)


def true_residual_slope(p, params: DgpParams = DgpParams()):
    """Derivative in ``p`` of :func:`true_residual_mean`."""
    b1, b0 = params.y1_coef, params.y0_coef
    return _scalar((b1[0] - b0[0]) + np.asarray(true_delta_u_given_p(p, params)))


def true_prte(a: float, params: DgpParams = DgpParams(), tol: float = 1e-6) -> float:
    """Integral of ``MTE (F_P - F_{P*})`` over ``p`` for ``P* = P + a (1 - P)``.

    The covariate part of the MTE is replaced by its population mean because
    the propensity is independent of the covariates in this design.
    """
    if not (0.0 <= a < 1.0):
        raise ValueError("a must lie in [0, 1)")
    if a == 0.0:
        return 0.0
    c0, k = params.mte_constant, params.u_slope

    def integrand(p: float) -> float:
        fp, _ = true_fp(p, params)
        fps, _ = true_fpstar(p, a, params)
        return (c0 + k * float(ndtri(1.0 - p))) * (fp - fps)

    total = 0.0
    # split at a, where F_{P*} leaves zero; quad never evaluates the endpoints
    for lo, hi in ((0.0, a), (a, 1.0)):
        val, err = integrate.quad(integrand, lo, hi, epsabs=tol * 1e-2, epsrel=1e-10,
                                  limit=200)
        if not np.isfinite(val) or err > tol:
            raise QuadratureError(f"quadrature on ({lo}, {hi}) reported error {err:g}")
        total += val
    return float(total)


def true_zeta(z, params: DgpParams = DgpParams()) -> np.ndarray:
    """Conditional mean given ``Z = z`` of the ``p``-derivative of the true
    residual-outer-product map, evaluated at ``p = true_propensity(z)``.

    Used as the exact oracle for the correction term of the first score block.
    Relies on ``X`` being independent of ``(Z, eps)`` and on identity feature
    maps.
    """
    z = np.atleast_2d(np.asarray(z, dtype=float))
    p = np.asarray(true_propensity(z[:, 0], z[:, 1], params))
    sig = np.diag(np.asarray(params.x_sd, float) ** 2)
    bx0 = np.array(params.y0_coef[1:])
    bx1 = np.array(params.y1_coef[1:])
    out = np.empty((z.shape[0], 20))
    for i, pi in enumerate(p):
        # v = ((1-p) e, p e), dv/dp = (-e, e) with e = x - E[x]
        cov_vdot_v = np.block([[-(1 - pi) * sig, -pi * sig], [(1 - pi) * sig, pi * sig]])
        dvv = cov_vdot_v + cov_vdot_v.T
        # E[e (y - g_Y(p)) | Z] = p Sigma b1 + (1-p) Sigma b0; E[v d r/dp] = 0
        er = pi * sig @ bx1 + (1 - pi) * sig @ bx0
        dvr = np.concatenate([-er, er])
        out[i] = np.concatenate([dvv.reshape(-1, order="F"), dvr])
    return out
