"""Kernel primitives: Epanechnikov kernel, Nadaraya-Watson regression, KDE and
central differences.

Every routine works on numpy arrays. Training points are coerced to shape
``(n, d)``; a one-dimensional training array is read as ``d = 1``. Queries may
be a single point or a batch, and the output shape follows the query.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

__all__ = [
    "Bandwidths",
    "InvalidBandwidth",
    "epanechnikov",
    "scaled_kernel",
    "product_kernel_weights",
    "nw_from_weights",
    "nw_regress",
    "kde",
    "central_difference",
]


class InvalidBandwidth(ValueError):
    """Raised for a non-positive bandwidth or an out-of-range shrinkage exponent."""


@dataclass(frozen=True)
class Bandwidths:
    """Smoothing constants used throughout the estimation recipe.

    Attributes
    ----------
    h1 : float
        Bandwidth on the instrument axes.
    h2 : float
        Bandwidth on the propensity-score axis.
    delta : float
        Step of every central difference quotient.
    alpha : float
        Exponent of the shrinkage map ``rho(x) = x**alpha`` applied to density
        ratios. ``alpha = 1`` leaves the raw ratio untouched.
    """

    h1: float = 2.5
    h2: float = 0.25
    delta: float = 0.01
    alpha: float = 0.25

    def __post_init__(self) -> None:
        for name in ("h1", "h2", "delta"):
            value = getattr(self, name)
            if not np.isfinite(value) or value <= 0:
                raise InvalidBandwidth(f"{name} must be positive, got {value!r}")
        # alpha = 0 is admitted as the degenerate "ratio ignored" case
        if not (0.0 <= self.alpha <= 1.0):
            raise InvalidBandwidth(f"alpha must lie in [0, 1], got {self.alpha!r}")

    def rho(self, x):
        """Shrink a density ratio toward one."""
        return np.power(x, self.alpha)


def _check_h(h: float) -> float:
    h = float(h)
    if not np.isfinite(h) or h <= 0:
        raise InvalidBandwidth(f"bandwidth must be positive, got {h!r}")
    return h


def epanechnikov(u):
    """``0.75 * (1 - u**2)`` on ``|u| <= 1`` and zero elsewhere."""
    u = np.asarray(u, dtype=float)
    out = 0.75 * np.maximum(0.0, 1.0 - u * u)
    return out if out.ndim else float(out)


def scaled_kernel(u, h: float):
    """``K(u / h) / h`` for the Epanechnikov ``K``."""
    h = _check_h(h)
    u = np.asarray(u, dtype=float)
    out = 0.75 * np.maximum(0.0, 1.0 - (u / h) ** 2) / h
    return out if out.ndim else float(out)


def _as_points(train) -> np.ndarray:
    arr = np.asarray(train, dtype=float)
    if arr.ndim == 1:
        return arr[:, None]
    if arr.ndim != 2:
        raise ValueError("training points must be 1-D or 2-D")
    return arr


def _as_queries(query, d: int) -> tuple[np.ndarray, bool]:
    q = np.asarray(query, dtype=float)
    if d == 1:
        single = q.ndim == 0
        return q.reshape(-1, 1), single
    if q.ndim == 1:
        if q.shape[0] != d:
            raise ValueError(f"query has {q.shape[0]} coordinates, expected {d}")
        return q[None, :], True
    if q.ndim != 2 or q.shape[1] != d:
        raise ValueError(f"queries must have shape (m, {d})")
    return q, False


def product_kernel_weights(train_points, queries, h: float) -> np.ndarray:
    """Weight matrix ``w[i, j] = prod_k K_h(train[j, k] - query[i, k])``.

    Parameters
    ----------
    train_points : array_like, shape (n,) or (n, d)
    queries : array_like, shape (m,) or (m, d)
    h : float
        Common bandwidth for every coordinate.

    Returns
    -------
    ndarray, shape (m, n)
    """
    h = _check_h(h)
    x = _as_points(train_points)
    q, _ = _as_queries(queries, x.shape[1])
    w = np.ones((q.shape[0], x.shape[0]))
    for k in range(x.shape[1]):
        u = (x[None, :, k] - q[:, k, None]) / h
        w *= np.maximum(0.0, 1.0 - u * u)
    # constant factor of the product kernel, kept so values are true densities
    w *= (0.75 / h) ** x.shape[1]
    return w


def nw_from_weights(weights: np.ndarray, targets, diagnostics: Optional[Counter] = None) -> np.ndarray:
    """Normalised weighted average of ``targets`` for each row of ``weights``.

    Rows whose weights sum to zero fall back to the unweighted mean of the
    targets; each such row increments ``diagnostics["empty_neighborhood"]``.
    """
    t = np.asarray(targets, dtype=float)
    denom = weights.sum(axis=1)
    num = weights @ t
    empty = denom <= 0.0
    if np.any(empty):
        denom = np.where(empty, 1.0, denom)
        fallback = t.mean(axis=0)
        if t.ndim == 1:
            num = np.where(empty, fallback, num)
        else:
            num = np.where(empty[:, None], fallback[None, :], num)
        if diagnostics is not None:
            diagnostics["empty_neighborhood"] += int(empty.sum())
    if t.ndim == 1:
        return num / denom
    return num / denom[:, None]


def nw_regress(train_points, train_targets, query, h: float,
               diagnostics: Optional[Counter] = None):
    """Nadaraya-Watson regression with a product Epanechnikov kernel.

    ``train_targets`` may be scalar per point (shape ``(n,)``) or vector
    valued (shape ``(n, k)``); one weight vector per query is shared across
    target components.
    """
    x = _as_points(train_points)
    if x.shape[0] == 0:
        raise ValueError("training set is empty")
    _, single = _as_queries(query, x.shape[1])
    w = product_kernel_weights(x, query, h)
    out = nw_from_weights(w, train_targets, diagnostics)
    return out[0] if single else out


def kde(train_values, query, h: float, normalizer: Optional[float] = None):
    """Product-kernel density estimate ``sum_j K_h(train_j - query) / normalizer``.

    ``normalizer`` defaults to the number of training values.
    """
    x = _as_points(train_values)
    if x.shape[0] == 0:
        raise ValueError("training set is empty")
    norm = float(x.shape[0] if normalizer is None else normalizer)
    if norm <= 0:
        raise ValueError("normalizer must be positive")
    _, single = _as_queries(query, x.shape[1])
    out = product_kernel_weights(x, query, h).sum(axis=1) / norm
    return float(out[0]) if single else out


def central_difference(f: Callable, p, delta: float):
    """``(f(p + delta) - f(p - delta)) / (2 * delta)``."""
    delta = float(delta)
    if delta <= 0:
        raise InvalidBandwidth(f"delta must be positive, got {delta!r}")
    p = np.asarray(p, dtype=float) if np.ndim(p) else float(p)
    out = (np.asarray(f(p + delta)) - np.asarray(f(p - delta))) / (2.0 * delta)
    return float(out) if out.ndim == 0 else out
