"""Pure-numpy implementations of the hot fitting kernels.

Fallback backend used when the compiled extension is unavailable (or
disabled via GPPANEL_NO_EXT). Must stay numerically interchangeable with
gppanel._gpkern; tests/test_kernels.py checks parity.
"""

from __future__ import annotations

import numpy as np
from scipy.optimize import Bounds, minimize

from .gpd import SHAPE_CEIL, SHAPE_EPS, SHAPE_FLOOR

BACKEND_NAME = "python"

_BIG = 1e300


def loglik_sum(z, sigma, xi) -> float:
    """Sum of per-cell GP log-likelihood terms; -inf on support violation."""
    z = np.asarray(z, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    xi = np.asarray(xi, dtype=float)
    if np.any(sigma <= 0) or not np.all(np.isfinite(sigma)):
        return float("-inf")
    v = z / sigma
    small = np.abs(xi) < SHAPE_EPS
    xv = xi * v
    if np.any(~small & (xv <= -1.0)):
        return float("-inf")
    terms = np.where(
        small,
        -np.log(sigma) - v,
        -np.log(sigma)
        - (1.0 + 1.0 / np.where(small, 1.0, xi)) * np.log1p(np.where(xv > -1.0, xv, 0.0)),
    )
    return float(terms.sum())


def scale_nll(gamma, X, z, xi) -> float:
    """Negative partial composite log-likelihood in the scale coefficients.

    sigma_c = exp(X_c . gamma), xi_c held fixed. +inf outside the support.
    """
    eta = X @ gamma
    if np.any(np.abs(eta) > 700):
        return _BIG
    v = z * np.exp(-eta)
    small = np.abs(xi) < SHAPE_EPS
    xv = xi * v
    if np.any(~small & (xv <= -1.0)):
        return _BIG
    terms = np.where(
        small,
        eta + v,
        eta + (1.0 + 1.0 / np.where(small, 1.0, xi)) * np.log1p(np.where(xv > -1.0, xv, 0.0)),
    )
    out = terms.sum()
    return float(out) if np.isfinite(out) else _BIG


def shape_nll(delta, Xs, z, sigma) -> float:
    """Negative partial composite log-likelihood in the shape coefficients.

    xi_c = Xs_c . delta, sigma_c held fixed. Cells with xi_c outside
    [SHAPE_FLOOR, SHAPE_CEIL] or outside the support give +inf.
    """
    xi = Xs @ delta
    if np.any(xi < SHAPE_FLOOR) or np.any(xi > SHAPE_CEIL):
        return _BIG
    v = z / sigma
    small = np.abs(xi) < SHAPE_EPS
    xv = xi * v
    if np.any(~small & (xv <= -1.0)):
        return _BIG
    terms = np.where(
        small,
        np.log(sigma) + v,
        np.log(sigma)
        + (1.0 + 1.0 / np.where(small, 1.0, xi)) * np.log1p(np.where(xv > -1.0, xv, 0.0)),
    )
    out = terms.sum()
    return float(out) if np.isfinite(out) else _BIG


def _nm_minimize(fun, x0, lower, upper, fatol, xatol, maxfev):
    x0 = np.clip(np.asarray(x0, dtype=float), lower, upper)
    res = minimize(
        fun,
        x0,
        method="Nelder-Mead",
        bounds=Bounds(np.asarray(lower, float), np.asarray(upper, float)),
        options={"fatol": fatol, "xatol": xatol, "maxfev": maxfev, "maxiter": maxfev},
    )
    return np.asarray(res.x, dtype=float), float(res.fun), int(res.nfev), bool(res.success)


def fit_scale(x0, X, z, xi, lower, upper, fatol=1e-8, xatol=1e-8, maxfev=0):
    """Bounded Nelder-Mead minimization of scale_nll from x0."""
    X = np.ascontiguousarray(X, dtype=float)
    if maxfev <= 0:
        maxfev = 400 * max(2, X.shape[1])
    return _nm_minimize(lambda g: scale_nll(g, X, z, xi), x0, lower, upper, fatol, xatol, maxfev)


def fit_shape(x0, Xs, z, sigma, lower, upper, fatol=1e-8, xatol=1e-8, maxfev=0):
    """Bounded Nelder-Mead minimization of shape_nll from x0."""
    Xs = np.ascontiguousarray(Xs, dtype=float)
    if maxfev <= 0:
        maxfev = 400 * max(2, Xs.shape[1])
    return _nm_minimize(lambda d: shape_nll(d, Xs, z, sigma), x0, lower, upper, fatol, xatol, maxfev)
