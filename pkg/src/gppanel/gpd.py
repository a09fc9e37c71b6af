"""Generalized Pareto distribution primitives.

CDF, quantile, log-likelihood, analytic score/Hessian in (scale, shape),
and m-observation return levels with delta-method variances. All functions
route through an exponential-limit branch when |shape| < SHAPE_EPS to avoid
catastrophic cancellation in the 1/shape terms.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Shape values below this magnitude use the exponential-limit formulas.
SHAPE_EPS = 1e-8

# Estimation routines constrain shape to [SHAPE_FLOOR, SHAPE_CEIL]; the
# likelihood itself is defined for any shape with a valid support.
SHAPE_FLOOR = -0.5 + 1e-6
SHAPE_CEIL = 5.0

NEG_INF = float("-inf")

__all__ = [
    "GpParams",
    "ReturnLevelSpec",
    "gp_cdf",
    "gp_quantile",
    "gp_loglik",
    "gp_score_hessian",
    "score_components",
    "return_level",
    "return_level_gradient",
    "return_level_variance",
    "SHAPE_EPS",
    "SHAPE_FLOOR",
    "SHAPE_CEIL",
]


@dataclass(frozen=True)
class GpParams:
    """Scale/shape pair of one GP margin.

    scale must be positive. shape is unrestricted here; fitted parameters
    additionally satisfy shape > -0.5 (see SHAPE_FLOOR).
    """

    scale: float
    shape: float

    def __post_init__(self):
        if not np.isfinite(self.scale) or self.scale <= 0:
            raise ValueError(f"scale must be finite and > 0, got {self.scale}")
        if not np.isfinite(self.shape):
            raise ValueError(f"shape must be finite, got {self.shape}")


@dataclass(frozen=True)
class ReturnLevelSpec:
    """Inputs of an m-observation return level.

    threshold: the level u the excesses were taken over.
    exceed_prob: P(Y > u), in (0, 1].
    period_obs: the period m, in number of observations.
    """

    threshold: float
    exceed_prob: float
    period_obs: float

    def __post_init__(self):
        if not (0 < self.exceed_prob <= 1):
            raise ValueError(f"exceed_prob must be in (0,1], got {self.exceed_prob}")
        if self.period_obs <= 0:
            raise ValueError(f"period_obs must be > 0, got {self.period_obs}")


def gp_cdf(z, p: GpParams):
    """GP distribution function H(z; scale, shape) for excesses z >= 0.

    For shape < 0 and z at or beyond the upper endpoint scale/|shape|,
    returns exactly 1. Scalar in, scalar out; arrays broadcast.
    """
    z = np.asarray(z, dtype=float)
    if not np.all(np.isfinite(z)):
        raise ValueError("z must be finite")
    if np.any(z < 0):
        raise ValueError("z must be nonnegative")
    if abs(p.shape) < SHAPE_EPS:
        out = -np.expm1(-z / p.scale)
    else:
        xz = p.shape * z / p.scale
        inside = xz > -1.0
        with np.errstate(divide="ignore", invalid="ignore"):
            out = -np.expm1(-np.log1p(np.where(inside, xz, 0.0)) / p.shape)
        out = np.where(inside, out, 1.0)
    return out if out.ndim else float(out)


def gp_quantile(prob, p: GpParams):
    """Inverse of gp_cdf: the excess level with cumulative probability prob."""
    prob = np.asarray(prob, dtype=float)
    if np.any((prob < 0) | (prob >= 1)):
        raise ValueError("prob must be in [0,1)")
    if abs(p.shape) < SHAPE_EPS:
        out = -p.scale * np.log1p(-prob)
    else:
        out = p.scale / p.shape * np.expm1(-p.shape * np.log1p(-prob))
    return out if out.ndim else float(out)


def gp_loglik(z, p: GpParams) -> float:
    """GP log-likelihood of an excess sample.

    Returns -inf (not an error) when any 1 + shape*z/scale <= 0, so
    optimizers can treat the support constraint as a barrier.
    """
    z = np.asarray(z, dtype=float)
    if z.size == 0:
        raise ValueError("empty excess sample")
    if not np.all(np.isfinite(z)):
        raise ValueError("z must be finite")
    if np.any(z < 0):
        raise ValueError("z must be nonnegative")
    n = z.size
    if abs(p.shape) < SHAPE_EPS:
        return float(-n * np.log(p.scale) - z.sum() / p.scale)
    xz = p.shape * z / p.scale
    if np.any(xz <= -1.0):
        return NEG_INF
    return float(-n * np.log(p.scale) - (1.0 + 1.0 / p.shape) * np.log1p(xz).sum())


def score_components(z, sigma, xi):
    """Per-observation first derivatives of the GP log-likelihood.

    z, sigma, xi broadcast elementwise; returns (d/dsigma, d/dxi) arrays.
    Elements with |xi| < SHAPE_EPS use the series limit. Support must hold
    strictly for every element.
    """
    z = np.asarray(z, dtype=float)
    sigma = np.broadcast_to(np.asarray(sigma, dtype=float), z.shape).copy()
    xi = np.broadcast_to(np.asarray(xi, dtype=float), z.shape).copy()
    v = z / sigma
    w = 1.0 + xi * v
    if np.any(w <= 0):
        raise ValueError("support constraint violated: 1 + xi*z/sigma <= 0")
    small = np.abs(xi) < SHAPE_EPS
    xi_safe = np.where(small, 1.0, xi)

    ds = (-1.0 + (1.0 + xi) * v / w) / sigma
    with np.errstate(divide="ignore", invalid="ignore"):
        dx = np.log1p(xi * v) / xi_safe**2 - (1.0 + 1.0 / xi_safe) * v / w
    # series about xi = 0: v^2/2 - v + xi*(v^2 - 2v^3/3)
    dx_small = v * v / 2.0 - v + xi * (v * v - 2.0 * v**3 / 3.0)
    ds_small = (-1.0 + v) / sigma
    return np.where(small, ds_small, ds), np.where(small, dx_small, dx)


def _hessian_components(z, sigma, xi):
    """Per-observation second derivatives (d2ss, d2sx, d2xx)."""
    z = np.asarray(z, dtype=float)
    sigma = np.broadcast_to(np.asarray(sigma, dtype=float), z.shape).copy()
    xi = np.broadcast_to(np.asarray(xi, dtype=float), z.shape).copy()
    v = z / sigma
    w = 1.0 + xi * v
    if np.any(w <= 0):
        raise ValueError("support constraint violated: 1 + xi*z/sigma <= 0")
    small = np.abs(xi) < SHAPE_EPS
    xi_safe = np.where(small, 1.0, xi)

    d2ss = (1.0 - 2.0 * (1.0 + xi) * v / w + xi * (1.0 + xi) * v * v / (w * w)) / sigma**2
    d2sx = (v / w - (1.0 + xi) * v * v / (w * w)) / sigma
    with np.errstate(divide="ignore", invalid="ignore"):
        lw = np.log1p(xi * v)
        d2xx = (
            -2.0 * lw / xi_safe**3
            + 2.0 * v / (xi_safe**2 * w)
            + (1.0 + 1.0 / xi_safe) * v * v / (w * w)
        )
    d2ss_small = (1.0 - 2.0 * v) / sigma**2
    d2sx_small = (v - v * v) / sigma
    d2xx_small = v * v - 2.0 * v**3 / 3.0
    return (
        np.where(small, d2ss_small, d2ss),
        np.where(small, d2sx_small, d2sx),
        np.where(small, d2xx_small, d2xx),
    )


def gp_score_hessian(z, p: GpParams):
    """Analytic score (2-vector) and Hessian (2x2) of gp_loglik in (scale, shape).

    Summed over the sample. Raises on support violation.
    """
    ds, dx = score_components(z, p.scale, p.shape)
    d2ss, d2sx, d2xx = _hessian_components(z, p.scale, p.shape)
    score = np.array([ds.sum(), dx.sum()])
    hess = np.array([[d2ss.sum(), d2sx.sum()], [d2sx.sum(), d2xx.sum()]])
    return score, hess


def return_level(spec: ReturnLevelSpec, p: GpParams) -> float:
    """m-observation return level u + (scale/shape)*((m*zeta)^shape - 1)."""
    mz = spec.period_obs * spec.exceed_prob
    if mz < 1:
        raise ValueError(
            f"period_obs * exceed_prob = {mz:.4g} < 1: level lies below the threshold"
        )
    if abs(p.shape) < SHAPE_EPS:
        return float(spec.threshold + p.scale * np.log(mz))
    return float(spec.threshold + p.scale / p.shape * np.expm1(p.shape * np.log(mz)))


def return_level_gradient(spec: ReturnLevelSpec, p: GpParams) -> np.ndarray:
    """Gradient of return_level in (scale, shape, exceed_prob)."""
    mz = spec.period_obs * spec.exceed_prob
    if mz < 1:
        raise ValueError("period_obs * exceed_prob < 1")
    a = np.log(mz)
    if abs(p.shape) < SHAPE_EPS:
        dsig = a
        dxi = p.scale * a * a / 2.0
        dzeta = p.scale * spec.period_obs / mz
    else:
        em = np.expm1(p.shape * a)
        dsig = em / p.shape
        dxi = p.scale * ((em + 1.0) * p.shape * a - em) / p.shape**2
        dzeta = p.scale * spec.period_obs * mz ** (p.shape - 1.0)
    return np.array([dsig, dxi, dzeta])


def return_level_variance(spec: ReturnLevelSpec, p: GpParams, cov: np.ndarray) -> float:
    """Delta-method variance g' cov g over (scale, shape, exceed_prob).

    cov must be a symmetric PSD 3x3 matrix (eigenvalue tolerance -1e-10).
    """
    cov = np.asarray(cov, dtype=float)
    if cov.shape != (3, 3):
        raise ValueError(f"cov must be 3x3, got {cov.shape}")
    if not np.allclose(cov, cov.T, atol=1e-8):
        raise ValueError("cov must be symmetric")
    if np.linalg.eigvalsh(cov).min() < -1e-10:
        raise ValueError("cov must be positive semidefinite")
    g = return_level_gradient(spec, p)
    return float(g @ cov @ g)
