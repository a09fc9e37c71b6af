"""Dependence-window sandwich covariance estimators.

Scores of all coefficients in a subject net are stacked into one vector
(scale blocks ordered by group label, then shape blocks by label). The
bread is the sum of per-cell score outer products; the meat aggregates
scores by time point and adds symmetric cross-products up to the
dependence-window lag.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve
from scipy.stats import norm

from .estimate import EstimationError, FitResult, RegressionParams
from .gpd import score_components
from .panel import ExcessPanel, GroupAssignment, SubjectNet, derive_nets

__all__ = [
    "WindowConfig",
    "SandwichResult",
    "sandwich_net",
    "sandwich_blockwise",
    "sandwich_all_nets",
    "wald_intervals",
]

COND_LIMIT = 1e12


@dataclass(frozen=True)
class WindowConfig:
    """Largest dependence window, in time units: excesses further apart
    than `window` are treated as independent."""

    window: int = 0

    def __post_init__(self):
        if self.window < 0:
            raise ValueError("window must be >= 0")


@dataclass
class SandwichResult:
    v_hat: np.ndarray
    h_hat: np.ndarray
    cov: np.ndarray
    param_index: list  # [(kind, group_label, coef_index)] per matrix row
    ridged: bool = False
    psd_violation: bool = False


def _stacked_scores(panel: ExcessPanel, subjects, assignment: GroupAssignment,
                    params: RegressionParams, gamma_labels, delta_labels):
    """Per-cell scores embedded into the stacked coordinate system.

    Returns (rows, times) where rows is (#cells x D) and times the matching
    original time indices.
    """
    p, q = params.dim_scale, params.dim_shape
    g_off = {lab: k * p for k, lab in enumerate(gamma_labels)}
    d_off = {lab: len(gamma_labels) * p + k * q for k, lab in enumerate(delta_labels)}
    dim = len(gamma_labels) * p + len(delta_labels) * q

    blocks, times = [], []
    for i in subjects:
        n_i = len(panel.z[i])
        if n_i == 0:
            continue
        glab = int(assignment.scale_groups[i])
        dlab = int(assignment.shape_groups[i])
        x = panel.x[i]
        xs = x[:, list(params.shape_cols)]
        sigma = np.exp(x @ params.gamma[glab - 1])
        xi = xs @ params.delta[dlab - 1]
        ds, dx = score_components(panel.z[i], sigma, xi)
        rows = np.zeros((n_i, dim))
        if glab in g_off:
            o = g_off[glab]
            rows[:, o:o + p] = (ds * sigma)[:, None] * x
        if dlab in d_off:
            o = d_off[dlab]
            rows[:, o:o + q] = dx[:, None] * xs
        blocks.append(rows)
        times.append(panel.times[i])
    if not blocks:
        raise EstimationError("no excess cells in the requested subject set")
    index = [("gamma", lab, k) for lab in gamma_labels for k in range(p)]
    index += [("delta", lab, k) for lab in delta_labels for k in range(q)]
    return np.vstack(blocks), np.concatenate(times), index


def _time_aggregate(rows: np.ndarray, times: np.ndarray):
    """Sum score rows sharing a time index."""
    uniq, inv = np.unique(times, return_inverse=True)
    agg = np.zeros((len(uniq), rows.shape[1]))
    np.add.at(agg, inv, rows)
    return uniq, agg


def _meat(rows: np.ndarray, times: np.ndarray, window: int) -> np.ndarray:
    uniq, agg = _time_aggregate(rows, times)
    v = agg.T @ agg
    pos = {int(t): k for k, t in enumerate(uniq)}
    for lag in range(1, window + 1):
        for k, t in enumerate(uniq):
            j = pos.get(int(t) - lag)
            if j is None:
                continue
            cross = np.outer(agg[j], agg[k])
            v += cross + cross.T
    return (v + v.T) / 2.0


def _bread_inverse_sandwich(h: np.ndarray, v: np.ndarray, context: str):
    ridged = False
    cond = np.linalg.cond(h)
    if not np.isfinite(cond) or cond > COND_LIMIT:
        ridge = 1e-10 * np.trace(h) / h.shape[0]
        h = h + ridge * np.eye(h.shape[0])
        ridged = True
        warnings.warn(f"near-singular bread matrix ({context}); ridge applied")
        if not np.isfinite(np.linalg.cond(h)) or np.linalg.cond(h) > 1e15:
            raise EstimationError(f"singular bread matrix in {context}")
    hinv_v = solve(h, v, assume_a="sym")
    cov = solve(h, hinv_v.T, assume_a="sym").T
    cov = (cov + cov.T) / 2.0
    psd_violation = bool(np.linalg.eigvalsh(cov).min() < -1e-10 * max(1.0, np.abs(cov).max()))
    if psd_violation:
        warnings.warn(f"sandwich covariance not PSD within tolerance ({context})")
    return h, cov, ridged, psd_violation


def sandwich_net(panel: ExcessPanel, net: SubjectNet, assignment: GroupAssignment,
                 params: RegressionParams, cfg: WindowConfig) -> SandwichResult:
    """Net-level sandwich covariance over all of the net's coefficients."""
    if cfg.window >= panel.n_times:
        raise ValueError("window must be smaller than the panel length")
    gamma_labels = sorted(net.scale_labels)
    delta_labels = sorted(net.shape_labels)
    rows, times, index = _stacked_scores(
        panel, net.members, assignment, params, gamma_labels, delta_labels
    )
    h = rows.T @ rows
    h = (h + h.T) / 2.0
    v = _meat(rows, times, cfg.window)
    context = f"net {net.members}"
    h, cov, ridged, psd_violation = _bread_inverse_sandwich(h, v, context)
    return SandwichResult(v_hat=v, h_hat=h, cov=cov, param_index=index,
                          ridged=ridged, psd_violation=psd_violation)


def sandwich_blockwise(panel: ExcessPanel, assignment: GroupAssignment,
                       params: RegressionParams, tau_gamma: int,
                       cfg: WindowConfig) -> np.ndarray:
    """Approximate covariance of one scale group's coefficients.

    Builds the sandwich over (gamma_tau, shape groups present in the block)
    restricted to the block's subjects, then takes the upper-left
    dim(gamma) x dim(gamma) sub-matrix.
    """
    subjects = [i for i in range(panel.n_subjects)
                if assignment.scale_groups[i] == tau_gamma]
    if not subjects:
        raise EstimationError(f"scale group {tau_gamma} is empty")
    delta_labels = sorted({int(assignment.shape_groups[i]) for i in subjects})
    rows, times, _ = _stacked_scores(
        panel, subjects, assignment, params, [tau_gamma], delta_labels
    )
    h = rows.T @ rows
    h = (h + h.T) / 2.0
    v = _meat(rows, times, cfg.window)
    _, cov, _, _ = _bread_inverse_sandwich(h, v, f"scale block {tau_gamma}")
    p = params.dim_scale
    return cov[:p, :p]


def sandwich_all_nets(panel: ExcessPanel, assignment: GroupAssignment,
                      params: RegressionParams, cfg: WindowConfig) -> dict:
    """SandwichResult per subject net, keyed by the net's member tuple."""
    return {
        net.members: sandwich_net(panel, net, assignment, params, cfg)
        for net in derive_nets(assignment)
    }


def wald_intervals(fit: FitResult, sandwiches: dict, level: float) -> dict:
    """Per-coefficient normal-approximation intervals.

    Keys are (kind, group_label, coef_index); values (lo, hi, degenerate).
    Coordinates with zero (or numerically negative) variance yield the
    degenerate interval (estimate, estimate) with the flag set.
    """
    if not (0 < level < 1):
        raise ValueError("level must be in (0,1)")
    if not sandwiches:
        raise ValueError("missing covariance: run sandwich_net first")
    zq = norm.ppf((1 + level) / 2)
    out = {}
    for sw in sandwiches.values():
        diag = np.diag(sw.cov)
        for row, key in enumerate(sw.param_index):
            kind, lab, k = key
            est = (fit.params.gamma[lab - 1][k] if kind == "gamma"
                   else fit.params.delta[lab - 1][k])
            var = diag[row]
            if var <= 0:
                out[key] = (est, est, True)
            else:
                sd = np.sqrt(var)
                out[key] = (est - zq * sd, est + zq * sd, False)
    return out
