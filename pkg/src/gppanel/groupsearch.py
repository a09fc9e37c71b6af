"""Latent group-structure estimation.

multistep_fit alternates coefficient updates with per-subject group
reassignments (an EM-type scheme) for a fixed group-dimension pair.
select_by_bic wraps it in a grid search over dimension pairs. The
two-stage approach first picks the number of scale groups by BIC with a
generous fixed number of shape groups, then grows shape groups bottom-up
by merging the cluster pair with the best marginal BIC improvement.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .estimate import (
    EstimationError,
    FitResult,
    RegressionParams,
    _polish_net,
    bic_value,
    comp_loglik,
    fit_block_scale,
    fit_block_shape,
    random_init,
    subject_loglik,
)
from .panel import ExcessPanel, GroupAssignment, derive_nets

__all__ = [
    "SearchConfig",
    "SearchResult",
    "multistep_fit",
    "select_by_bic",
    "two_stage_hier",
    "rand_index",
]


@dataclass
class SearchConfig:
    g_scale_candidates: list = field(default_factory=lambda: [2, 3, 4, 5])
    g_shape_candidates: list = field(default_factory=lambda: [2, 3, 4])
    runs_per_pair: int = 3
    eps: float = 1e-6
    max_iter: int = 100
    seed: int | None = 0
    shape_fixed_for_stage1: int | None = None  # default: ceil(sqrt(N))
    shape_cols: tuple = (0,)

    def __post_init__(self):
        if self.runs_per_pair < 1:
            raise ValueError("runs_per_pair must be >= 1")


@dataclass
class SearchResult:
    best_fit: FitResult
    bic_table: dict  # (g_scale, g_shape) -> best BIC over runs
    trace: dict = field(default_factory=dict)


def rand_index(a, b) -> float:
    """Fraction of subject pairs co-clustered in both or separated in both."""
    a = np.asarray(a)
    b = np.asarray(b)
    if len(a) != len(b):
        raise ValueError("partitions must have equal length")
    n = len(a)
    if n < 2:
        raise ValueError("need at least 2 subjects")
    same_a = a[:, None] == a[None, :]
    same_b = b[:, None] == b[None, :]
    agree = same_a == same_b
    iu = np.triu_indices(n, k=1)
    return float(agree[iu].mean())


def _random_assignment(n: int, g: int, rng) -> np.ndarray:
    """Uniform labels in 1..g, redrawn until every label appears."""
    while True:
        labels = rng.integers(1, g + 1, size=n)
        if len(np.unique(labels)) == g:
            return labels


def _repair_empty_groups(panel, labels, g, other_labels, params, which, shape_cols):
    """Refill emptied groups with the worst-fitting subject from a group
    that can spare one. Returns the number of moves made."""
    moves = 0
    for tau in range(1, g + 1):
        if np.any(labels == tau):
            continue
        counts = np.bincount(labels, minlength=g + 1)
        movable = [i for i in range(len(labels)) if counts[labels[i]] >= 2]
        if not movable:
            raise EstimationError("cannot repair empty group: all groups singletons")
        worst, worst_ll = None, np.inf
        for i in movable:
            if which == "gamma":
                ll = subject_loglik(panel, i, params.gamma[labels[i] - 1],
                                    params.delta[other_labels[i] - 1], shape_cols)
            else:
                ll = subject_loglik(panel, i, params.gamma[other_labels[i] - 1],
                                    params.delta[labels[i] - 1], shape_cols)
            if ll < worst_ll:
                worst, worst_ll = i, ll
        labels[worst] = tau
        moves += 1
    return moves


def _canonicalize_fit(panel, assignment, params):
    """Relabel both partitions by first appearance and permute coefficients."""
    new_scale = GroupAssignment.canonical_labels(assignment.scale_groups)
    new_shape = GroupAssignment.canonical_labels(assignment.shape_groups)
    perm_g = {}
    for old, new in zip(assignment.scale_groups, new_scale):
        perm_g[int(new)] = int(old)
    perm_d = {}
    for old, new in zip(assignment.shape_groups, new_shape):
        perm_d[int(new)] = int(old)
    gamma = [params.gamma[perm_g[lab] - 1] for lab in range(1, assignment.g_scale + 1)]
    delta = [params.delta[perm_d[lab] - 1] for lab in range(1, assignment.g_shape + 1)]
    return (
        GroupAssignment(new_scale, new_shape, assignment.g_scale, assignment.g_shape),
        RegressionParams(gamma, delta, params.shape_cols),
    )


def multistep_fit(panel: ExcessPanel, g_scale: int, g_shape: int,
                  cfg: SearchConfig, rng=None,
                  init_assignment: GroupAssignment | None = None,
                  init_params: RegressionParams | None = None) -> FitResult:
    """Joint estimation of group assignments and coefficients at a fixed
    group-dimension pair.

    Each iteration runs four sub-steps: re-fit all scale coefficients,
    reassign scale groups by per-subject argmax, re-fit all shape
    coefficients, reassign shape groups. Stops when both assignments are
    unchanged and the coefficient sup-norm change is below cfg.eps.
    """
    n = panel.n_subjects
    if not (1 <= g_scale <= n and 1 <= g_shape <= n):
        raise ValueError("group dimensions must lie in 1..N")
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(
        cfg.seed if rng is None else rng)
    shape_cols = tuple(cfg.shape_cols)

    if init_assignment is not None:
        a_scale = GroupAssignment.canonical_labels(init_assignment.scale_groups).astype(int)
        a_shape = GroupAssignment.canonical_labels(init_assignment.shape_groups).astype(int)
        if a_scale.max() != g_scale or a_shape.max() != g_shape:
            raise ValueError("initial assignment does not match the group dimensions")
    else:
        a_scale = _random_assignment(n, g_scale, rng)
        a_shape = _random_assignment(n, g_shape, rng)
    assignment = GroupAssignment(a_scale.copy(), a_shape.copy(), g_scale, g_shape)

    params = init_params.copy() if init_params is not None else random_init(
        panel, assignment, rng, shape_cols)
    if not math.isfinite(comp_loglik(panel, assignment, params)):
        params = random_init(panel, assignment, rng, shape_cols)

    trace = {"sub_ll": [], "repairs": 0, "iterations": 0}
    history = []
    converged = False
    it = 0
    for it in range(1, cfg.max_iter + 1):
        prev_params = params.stacked()
        prev_scale = assignment.scale_groups.copy()
        prev_shape = assignment.shape_groups.copy()
        sub_ll = []

        # (1) scale coefficients on the current scale blocks
        for tau in range(1, g_scale + 1):
            params.gamma[tau - 1] = fit_block_scale(
                panel, assignment, tau, params.delta,
                init=params.gamma[tau - 1], shape_cols=shape_cols, rng=rng)
        sub_ll.append(comp_loglik(panel, assignment, params))

        # (2) scale reassignment by per-subject argmax; a subject whose
        # every candidate is infeasible keeps its current label
        new_scale = assignment.scale_groups.copy()
        for i in range(n):
            lls = [subject_loglik(panel, i, params.gamma[tau - 1],
                                  params.delta[assignment.shape_groups[i] - 1],
                                  shape_cols)
                   for tau in range(1, g_scale + 1)]
            if np.max(lls) > float("-inf"):
                new_scale[i] = int(np.argmax(lls)) + 1
        trace["repairs"] += _repair_empty_groups(
            panel, new_scale, g_scale, assignment.shape_groups, params, "gamma", shape_cols)
        assignment = GroupAssignment(new_scale, assignment.shape_groups, g_scale, g_shape)
        sub_ll.append(comp_loglik(panel, assignment, params))

        # (3) shape coefficients on the current shape blocks
        for tau in range(1, g_shape + 1):
            params.delta[tau - 1] = fit_block_shape(
                panel, assignment, tau, params.gamma,
                init=params.delta[tau - 1], shape_cols=shape_cols, rng=rng)
        sub_ll.append(comp_loglik(panel, assignment, params))

        # (4) shape reassignment
        new_shape = assignment.shape_groups.copy()
        for i in range(n):
            lls = [subject_loglik(panel, i,
                                  params.gamma[assignment.scale_groups[i] - 1],
                                  params.delta[tau - 1], shape_cols)
                   for tau in range(1, g_shape + 1)]
            if np.max(lls) > float("-inf"):
                new_shape[i] = int(np.argmax(lls)) + 1
        trace["repairs"] += _repair_empty_groups(
            panel, new_shape, g_shape, assignment.scale_groups, params, "delta", shape_cols)
        assignment = GroupAssignment(assignment.scale_groups, new_shape, g_scale, g_shape)
        sub_ll.append(comp_loglik(panel, assignment, params))

        trace["sub_ll"].append(sub_ll)
        history.append(sub_ll[-1])
        same_assign = (np.array_equal(prev_scale, assignment.scale_groups)
                       and np.array_equal(prev_shape, assignment.shape_groups))
        if same_assign and np.max(np.abs(params.stacked() - prev_params)) < cfg.eps:
            converged = True
            break

    trace["iterations"] = it
    assignment, params = _canonicalize_fit(panel, assignment, params)
    for net in derive_nets(assignment):
        _polish_net(panel, assignment, params, net)
    ll = comp_loglik(panel, assignment, params)
    if not math.isfinite(ll):
        raise EstimationError("multistep run ended with infeasible parameters")
    return FitResult(
        params=params,
        assignment=assignment,
        comp_loglik=ll,
        n_excess=panel.n_excess,
        bic=bic_value(ll, panel.n_excess, params.dim_scale, g_scale,
                      params.dim_shape, g_shape),
        iterations=it,
        converged=converged,
        ll_history=history,
        trace=trace,
    )


def select_by_bic(panel: ExcessPanel, cfg: SearchConfig) -> SearchResult:
    """Grid search over group-dimension pairs: multistep_fit runs_per_pair
    times per pair, keep the lowest-BIC fit per pair and overall."""
    if not cfg.g_scale_candidates or not cfg.g_shape_candidates:
        raise ValueError("candidate grids must be nonempty")
    pairs = [(gs, gd) for gs in cfg.g_scale_candidates for gd in cfg.g_shape_candidates]
    ss = np.random.SeedSequence(cfg.seed)
    children = ss.spawn(len(pairs) * cfg.runs_per_pair)

    bic_table: dict = {}
    fits: dict = {}
    failures = []
    for k, pair in enumerate(pairs):
        for r in range(cfg.runs_per_pair):
            rng = np.random.default_rng(children[k * cfg.runs_per_pair + r])
            try:
                fit = multistep_fit(panel, pair[0], pair[1], cfg, rng=rng)
            except EstimationError as exc:
                failures.append({"pair": pair, "run": r, "error": str(exc)})
                continue
            if pair not in bic_table or fit.bic < bic_table[pair]:
                bic_table[pair] = fit.bic
                fits[pair] = fit
    if not fits:
        raise EstimationError("every run failed in the BIC grid search")
    best_pair = min(bic_table, key=bic_table.get)
    return SearchResult(best_fit=fits[best_pair], bic_table=bic_table,
                        trace={"failures": failures, "best_pair": best_pair})


def _cluster_delta_fit(panel, members, gamma, scale_groups, shape_cols, init):
    """Refit the common shape coefficient of a subject cluster with all
    scale coefficients held fixed. Returns (delta, loglik, n_excess)."""
    # view the cluster as shape group 1 and everything else as group 2
    shape_labels = np.where(np.isin(np.arange(panel.n_subjects), list(members)), 1, 2)
    g_shape = int(shape_labels.max())
    assign = GroupAssignment(scale_groups, shape_labels, int(scale_groups.max()), g_shape)
    delta = fit_block_shape(panel, assign, 1, gamma, init=init, shape_cols=shape_cols)
    ll = 0.0
    n_exc = 0
    for i in members:
        ll += subject_loglik(panel, i, gamma[scale_groups[i] - 1], delta, shape_cols)
        n_exc += len(panel.z[i])
    return delta, ll, n_exc


def _merge_delta(panel, c1, c2, clusters, gamma, scale_groups, shape_cols, deltas):
    members = sorted(clusters[c1] | clusters[c2])
    w1, w2 = len(clusters[c1]), len(clusters[c2])
    init = (w1 * deltas[c1] + w2 * deltas[c2]) / (w1 + w2)
    return _cluster_delta_fit(panel, members, gamma, scale_groups, shape_cols, init)


def _pair_delta_bic(panel, c1, c2, clusters, cluster_ll, cluster_nexc, deltas,
                    gamma, scale_groups, shape_cols, dim_scale, dim_shape):
    """Marginal BIC improvement of merging two shape clusters (gamma fixed)."""
    delta_m, ll_m, n_m = _merge_delta(
        panel, c1, c2, clusters, gamma, scale_groups, shape_cols, deltas)
    union = clusters[c1] | clusters[c2]
    n_gamma_groups = len({int(scale_groups[i]) for i in union})
    logn = np.log(n_m)
    bic_merged = -2.0 * ll_m + (dim_scale * n_gamma_groups + dim_shape) * logn
    bic_composite = (-2.0 * (cluster_ll[c1] + cluster_ll[c2])
                     + (dim_scale * n_gamma_groups + dim_shape * 2) * logn)
    return bic_merged - bic_composite, delta_m, ll_m, n_m, bic_merged, bic_composite


def two_stage_hier(panel: ExcessPanel, cfg: SearchConfig) -> SearchResult:
    """Two-stage search: BIC over scale-group counts with a fixed generous
    shape-group count, then bottom-up merging of shape clusters by marginal
    BIC improvement, then one polishing multistep run.

    Requires an intercept-only shape model (dim(delta) = 1).
    """
    if len(cfg.shape_cols) != 1:
        raise ValueError("two-stage search assumes intercept-only shape parameters")
    n = panel.n_subjects
    g_shape_fix = cfg.shape_fixed_for_stage1 or math.ceil(math.sqrt(n))
    g_shape_fix = min(g_shape_fix, n)
    shape_cols = tuple(cfg.shape_cols)
    ss = np.random.SeedSequence(cfg.seed)
    children = ss.spawn(len(cfg.g_scale_candidates) * cfg.runs_per_pair + 1)

    # Stage 1: pick the scale-group count by BIC under the fixed shape count.
    bic_table: dict = {}
    stage1_fits: dict = {}
    failures = []
    for k, g in enumerate(cfg.g_scale_candidates):
        for r in range(cfg.runs_per_pair):
            rng = np.random.default_rng(children[k * cfg.runs_per_pair + r])
            try:
                fit = multistep_fit(panel, g, g_shape_fix, cfg, rng=rng)
            except EstimationError as exc:
                failures.append({"g_scale": g, "run": r, "error": str(exc)})
                continue
            if (g, g_shape_fix) not in bic_table or fit.bic < bic_table[(g, g_shape_fix)]:
                bic_table[(g, g_shape_fix)] = fit.bic
                stage1_fits[g] = fit
    if not stage1_fits:
        raise EstimationError("every stage-1 run failed")
    g_star = min(stage1_fits, key=lambda g: stage1_fits[g].bic)
    stage1 = stage1_fits[g_star]
    gamma = stage1.params.gamma
    scale_groups = stage1.assignment.scale_groups
    dim_scale, dim_shape = stage1.params.dim_scale, len(shape_cols)

    # Stage 2: hierarchical merging of singleton shape clusters, gamma fixed.
    clusters = {i: {i} for i in range(n)}
    deltas: dict = {}
    cluster_ll: dict = {}
    cluster_nexc: dict = {}
    for i in range(n):
        d, ll, ne = _cluster_delta_fit(
            panel, [i], gamma, scale_groups, shape_cols, np.array([0.1]))
        deltas[i], cluster_ll[i], cluster_nexc[i] = d, ll, ne

    merge_log = []
    delta_cache: dict = {}

    def pair_delta(c1, c2):
        key = frozenset((c1, c2))
        if key not in delta_cache:
            try:
                delta_cache[key] = _pair_delta_bic(
                    panel, c1, c2, clusters, cluster_ll, cluster_nexc, deltas,
                    gamma, scale_groups, shape_cols, dim_scale, dim_shape)
            except EstimationError as exc:
                warnings.warn(f"merge refit failed for pair {(c1, c2)}: {exc}")
                delta_cache[key] = None
        return delta_cache[key]

    while len(clusters) > 1:
        ids = sorted(clusters)
        best = None
        for a_idx in range(len(ids)):
            for b_idx in range(a_idx + 1, len(ids)):
                res = pair_delta(ids[a_idx], ids[b_idx])
                if res is None:
                    continue
                if best is None or res[0] < best[0]:
                    best = (res[0], ids[a_idx], ids[b_idx], res)
        if best is None or best[0] >= 0:
            break
        dbic, c1, c2, res = best
        _, delta_m, ll_m, n_m, bic_m, bic_c = res
        clusters[c1] = clusters[c1] | clusters[c2]
        del clusters[c2]
        deltas[c1], cluster_ll[c1], cluster_nexc[c1] = delta_m, ll_m, n_m
        deltas.pop(c2, None)
        for key in [k for k in delta_cache if c1 in k or c2 in k]:
            del delta_cache[key]
        merge_log.append({"pair": (c1, c2), "delta_bic": dbic,
                          "bic_merged": bic_m, "bic_composite": bic_c,
                          "n_clusters": len(clusters)})

    shape_labels = np.zeros(n, dtype=int)
    for lab, cid in enumerate(sorted(clusters, key=lambda c: min(clusters[c])), start=1):
        for i in clusters[cid]:
            shape_labels[i] = lab
    g_delta_star = len(clusters)

    # Stage 3: one polishing multistep run from the stage-1/2 structure.
    init_assign = GroupAssignment.from_labels(scale_groups, shape_labels)
    init_params = RegressionParams(
        [g.copy() for g in gamma],
        [deltas[cid].copy() for cid in sorted(clusters, key=lambda c: min(clusters[c]))],
        shape_cols,
    )
    rng = np.random.default_rng(children[-1])
    final = multistep_fit(panel, init_assign.g_scale, g_delta_star, cfg, rng=rng,
                          init_assignment=init_assign, init_params=init_params)
    bic_table[(init_assign.g_scale, g_delta_star)] = min(
        final.bic, bic_table.get((init_assign.g_scale, g_delta_star), np.inf))
    return SearchResult(
        best_fit=final,
        bic_table=bic_table,
        trace={
            "g_scale_star": g_star,
            "g_shape_star": g_delta_star,
            "stage1_bic": {g: stage1_fits[g].bic for g in stage1_fits},
            "merges": merge_log,
            "failures": failures,
        },
    )
