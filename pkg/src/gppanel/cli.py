"""Command-line interface.

Subcommands: fit, select-groups, return-levels, simulate, replicate.
Exit codes: 0 success, 2 parse error, 3 estimation failure, 4 infeasible
request.
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np
import pandas as pd

from .covariance import WindowConfig, sandwich_all_nets, wald_intervals
from .estimate import EstimationError, FitResult, bca_fit, random_init
from .gpd import GpParams, ReturnLevelSpec, return_level, return_level_variance
from .groupsearch import SearchConfig, select_by_bic, two_stage_hier
from .panel import (
    ExcessPanel,
    GroupAssignment,
    PanelFormatError,
    apply_thresholds,
    read_panel_csv,
)
from .simgen import SimConfig, default_truth, gen_covariates, gen_excess_panel, run_study

EXIT_OK = 0
EXIT_PARSE = 2
EXIT_ESTIMATION = 3
EXIT_INFEASIBLE = 4


def _load_panel(args) -> ExcessPanel:
    raw, cov, subjects = read_panel_csv(args.input)
    if getattr(args, "excess_input", False):
        n, t = raw.shape
        times, zs, xs, us = [], [], [], []
        n_obs = np.zeros(n, dtype=int)
        for i in range(n):
            seen = np.isfinite(raw[i])
            n_obs[i] = int(seen.sum())
            idx = np.nonzero(seen & (raw[i] > 0))[0]
            times.append(idx)
            zs.append(raw[i][idx])
            if cov is None:
                xs.append(np.ones((len(idx), 1)))
            else:
                xs.append(np.hstack([np.ones((len(idx), 1)),
                                     cov[i, idx].reshape(len(idx), -1)]))
            us.append(np.zeros(len(idx)))
        return ExcessPanel(n_subjects=n, n_times=t, times=times, z=zs, x=xs,
                           thresholds=us, n_obs=n_obs, subject_ids=subjects)
    return apply_thresholds(raw, args.threshold_quantile, covariates=cov,
                            subject_ids=subjects)


def _subject_records(panel: ExcessPanel) -> list:
    recs = []
    for i in range(panel.n_subjects):
        recs.append({
            "subject": panel.subject_ids[i],
            "threshold": panel.subject_threshold(i),
            "n_obs": int(panel.n_obs[i]),
            "n_excess": int(len(panel.z[i])),
            "mean_covariate": panel.mean_covariate(i).tolist(),
        })
    return recs


def _write_fit_outputs(args, panel, fit: FitResult, sandwiches, level):
    ivals = wald_intervals(fit, sandwiches, level)
    doc = fit.to_json_dict()
    doc["subjects"] = _subject_records(panel)
    doc["window"] = args.window
    doc["level"] = level
    doc["covariance"] = {
        ",".join(str(m) for m in members): {
            "cov": sw.cov.tolist(),
            "param_index": [list(k) for k in sw.param_index],
            "ridged": sw.ridged,
        }
        for members, sw in sandwiches.items()
    }
    with open(args.output, "w") as fh:
        json.dump(doc, fh, indent=1)

    rows = []
    for (kind, lab, k), (lo, hi, degenerate) in sorted(ivals.items()):
        est = (fit.params.gamma[lab - 1][k] if kind == "gamma"
               else fit.params.delta[lab - 1][k])
        rows.append({
            "param": kind, "group": lab, "coef": k, "estimate": est,
            "lo": lo, "hi": hi, "degenerate": degenerate,
        })
    pd.DataFrame(rows).to_csv(args.output.replace(".json", "") + "_coefficients.csv",
                              index=False)


def cmd_fit(args) -> int:
    panel = _load_panel(args)
    if args.assignment:
        with open(args.assignment) as fh:
            assignment = GroupAssignment.from_json(fh.read())
    else:
        assignment = GroupAssignment(
            np.ones(panel.n_subjects, dtype=int),
            np.ones(panel.n_subjects, dtype=int), 1, 1)
    rng = np.random.default_rng(args.seed)
    shape_cols = (tuple(range(panel.covariate_dim))
                  if args.shape_covariates and panel.covariate_dim > 1 else (0,))
    init = random_init(panel, assignment, rng, shape_cols)
    fit = bca_fit(panel, assignment, init=init, rng=rng)
    sandwiches = sandwich_all_nets(panel, assignment, fit.params,
                                   WindowConfig(args.window))
    _write_fit_outputs(args, panel, fit, sandwiches, args.level)
    print(f"fit: comp_loglik={fit.comp_loglik:.4f} bic={fit.bic:.4f} "
          f"converged={fit.converged} iterations={fit.iterations}")
    return EXIT_OK


def cmd_select_groups(args) -> int:
    panel = _load_panel(args)
    cfg = SearchConfig(
        g_scale_candidates=args.g_scale,
        g_shape_candidates=args.g_shape,
        runs_per_pair=args.runs,
        seed=args.seed,
        shape_fixed_for_stage1=args.shape_fixed,
    )
    result = select_by_bic(panel, cfg) if args.method == "bic-grid" else two_stage_hier(panel, cfg)
    fit = result.best_fit
    sandwiches = sandwich_all_nets(panel, fit.assignment, fit.params,
                                   WindowConfig(args.window))
    _write_fit_outputs(args, panel, fit, sandwiches, args.level)
    table = [{"g_scale": gs, "g_shape": gd, "bic": b}
             for (gs, gd), b in sorted(result.bic_table.items())]
    report = {
        "schema_version": 1,
        "method": args.method,
        "bic_table": table,
        "best": {"g_scale": fit.assignment.g_scale, "g_shape": fit.assignment.g_shape,
                 "bic": fit.bic},
        "scale_groups": fit.assignment.scale_groups.tolist(),
        "shape_groups": fit.assignment.shape_groups.tolist(),
        "trace": _jsonable(result.trace),
    }
    with open(args.output.replace(".json", "") + "_search.json", "w") as fh:
        json.dump(report, fh, indent=1)
    print(f"select-groups: best (G_scale, G_shape)=({fit.assignment.g_scale},"
          f"{fit.assignment.g_shape}) bic={fit.bic:.4f}")
    return EXIT_OK


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.integer, np.floating)):
        return obj.item()
    return obj


def cmd_return_levels(args) -> int:
    with open(args.fit) as fh:
        doc = json.load(fh)
    fit = FitResult.from_json_dict(doc)
    subjects = doc["subjects"]
    cov_by_net = {}
    for key, sw in doc.get("covariance", {}).items():
        members = tuple(int(v) for v in key.split(","))
        cov_by_net[members] = (np.asarray(sw["cov"]),
                               [tuple(k) for k in sw["param_index"]])

    periods = [float(p) * args.obs_per_year for p in args.periods]
    rows = []
    for i, srec in enumerate(subjects):
        glab = int(fit.assignment.scale_groups[i])
        dlab = int(fit.assignment.shape_groups[i])
        x = np.asarray(srec["mean_covariate"])
        xs = x[list(fit.params.shape_cols)]
        sigma = float(np.exp(x @ fit.params.gamma[glab - 1]))
        xi = float(xs @ fit.params.delta[dlab - 1])
        zeta = srec["n_excess"] / max(srec["n_obs"], 1)
        p = GpParams(sigma, xi)

        net_cov = None
        for members, (cov, index) in cov_by_net.items():
            if i in members:
                net_cov = (cov, index)
                break
        for period, period_y in zip(periods, args.periods):
            if period * zeta < 1:
                print(f"error: period {period_y} below threshold horizon for "
                      f"subject {srec['subject']} (m*zeta={period * zeta:.3g} < 1)",
                      file=sys.stderr)
                return EXIT_INFEASIBLE
            spec = ReturnLevelSpec(srec["threshold"], zeta, period)
            level = return_level(spec, p)
            var = np.nan
            if net_cov is not None:
                cov, index = net_cov
                rows_g = [r for r, k in enumerate(index) if k[0] == "gamma" and k[1] == glab]
                rows_d = [r for r, k in enumerate(index) if k[0] == "delta" and k[1] == dlab]
                c3 = np.zeros((3, 3))
                cg = cov[np.ix_(rows_g, rows_g)]
                cd = cov[np.ix_(rows_d, rows_d)]
                cgd = cov[np.ix_(rows_g, rows_d)]
                c3[0, 0] = sigma**2 * x @ cg @ x
                c3[1, 1] = xs @ cd @ xs
                c3[0, 1] = c3[1, 0] = sigma * x @ cgd @ xs
                c3[2, 2] = zeta * (1 - zeta) / max(srec["n_obs"], 1)
                var = return_level_variance(spec, p, c3)
            sd = float(np.sqrt(var)) if np.isfinite(var) else np.nan
            rows.append({
                "subject": srec["subject"], "period": period_y,
                "period_obs": period, "level": level,
                "lo": level - 1.959964 * sd if np.isfinite(sd) else np.nan,
                "hi": level + 1.959964 * sd if np.isfinite(sd) else np.nan,
                "sd": sd,
            })
    pd.DataFrame(rows).to_csv(args.output, index=False)
    print(f"return-levels: wrote {len(rows)} rows to {args.output}")
    return EXIT_OK


def _sim_config(args) -> SimConfig:
    params, assignment = default_truth()
    return SimConfig(
        n_subjects=assignment.n_subjects,
        n_times=args.n_times,
        truth_params=params,
        truth_assignment=assignment,
        dependence=args.dependence,
        sample_mode=getattr(args, "sample_mode", "columns"),
        block_len=args.block_len,
        within_group_corr=args.rho_in,
        between_group_corr=args.rho_out,
        sample_fraction=args.sample_fraction,
        window=args.window,
        seed=args.seed,
    )


def cmd_simulate(args) -> int:
    cfg = _sim_config(args)
    rng = np.random.default_rng(cfg.seed)
    covariates = gen_covariates(cfg, rng)
    panel = gen_excess_panel(cfg, covariates, rng)
    rows = []
    for i in range(panel.n_subjects):
        for k, t in enumerate(panel.times[i]):
            rows.append({
                "subject": panel.subject_ids[i], "time": int(t),
                "value": panel.z[i][k], "covariate_1": panel.x[i][k, 1],
            })
    pd.DataFrame(rows).to_csv(args.output, index=False)
    truth_doc = {
        "schema_version": 1,
        "params": cfg.truth_params.to_dict(),
        "assignment": json.loads(cfg.truth_assignment.to_json()),
        "dependence": cfg.dependence,
        "seed": cfg.seed,
    }
    with open(args.output.replace(".csv", "") + "_truth.json", "w") as fh:
        json.dump(truth_doc, fh, indent=1)
    print(f"simulate: wrote {len(rows)} excess cells to {args.output}")
    return EXIT_OK


def cmd_replicate(args) -> int:
    if args.config:
        with open(args.config) as fh:
            conf = json.load(fh)
    else:
        conf = {}

    def pick(name, default):
        return conf.get(name, getattr(args, name, default))

    params, assignment = default_truth()
    cfg = SimConfig(
        n_subjects=assignment.n_subjects,
        n_times=int(pick("n_times", 2000)),
        truth_params=params,
        truth_assignment=assignment,
        dependence=pick("dependence", "independence"),
        sample_mode=pick("sample_mode", "columns"),
        block_len=int(pick("block_len", 4)),
        within_group_corr=float(pick("rho_in", 0.9)),
        between_group_corr=float(pick("rho_out", 0.1)),
        sample_fraction=float(pick("sample_fraction", 0.1)),
        window=int(pick("window", 0)),
        seed=int(pick("seed", 0)),
    )
    search_cfg = SearchConfig(
        g_scale_candidates=conf.get("g_scale_candidates", [3, 4, 5]),
        g_shape_candidates=conf.get("g_shape_candidates", [2, 3, 4]),
        runs_per_pair=int(conf.get("runs_per_pair", 3)),
        seed=cfg.seed,
    )
    records, aggregate, n_discarded = run_study(
        cfg, args.reps, args.study, search_cfg=search_cfg,
        mode=conf.get("mode", args.mode), n_jobs=args.jobs)

    rows = []
    for r in records:
        row = {"rep": r.seed, "bic": r.bic, "rand_scale": r.rand_scale,
               "rand_shape": r.rand_shape}
        for k, v in r.extra.items():
            row[k] = str(v)
        if r.covered:
            for key, val in r.covered.items():
                row[f"covered_{key[0]}_{key[1]}_{key[2]}"] = val
        rows.append(row)
    pd.DataFrame(rows).to_csv(args.output, index=False)
    agg_doc = {
        "schema_version": 1,
        "study": args.study,
        "n_reps": args.reps,
        "n_discarded": n_discarded,
        "aggregate": _jsonable(aggregate),
    }
    with open(args.output.replace(".csv", "") + "_aggregate.json", "w") as fh:
        json.dump(agg_doc, fh, indent=1)
    print(f"replicate: {args.study} study, {len(records)} replications kept, "
          f"{n_discarded} discarded")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gppanel",
        description="Grouped panel GP regression for peaks over thresholds",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common_fit_args(p):
        p.add_argument("--input", required=True, help="long-format panel CSV")
        p.add_argument("--output", required=True, help="result JSON path")
        p.add_argument("--threshold-quantile", type=float, default=0.95,
                       dest="threshold_quantile")
        p.add_argument("--excess-input", action="store_true", dest="excess_input",
                       help="input already holds excesses over zero thresholds")
        p.add_argument("--window", type=int, default=0, help="dependence window m")
        p.add_argument("--level", type=float, default=0.95)
        p.add_argument("--seed", type=int, default=0)

    p_fit = sub.add_parser("fit", help="fit with a known (or trivial) group structure")
    common_fit_args(p_fit)
    p_fit.add_argument("--assignment", help="GroupAssignment JSON path")
    p_fit.add_argument("--shape-covariates", action="store_true",
                       dest="shape_covariates",
                       help="let the shape depend on all covariates "
                            "(default: intercept only)")
    p_fit.set_defaults(func=cmd_fit)

    p_sel = sub.add_parser("select-groups", help="search the latent group structure")
    common_fit_args(p_sel)
    p_sel.add_argument("--method", choices=["two-stage", "bic-grid"], default="two-stage")
    p_sel.add_argument("--g-scale", type=int, nargs="+", default=[2, 3, 4, 5, 6])
    p_sel.add_argument("--g-shape", type=int, nargs="+", default=[2, 3, 4])
    p_sel.add_argument("--runs", type=int, default=3)
    p_sel.add_argument("--shape-fixed", type=int, default=None,
                       help="stage-1 shape group count (default ceil(sqrt(N)))")
    p_sel.set_defaults(func=cmd_select_groups)

    p_rl = sub.add_parser("return-levels", help="per-subject return levels from a fit")
    p_rl.add_argument("--fit", required=True, help="fit JSON from the fit command")
    p_rl.add_argument("--output", required=True)
    p_rl.add_argument("--periods", type=float, nargs="+", required=True)
    p_rl.add_argument("--obs-per-year", type=float, default=1.0, dest="obs_per_year",
                      help="observations per year when periods are in years")
    p_rl.set_defaults(func=cmd_return_levels)

    p_sim = sub.add_parser("simulate", help="generate one synthetic excess panel")
    p_sim.add_argument("--output", required=True)
    p_sim.add_argument("--n-times", type=int, default=2000, dest="n_times")
    p_sim.add_argument("--dependence",
                       choices=["independence", "cross_sectional", "block_wise"],
                       default="independence")
    p_sim.add_argument("--block-len", type=int, default=4, dest="block_len")
    p_sim.add_argument("--rho-in", type=float, default=0.9, dest="rho_in")
    p_sim.add_argument("--rho-out", type=float, default=0.1, dest="rho_out")
    p_sim.add_argument("--sample-fraction", type=float, default=0.1,
                       dest="sample_fraction")
    p_sim.add_argument("--sample-mode", choices=["columns", "cells"],
                       default="columns", dest="sample_mode")
    p_sim.add_argument("--window", type=int, default=0)
    p_sim.add_argument("--seed", type=int, default=0)
    p_sim.set_defaults(func=cmd_simulate)

    p_rep = sub.add_parser("replicate", help="run a Monte-Carlo replication study")
    p_rep.add_argument("--study", choices=["coverage", "rand", "identification"],
                       required=True)
    p_rep.add_argument("--reps", type=int, default=10)
    p_rep.add_argument("--mode", choices=["conditional", "joint"], default="conditional")
    p_rep.add_argument("--config", help="JSON study config file")
    p_rep.add_argument("--output", required=True, help="per-replication CSV path")
    p_rep.add_argument("--jobs", type=int, default=1)
    p_rep.add_argument("--n-times", type=int, default=2000, dest="n_times")
    p_rep.add_argument("--dependence", default="independence")
    p_rep.add_argument("--seed", type=int, default=0)
    p_rep.set_defaults(func=cmd_replicate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except PanelFormatError as exc:
        print(f"parse error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except EstimationError as exc:
        print(f"estimation failure: {exc}", file=sys.stderr)
        return EXIT_ESTIMATION
    except ValueError as exc:
        print(f"infeasible request: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE


if __name__ == "__main__":
    sys.exit(main())
