"""Sparse excess panels, two-level group assignments and subject nets.

An ExcessPanel keeps only the cells whose observation exceeded its
threshold, but retains the original time indices so dependence windows
stay meaningful. Covariate vectors always start with an intercept 1.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

__all__ = [
    "ExcessPanel",
    "GroupAssignment",
    "SubjectNet",
    "derive_nets",
    "apply_thresholds",
    "subsample",
    "subsample_columns",
    "read_panel_csv",
    "PanelFormatError",
]


class PanelFormatError(ValueError):
    """Raised when input panel data cannot be parsed or is inconsistent."""


@dataclass
class ExcessPanel:
    """Threshold excesses of an N x T panel, stored per subject.

    times[i]      strictly increasing integer time indices of subject i's excesses
    z[i]          excess values, aligned with times[i]
    x[i]          covariate matrix (len(times[i]) x p), first column all ones
    thresholds[i] threshold used at each excess cell
    n_obs[i]      number of non-missing raw observations behind subject i
                  (denominator of the empirical exceedance probability)
    subject_ids   external labels, parallel to the subject axis
    """

    n_subjects: int
    n_times: int
    times: list[np.ndarray]
    z: list[np.ndarray]
    x: list[np.ndarray]
    thresholds: list[np.ndarray]
    n_obs: np.ndarray
    subject_ids: list[str] = field(default_factory=list)
    constant_subjects: list[int] = field(default_factory=list)

    def __post_init__(self):
        if self.n_subjects < 1 or self.n_times < self.n_subjects:
            raise PanelFormatError(
                f"need n_times >= n_subjects >= 1, got N={self.n_subjects} T={self.n_times}"
            )
        if not self.subject_ids:
            self.subject_ids = [str(i + 1) for i in range(self.n_subjects)]
        p = self.covariate_dim
        for i in range(self.n_subjects):
            t = self.times[i]
            if len(t) != len(self.z[i]) or len(t) != len(self.x[i]):
                raise PanelFormatError(f"subject {i}: misaligned arrays")
            if len(t) and (np.any(np.diff(t) <= 0)):
                raise PanelFormatError(f"subject {i}: times must be strictly increasing")
            if np.any(self.z[i] < 0):
                raise PanelFormatError(f"subject {i}: negative excess")
            if len(t) and self.x[i].shape[1] != p:
                raise PanelFormatError(f"subject {i}: covariate dimension mismatch")

    @property
    def covariate_dim(self) -> int:
        for xi in self.x:
            if len(xi):
                return xi.shape[1]
        return 1

    @property
    def n_excess(self) -> int:
        return int(sum(len(t) for t in self.times))

    def exceed_counts(self) -> np.ndarray:
        return np.array([len(t) for t in self.times])

    def exceed_probs(self) -> np.ndarray:
        """Empirical per-subject exceedance proportions |T_i| / n_obs_i."""
        return self.exceed_counts() / np.maximum(self.n_obs, 1)

    def subject_threshold(self, i: int) -> float:
        u = self.thresholds[i]
        return float(u[0]) if len(u) else 0.0

    def mean_covariate(self, i: int) -> np.ndarray:
        if len(self.x[i]) == 0:
            return np.zeros(self.covariate_dim)
        return self.x[i].mean(axis=0)


@dataclass
class GroupAssignment:
    """Two-level latent partition: scale groups and shape groups.

    Labels live in {1..g_scale} / {1..g_shape} and are canonicalized by
    first appearance, so two assignments equal as partitions compare equal.
    """

    scale_groups: np.ndarray
    shape_groups: np.ndarray
    g_scale: int
    g_shape: int

    def __post_init__(self):
        self.scale_groups = np.asarray(self.scale_groups, dtype=int)
        self.shape_groups = np.asarray(self.shape_groups, dtype=int)
        if len(self.scale_groups) != len(self.shape_groups):
            raise ValueError("scale and shape assignments must have equal length")
        for name, labels, g in (
            ("scale", self.scale_groups, self.g_scale),
            ("shape", self.shape_groups, self.g_shape),
        ):
            present = set(labels.tolist())
            if present != set(range(1, g + 1)):
                raise ValueError(
                    f"{name} labels must cover 1..{g} with no empty group, got {sorted(present)}"
                )

    @property
    def n_subjects(self) -> int:
        return len(self.scale_groups)

    @staticmethod
    def canonical_labels(labels) -> np.ndarray:
        """Relabel by order of first appearance: first subject's label is 1."""
        labels = np.asarray(labels, dtype=int)
        mapping: dict[int, int] = {}
        out = np.empty_like(labels)
        for i, lab in enumerate(labels):
            if lab not in mapping:
                mapping[lab] = len(mapping) + 1
            out[i] = mapping[lab]
        return out

    @classmethod
    def from_labels(cls, scale_groups, shape_groups) -> "GroupAssignment":
        """Build a canonicalized assignment from arbitrary label vectors."""
        sg = cls.canonical_labels(scale_groups)
        hg = cls.canonical_labels(shape_groups)
        return cls(sg, hg, int(sg.max()), int(hg.max()))

    def canonicalized(self) -> "GroupAssignment":
        return GroupAssignment.from_labels(self.scale_groups, self.shape_groups)

    def __eq__(self, other) -> bool:
        if not isinstance(other, GroupAssignment):
            return NotImplemented
        a, b = self.canonicalized(), other.canonicalized()
        return bool(
            np.array_equal(a.scale_groups, b.scale_groups)
            and np.array_equal(a.shape_groups, b.shape_groups)
        )

    def to_json(self) -> str:
        return json.dumps(
            {
                "schema_version": 1,
                "scale_groups": self.scale_groups.tolist(),
                "shape_groups": self.shape_groups.tolist(),
                "g_scale": self.g_scale,
                "g_shape": self.g_shape,
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "GroupAssignment":
        try:
            obj = json.loads(text)
            return cls(
                np.asarray(obj["scale_groups"]),
                np.asarray(obj["shape_groups"]),
                int(obj["g_scale"]),
                int(obj["g_shape"]),
            )
        except (KeyError, TypeError, json.JSONDecodeError) as exc:
            raise PanelFormatError(f"bad assignment JSON: {exc}") from exc


@dataclass(frozen=True)
class SubjectNet:
    """Maximal set of subjects connected through shared scale or shape groups."""

    members: tuple[int, ...]
    scale_labels: frozenset[int]
    shape_labels: frozenset[int]


def derive_nets(a: GroupAssignment) -> list[SubjectNet]:
    """Connected components of the shared-group graph, ordered by smallest member.

    Subjects are adjacent when they share a scale-group label or a
    shape-group label. Members are 0-based subject indices.
    """
    n = a.n_subjects
    parent = list(range(n))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    def union(i, j):
        ri, rj = find(i), find(j)
        if ri != rj:
            parent[max(ri, rj)] = min(ri, rj)

    first_scale: dict[int, int] = {}
    first_shape: dict[int, int] = {}
    for i in range(n):
        union(i, first_scale.setdefault(int(a.scale_groups[i]), i))
        union(i, first_shape.setdefault(int(a.shape_groups[i]), i))

    comps: dict[int, list[int]] = {}
    for i in range(n):
        comps.setdefault(find(i), []).append(i)
    nets = []
    for root in sorted(comps):
        members = tuple(sorted(comps[root]))
        nets.append(
            SubjectNet(
                members=members,
                scale_labels=frozenset(int(a.scale_groups[i]) for i in members),
                shape_labels=frozenset(int(a.shape_groups[i]) for i in members),
            )
        )
    return nets


def apply_thresholds(raw: np.ndarray, quantile: float, covariates=None,
                     subject_ids=None) -> ExcessPanel:
    """Threshold a dense N x T observation panel at per-subject empirical quantiles.

    Uses the linear-interpolation (type-7) empirical quantile. NaN entries are
    treated as missing. Constant series yield zero excesses and are listed in
    constant_subjects rather than raising.
    """
    raw = np.asarray(raw, dtype=float)
    if raw.ndim != 2:
        raise PanelFormatError("raw panel must be 2-dimensional (subjects x times)")
    if not (0 < quantile < 1):
        raise ValueError(f"threshold quantile must be in (0,1), got {quantile}")
    n, t = raw.shape
    if covariates is not None:
        covariates = np.asarray(covariates, dtype=float)
        if covariates.shape[:2] != (n, t):
            raise PanelFormatError("covariates must align with the raw panel")

    times, zs, xs, us = [], [], [], []
    n_obs = np.zeros(n, dtype=int)
    constant = []
    for i in range(n):
        row = raw[i]
        seen = np.isfinite(row)
        n_obs[i] = int(seen.sum())
        if n_obs[i] == 0:
            raise PanelFormatError(f"subject {i}: all observations missing")
        u = float(np.quantile(row[seen], quantile))
        keep = seen & (row > u)
        idx = np.nonzero(keep)[0]
        if len(idx) == 0:
            constant.append(i)
        times.append(idx.astype(int))
        zs.append(row[idx] - u)
        if covariates is None:
            x = np.ones((len(idx), 1))
        else:
            x = np.hstack([np.ones((len(idx), 1)), covariates[i, idx].reshape(len(idx), -1)])
        xs.append(x)
        us.append(np.full(len(idx), u))

    return ExcessPanel(
        n_subjects=n,
        n_times=t,
        times=times,
        z=zs,
        x=xs,
        thresholds=us,
        n_obs=n_obs,
        subject_ids=list(subject_ids) if subject_ids is not None else [],
        constant_subjects=constant,
    )


def subsample(panel: ExcessPanel, fraction: float, seed=None) -> ExcessPanel:
    """Keep ceil(fraction * count) excess cells, sampled uniformly without
    replacement across the whole panel. Original time indices are retained."""
    if not (0 < fraction <= 1):
        raise ValueError(f"fraction must be in (0,1], got {fraction}")
    if fraction == 1:
        return panel
    rng = np.random.default_rng(seed)
    cells = [(i, k) for i in range(panel.n_subjects) for k in range(len(panel.times[i]))]
    count = len(cells)
    take = int(np.ceil(fraction * count))
    chosen = rng.choice(count, size=take, replace=False)
    keep_per_subject: list[list[int]] = [[] for _ in range(panel.n_subjects)]
    for c in chosen:
        i, k = cells[c]
        keep_per_subject[i].append(k)

    times, zs, xs, us = [], [], [], []
    for i in range(panel.n_subjects):
        ks = np.array(sorted(keep_per_subject[i]), dtype=int)
        times.append(panel.times[i][ks] if len(ks) else np.empty(0, dtype=int))
        zs.append(panel.z[i][ks] if len(ks) else np.empty(0))
        xs.append(panel.x[i][ks] if len(ks) else np.empty((0, panel.covariate_dim)))
        us.append(panel.thresholds[i][ks] if len(ks) else np.empty(0))
    return ExcessPanel(
        n_subjects=panel.n_subjects,
        n_times=panel.n_times,
        times=times,
        z=zs,
        x=xs,
        thresholds=us,
        n_obs=panel.n_obs.copy(),
        subject_ids=list(panel.subject_ids),
        constant_subjects=list(panel.constant_subjects),
    )


def subsample_columns(panel: ExcessPanel, fraction: float, seed=None) -> ExcessPanel:
    """Keep ceil(fraction * n_times) whole time columns, sampled uniformly
    without replacement; all excesses in a retained column survive.

    Complements cell-level `subsample`: retained columns keep their full
    cross-sectional dependence, which is what the replication studies need.
    """
    if not (0 < fraction <= 1):
        raise ValueError(f"fraction must be in (0,1], got {fraction}")
    if fraction == 1:
        return panel
    rng = np.random.default_rng(seed)
    keep = np.sort(rng.choice(panel.n_times, size=int(np.ceil(fraction * panel.n_times)),
                              replace=False))
    times, zs, xs, us = [], [], [], []
    for i in range(panel.n_subjects):
        mask = np.isin(panel.times[i], keep)
        times.append(panel.times[i][mask])
        zs.append(panel.z[i][mask])
        xs.append(panel.x[i][mask])
        us.append(panel.thresholds[i][mask])
    return ExcessPanel(
        n_subjects=panel.n_subjects,
        n_times=panel.n_times,
        times=times,
        z=zs,
        x=xs,
        thresholds=us,
        n_obs=panel.n_obs.copy(),
        subject_ids=list(panel.subject_ids),
        constant_subjects=list(panel.constant_subjects),
    )


def read_panel_csv(path) -> tuple[np.ndarray, np.ndarray | None, list[str]]:
    """Read a long-format panel CSV: subject,time,value[,covariate_1,...].

    Returns (raw N x T array with NaN for missing cells, covariate array
    N x T x k or None, subject ids in first-appearance order).
    """
    try:
        df = pd.read_csv(path)
    except Exception as exc:
        raise PanelFormatError(f"cannot parse {path}: {exc}") from exc
    for col in ("subject", "time", "value"):
        if col not in df.columns:
            raise PanelFormatError(f"missing required column '{col}' in {path}")
    cov_cols = [c for c in df.columns if c.startswith("covariate_")]
    bad = df["time"].isna() | df["value"].isna()
    if bad.any():
        raise PanelFormatError(f"line {int(df.index[bad][0]) + 2}: missing time or value")

    subjects = list(dict.fromkeys(df["subject"].astype(str)))
    sub_index = {s: i for i, s in enumerate(subjects)}
    t_raw = df["time"].to_numpy()
    if not np.allclose(t_raw, np.round(t_raw)):
        raise PanelFormatError("time column must hold integers")
    t_int = np.round(t_raw).astype(int)
    t0 = int(t_int.min())
    t_idx = t_int - t0
    n, t_count = len(subjects), int(t_idx.max()) + 1

    raw = np.full((n, t_count), np.nan)
    rows = df["subject"].astype(str).map(sub_index).to_numpy()
    raw[rows, t_idx] = df["value"].to_numpy(dtype=float)
    cov = None
    if cov_cols:
        cov = np.full((n, t_count, len(cov_cols)), np.nan)
        for k, c in enumerate(cov_cols):
            if df[c].isna().any():
                raise PanelFormatError(f"missing value in covariate column '{c}'")
            cov[rows, t_idx, k] = df[c].to_numpy(dtype=float)
    return raw, cov, subjects
