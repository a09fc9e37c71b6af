"""Panel data model tests: thresholds, subsampling, nets, assignments."""

import numpy as np
import pytest

from gppanel.panel import (
    ExcessPanel,
    GroupAssignment,
    PanelFormatError,
    apply_thresholds,
    derive_nets,
    read_panel_csv,
    subsample,
)


def toy_panel(n=3, t=40, seed=0):
    rng = np.random.default_rng(seed)
    raw = rng.exponential(1.0, size=(n, t))
    return apply_thresholds(raw, 0.8)


class TestApplyThresholds:
    def test_type7_quantile_threshold(self):
        raw = np.arange(1, 101, dtype=float).reshape(1, 100)
        panel = apply_thresholds(np.vstack([raw] * 100), 0.95)
        # type-7 quantile of 1..100 at 0.95 is 95.05
        assert panel.subject_threshold(0) == pytest.approx(95.05)
        assert list(panel.times[0]) == [95, 96, 97, 98, 99]
        assert panel.z[0] == pytest.approx(np.array([96, 97, 98, 99, 100]) - 95.05)

    def test_rejects_degenerate_quantile(self):
        raw = np.random.default_rng(0).exponential(1, (2, 10))
        with pytest.raises(ValueError):
            apply_thresholds(raw, 0.0)
        with pytest.raises(ValueError):
            apply_thresholds(raw, 1.0)

    def test_constant_series_flagged_not_fatal(self):
        raw = np.vstack([np.ones(20), np.random.default_rng(1).exponential(1, 20)])
        panel = apply_thresholds(raw, 0.9)
        assert panel.constant_subjects == [0]
        assert len(panel.z[0]) == 0

    def test_all_missing_subject_rejected(self):
        raw = np.full((2, 10), np.nan)
        raw[1] = np.random.default_rng(2).exponential(1, 10)
        with pytest.raises(PanelFormatError):
            apply_thresholds(raw, 0.9)

    def test_covariates_carried_with_intercept(self):
        rng = np.random.default_rng(3)
        raw = rng.exponential(1.0, (2, 50))
        cov = rng.normal(size=(2, 50, 1))
        panel = apply_thresholds(raw, 0.8, covariates=cov)
        assert panel.covariate_dim == 2
        for i in range(2):
            assert np.all(panel.x[i][:, 0] == 1.0)
            assert panel.x[i][:, 1] == pytest.approx(cov[i, panel.times[i], 0])


class TestSubsample:
    def test_full_fraction_is_identity(self):
        panel = toy_panel()
        assert subsample(panel, 1.0) is panel

    def test_cell_count(self):
        panel = toy_panel(n=12, t=2000, seed=4)
        # exponential panel at q=0.8 keeps ~20% of cells per subject
        total = panel.n_excess
        out = subsample(panel, 0.1, seed=0)
        assert out.n_excess == int(np.ceil(0.1 * total))

    def test_deterministic_under_seed(self):
        panel = toy_panel(n=5, t=200, seed=5)
        a = subsample(panel, 0.3, seed=42)
        b = subsample(panel, 0.3, seed=42)
        for i in range(5):
            assert np.array_equal(a.times[i], b.times[i])
            assert np.array_equal(a.z[i], b.z[i])

    def test_retains_original_time_indices(self):
        panel = toy_panel(n=4, t=300, seed=6)
        out = subsample(panel, 0.5, seed=1)
        for i in range(4):
            assert set(out.times[i]) <= set(panel.times[i])
            assert np.all(np.diff(out.times[i]) > 0)

    def test_rejects_zero_fraction(self):
        with pytest.raises(ValueError):
            subsample(toy_panel(), 0.0)


class TestGroupAssignment:
    def test_canonical_labels(self):
        labs = GroupAssignment.canonical_labels([3, 3, 1, 2, 1])
        assert list(labs) == [1, 1, 2, 3, 2]

    def test_partition_equality_ignores_labels(self):
        from gppanel.groupsearch import rand_index

        a = GroupAssignment(np.array([1, 1, 2]), np.array([1, 2, 2]), 2, 2)
        b = GroupAssignment(np.array([2, 2, 1]), np.array([2, 1, 1]), 2, 2)
        assert a == b
        assert rand_index(a.scale_groups, b.scale_groups) == 1.0
        assert rand_index(a.shape_groups, b.shape_groups) == 1.0

    def test_rejects_empty_group(self):
        with pytest.raises(ValueError):
            GroupAssignment(np.array([1, 1, 1]), np.array([1, 1, 2]), 2, 2)

    def test_json_round_trip(self):
        a = GroupAssignment(np.array([1, 2, 2]), np.array([1, 1, 2]), 2, 2)
        b = GroupAssignment.from_json(a.to_json())
        assert a == b
        assert b.g_scale == 2 and b.g_shape == 2

    def test_bad_json_is_parse_error(self):
        with pytest.raises(PanelFormatError):
            GroupAssignment.from_json("{}")


class TestDeriveNets:
    def test_chain_through_shared_groups(self):
        a = GroupAssignment(np.array([1, 1, 2]), np.array([1, 2, 2]), 2, 2)
        nets = derive_nets(a)
        assert len(nets) == 1
        assert nets[0].members == (0, 1, 2)

    def test_disjoint_assignments_split(self):
        a = GroupAssignment(np.array([1, 2]), np.array([1, 2]), 2, 2)
        nets = derive_nets(a)
        assert [n.members for n in nets] == [(0,), (1,)]

    def test_twelve_subject_single_net(self):
        a = GroupAssignment(
            np.array([1, 1, 1, 2, 2, 2, 3, 3, 3, 4, 4, 4]),
            np.array([1, 1, 1, 1, 2, 2, 2, 2, 3, 3, 3, 3]),
            4, 3,
        )
        nets = derive_nets(a)
        assert len(nets) == 1
        assert nets[0].members == tuple(range(12))
        # stacked parameter dimension with dim(gamma)=2, dim(delta)=1
        dim = 2 * len(nets[0].scale_labels) + 1 * len(nets[0].shape_labels)
        assert dim == 11

    def test_twelve_subject_parameter_dim_with_four_shape_groups(self):
        a = GroupAssignment(
            np.array([1, 1, 1, 2, 2, 2, 3, 3, 3, 4, 4, 4]),
            np.array([1, 1, 1, 2, 2, 2, 3, 3, 3, 4, 4, 4]),
            4, 4,
        )
        nets = derive_nets(a)
        dims = [2 * len(n.scale_labels) + 1 * len(n.shape_labels) for n in nets]
        assert dims == [3, 3, 3, 3]
        merged = GroupAssignment(
            np.array([1, 1, 1, 1, 2, 2, 2, 2, 3, 3, 3, 3]),
            np.array([1, 1, 1, 2, 2, 2, 3, 3, 3, 4, 4, 4]),
            3, 4,
        )
        net = derive_nets(merged)[0]
        assert 2 * len(net.scale_labels) + len(net.shape_labels) == 10

    def test_partition_property(self):
        rng = np.random.default_rng(9)
        for _ in range(25):
            n = rng.integers(2, 15)
            a = GroupAssignment.from_labels(
                rng.integers(1, 5, n), rng.integers(1, 4, n))
            nets = derive_nets(a)
            members = sorted(m for net in nets for m in net.members)
            assert members == list(range(n))

    def test_label_permutation_invariance(self):
        rng = np.random.default_rng(10)
        scale = rng.integers(1, 4, 10)
        shape = rng.integers(1, 3, 10)
        a = GroupAssignment.from_labels(scale, shape)
        perm = {1: 3, 2: 1, 3: 2}
        b = GroupAssignment.from_labels([perm[s] for s in scale], shape)
        assert [n.members for n in derive_nets(a)] == [n.members for n in derive_nets(b)]


class TestCsv:
    def test_round_trip(self, tmp_path):
        path = tmp_path / "panel.csv"
        path.write_text(
            "subject,time,value,covariate_1\n"
            "a,1,0.5,0.1\na,2,1.5,0.2\nb,1,2.5,0.3\nb,3,0.7,0.4\n"
        )
        raw, cov, subjects = read_panel_csv(path)
        assert subjects == ["a", "b"]
        assert raw.shape == (2, 3)
        assert raw[0, 0] == 0.5 and np.isnan(raw[0, 2])
        assert cov[1, 0, 0] == 0.3

    def test_missing_column_named(self, tmp_path):
        path = tmp_path / "panel.csv"
        path.write_text("subject,time\n" "a,1\n")
        with pytest.raises(PanelFormatError, match="value"):
            read_panel_csv(path)


def test_panel_rejects_small_t():
    with pytest.raises(PanelFormatError):
        ExcessPanel(
            n_subjects=3, n_times=2,
            times=[np.array([0])] * 3, z=[np.array([1.0])] * 3,
            x=[np.ones((1, 1))] * 3, thresholds=[np.zeros(1)] * 3,
            n_obs=np.array([2, 2, 2]),
        )


class TestSubsampleColumns:
    def test_keeps_whole_columns(self):
        from gppanel.panel import subsample_columns

        panel = toy_panel(n=6, t=400, seed=7)
        out = subsample_columns(panel, 0.25, seed=3)
        kept = set()
        for i in range(6):
            kept |= set(out.times[i].tolist())
        # every retained excess's column keeps all of that column's excesses
        for i in range(6):
            original = set(panel.times[i].tolist())
            assert set(out.times[i].tolist()) == original & kept

    def test_column_count(self):
        from gppanel.panel import subsample_columns

        panel = toy_panel(n=3, t=200, seed=8)
        out = subsample_columns(panel, 0.1, seed=0)
        cols = set()
        for i in range(3):
            cols |= set(out.times[i].tolist())
        assert len(cols) <= int(np.ceil(0.1 * 200))

    def test_deterministic(self):
        from gppanel.panel import subsample_columns

        panel = toy_panel(n=4, t=300, seed=9)
        a = subsample_columns(panel, 0.2, seed=5)
        b = subsample_columns(panel, 0.2, seed=5)
        for i in range(4):
            assert np.array_equal(a.times[i], b.times[i])

    def test_full_fraction_identity(self):
        from gppanel.panel import subsample_columns

        panel = toy_panel()
        assert subsample_columns(panel, 1.0) is panel
