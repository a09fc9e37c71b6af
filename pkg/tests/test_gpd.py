"""GP primitive tests: exact values, finite-difference oracles, invariants."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import minimize

from gppanel.gpd import (
    GpParams,
    ReturnLevelSpec,
    gp_cdf,
    gp_loglik,
    gp_quantile,
    gp_score_hessian,
    return_level,
    return_level_gradient,
    return_level_variance,
    score_components,
)

PARAM_GRID = [
    GpParams(s, x)
    for s in (0.1, 0.5, 1.0, 2.0, 5.0)
    for x in (-0.45, -0.2, 0.1, 0.5, 1.0, 1.5)
]


def fd_score(z, sigma, xi, h=1e-5):
    """Central finite differences of gp_loglik in (scale, shape)."""
    hs = h * max(1.0, abs(sigma))
    hx = h * max(1.0, abs(xi))
    ds = (gp_loglik(z, GpParams(sigma + hs, xi)) - gp_loglik(z, GpParams(sigma - hs, xi))) / (2 * hs)
    dx = (gp_loglik(z, GpParams(sigma, xi + hx)) - gp_loglik(z, GpParams(sigma, xi - hx))) / (2 * hx)
    return np.array([ds, dx])


def fd_hessian(z, sigma, xi, h=None):
    """Central finite differences of the analytic score. Near xi=0 a larger
    step avoids amplifying the exact-branch score roundoff by 1/(2h);
    elsewhere the usual small step keeps truncation negligible."""
    if h is None:
        h = 1e-4 if abs(xi) < 1e-3 else 1e-5
    hs = h * max(1.0, abs(sigma))
    hx = h * max(1.0, abs(xi))
    sp, _ = gp_score_hessian(z, GpParams(sigma + hs, xi))
    sm, _ = gp_score_hessian(z, GpParams(sigma - hs, xi))
    col_s = (sp - sm) / (2 * hs)
    sp, _ = gp_score_hessian(z, GpParams(sigma, xi + hx))
    sm, _ = gp_score_hessian(z, GpParams(sigma, xi - hx))
    col_x = (sp - sm) / (2 * hx)
    return np.column_stack([col_s, col_x])


class TestCdfQuantile:
    def test_cdf_known_values(self):
        assert gp_cdf(1.0, GpParams(1.0, 1.0)) == pytest.approx(0.5)
        assert gp_cdf(1.0, GpParams(1.0, 0.0)) == pytest.approx(1 - np.exp(-1))
        assert gp_cdf(2.0, GpParams(1.0, -0.5)) == 1.0

    def test_cdf_rejects_bad_input(self):
        with pytest.raises(ValueError):
            gp_cdf(np.nan, GpParams(1.0, 0.1))
        with pytest.raises(ValueError):
            gp_cdf(-0.1, GpParams(1.0, 0.1))
        with pytest.raises(ValueError):
            GpParams(0.0, 0.1)

    def test_quantile_known_values(self):
        assert gp_quantile(0.0, GpParams(2.3, 0.7)) == 0.0
        assert gp_quantile(0.5, GpParams(1.0, 1.0)) == pytest.approx(1.0)
        assert gp_quantile(1 - np.exp(-1), GpParams(1.0, 0.0)) == pytest.approx(1.0)

    def test_quantile_rejects_unit_prob(self):
        with pytest.raises(ValueError):
            gp_quantile(1.0, GpParams(1.0, 0.1))

    @pytest.mark.parametrize("p", PARAM_GRID)
    def test_round_trip(self, p):
        probs = np.arange(0.01, 1.0, 0.01)
        z = gp_quantile(probs, p)
        assert np.max(np.abs(gp_cdf(z, p) - probs)) < 1e-10

    @pytest.mark.parametrize("p", PARAM_GRID)
    def test_cdf_strictly_increasing(self, p):
        hi = gp_quantile(0.999, p)
        z = np.linspace(0, hi, 200)
        assert np.all(np.diff(gp_cdf(z, p)) > 0)

    def test_continuity_at_zero_shape(self):
        z = np.linspace(1e-3, 10.0, 57)
        for sigma in (0.3, 1.0, 4.0):
            base = gp_cdf(z / sigma * sigma, GpParams(sigma, 0.0))
            for xi in (1e-9, -1e-9):
                close = gp_cdf(z, GpParams(sigma, xi))
                assert np.max(np.abs(close - base)) < 1e-7

    @given(
        prob=st.floats(0.0, 0.99),
        scale=st.floats(0.1, 5.0),
        shape=st.floats(-0.45, 1.5),
    )
    @settings(max_examples=200, deadline=None)
    def test_round_trip_property(self, prob, scale, shape):
        p = GpParams(scale, shape)
        assert gp_cdf(gp_quantile(prob, p), p) == pytest.approx(prob, abs=1e-10)


class TestLoglik:
    def test_known_values(self):
        assert gp_loglik([1.0], GpParams(1.0, 1.0)) == pytest.approx(-2 * np.log(2))
        assert gp_loglik([1.0], GpParams(1.0, 0.0)) == pytest.approx(-1.0)

    def test_support_violation_is_sentinel(self):
        assert gp_loglik([2.0], GpParams(1.0, -0.6)) == float("-inf")

    def test_rejects_empty_and_nonfinite(self):
        with pytest.raises(ValueError):
            gp_loglik([], GpParams(1.0, 0.1))
        with pytest.raises(ValueError):
            gp_loglik([1.0, np.inf], GpParams(1.0, 0.1))

    def test_additivity(self):
        rng = np.random.default_rng(7)
        p = GpParams(1.3, 0.25)
        z = gp_quantile(rng.uniform(0, 0.99, 17), p)
        total = gp_loglik(z, p)
        parts = sum(gp_loglik([v], p) for v in z)
        assert total == pytest.approx(parts, rel=1e-12)


class TestScoreHessian:
    def test_score_matches_fd_at_unit_point(self):
        score, _ = gp_score_hessian([1.0], GpParams(1.0, 1.0))
        fd = fd_score([1.0], 1.0, 1.0)
        assert np.max(np.abs(score - fd) / np.maximum(np.abs(fd), 1.0)) < 1e-6

    @pytest.mark.parametrize("p", PARAM_GRID)
    def test_score_and_hessian_match_fd_on_grid(self, p):
        rng = np.random.default_rng(42)
        z = gp_quantile(rng.uniform(0.05, 0.9, 25), p)
        score, hess = gp_score_hessian(z, p)
        fd_s = fd_score(z, p.scale, p.shape)
        assert np.max(np.abs(score - fd_s) / np.maximum(np.abs(fd_s), 1.0)) < 1e-5
        fd_h = fd_hessian(z, p.scale, p.shape)
        assert np.max(np.abs(hess - fd_h) / np.maximum(np.abs(fd_h), 1.0)) < 1e-5

    def test_series_branch_matches_fd(self):
        z = np.array([0.4, 1.1, 2.7])
        score, hess = gp_score_hessian(z, GpParams(1.2, 0.0))
        fd_s = fd_score(z, 1.2, 0.0)
        assert np.max(np.abs(score - fd_s) / np.maximum(np.abs(fd_s), 1.0)) < 1e-5
        fd_h = fd_hessian(z, 1.2, 0.0)
        assert np.max(np.abs(hess - fd_h) / np.maximum(np.abs(fd_h), 1.0)) < 1e-5

    def test_score_zero_at_mle(self):
        rng = np.random.default_rng(3)
        z = gp_quantile(rng.uniform(0, 1 - 1e-9, 400), GpParams(2.0, 0.3))

        def nll(theta):
            return -gp_loglik(z, GpParams(theta[0], theta[1]))

        res = minimize(nll, [2.0, 0.3], method="Nelder-Mead",
                       options={"xatol": 1e-10, "fatol": 1e-12, "maxfev": 20000})
        # polish with finite-difference Newton steps, independent of the
        # analytic derivatives being tested
        theta = np.asarray(res.x)
        h = 1e-5
        for _ in range(4):
            g = np.array([
                (nll(theta + [h, 0]) - nll(theta - [h, 0])) / (2 * h),
                (nll(theta + [0, h]) - nll(theta - [0, h])) / (2 * h),
            ])
            hess = np.empty((2, 2))
            hess[0, 0] = (nll(theta + [h, 0]) - 2 * nll(theta) + nll(theta - [h, 0])) / h**2
            hess[1, 1] = (nll(theta + [0, h]) - 2 * nll(theta) + nll(theta - [0, h])) / h**2
            hess[0, 1] = hess[1, 0] = (
                nll(theta + [h, h]) - nll(theta + [h, -h])
                - nll(theta + [-h, h]) + nll(theta - [h, h])
            ) / (4 * h**2)
            theta = theta - np.linalg.solve(hess, g)
        score, _ = gp_score_hessian(z, GpParams(*theta))
        assert np.max(np.abs(score)) < 1e-6

    def test_hessian_exactly_symmetric(self):
        _, hess = gp_score_hessian([0.7, 1.9], GpParams(1.1, 0.4))
        assert hess[0, 1] - hess[1, 0] == 0.0

    def test_support_violation_raises(self):
        with pytest.raises(ValueError):
            gp_score_hessian([3.0], GpParams(1.0, -0.5))

    def test_vectorized_components_mixed_branches(self):
        z = np.array([0.5, 1.5])
        ds, dx = score_components(z, np.array([1.0, 1.0]), np.array([0.0, 0.4]))
        fd0 = fd_score([0.5], 1.0, 0.0)
        fd1 = fd_score([1.5], 1.0, 0.4)
        assert ds[0] == pytest.approx(fd0[0], rel=1e-6)
        assert dx[1] == pytest.approx(fd1[1], rel=1e-6)


class TestReturnLevel:
    def test_known_value(self):
        spec = ReturnLevelSpec(10.0, 0.05, 100.0)
        assert return_level(spec, GpParams(2.0, 0.5)) == pytest.approx(
            10 + 4 * (np.sqrt(5) - 1))

    def test_boundary_period_gives_threshold(self):
        spec = ReturnLevelSpec(3.5, 0.25, 4.0)
        assert return_level(spec, GpParams(1.7, 0.8)) == pytest.approx(3.5)

    def test_log_branch(self):
        spec = ReturnLevelSpec(0.0, 1.0, np.e)
        assert return_level(spec, GpParams(1.0, 0.0)) == pytest.approx(1.0)

    def test_below_horizon_rejected(self):
        with pytest.raises(ValueError):
            return_level(ReturnLevelSpec(0.0, 0.01, 10.0), GpParams(1.0, 0.1))

    def test_monotone_in_period(self):
        p = GpParams(2.0, 0.2)
        levels = [return_level(ReturnLevelSpec(1.0, 0.05, m), p)
                  for m in (20, 50, 100, 500, 1000)]
        assert np.all(np.diff(levels) > 0)

    @pytest.mark.parametrize("shape", [-0.3, 0.0, 0.4])
    def test_gradient_matches_fd(self, shape):
        spec = ReturnLevelSpec(5.0, 0.08, 200.0)
        p = GpParams(1.5, shape)
        g = return_level_gradient(spec, p)
        h = 1e-6
        fd = np.array([
            (return_level(spec, GpParams(1.5 + h, shape))
             - return_level(spec, GpParams(1.5 - h, shape))) / (2 * h),
            (return_level(spec, GpParams(1.5, shape + h))
             - return_level(spec, GpParams(1.5, shape - h))) / (2 * h),
            (return_level(ReturnLevelSpec(5.0, 0.08 + h, 200.0), p)
             - return_level(ReturnLevelSpec(5.0, 0.08 - h, 200.0), p)) / (2 * h),
        ])
        assert np.max(np.abs(g - fd) / np.maximum(np.abs(fd), 1.0)) < 1e-6

    def test_variance_zero_cov(self):
        spec = ReturnLevelSpec(5.0, 0.08, 200.0)
        assert return_level_variance(spec, GpParams(1.5, 0.2), np.zeros((3, 3))) == 0.0

    def test_variance_linear_in_cov(self):
        spec = ReturnLevelSpec(5.0, 0.08, 200.0)
        p = GpParams(1.5, 0.2)
        rng = np.random.default_rng(11)
        a = rng.standard_normal((3, 3))
        cov = a @ a.T
        assert return_level_variance(spec, p, 2 * cov) == pytest.approx(
            2 * return_level_variance(spec, p, cov))

    def test_variance_rejects_bad_cov(self):
        spec = ReturnLevelSpec(5.0, 0.08, 200.0)
        p = GpParams(1.5, 0.2)
        with pytest.raises(ValueError):
            return_level_variance(spec, p, np.zeros((2, 2)))
        bad = -np.eye(3)
        with pytest.raises(ValueError):
            return_level_variance(spec, p, bad)
