"""Tests for the natural-cubic-spline mean-variance trend."""

import numpy as np
import pytest

from ebtrend.trend import (TrendFit, eval_trend, fit_trend, select_spline_df)
from ebtrend.trend import _natural_basis


class TestSelectSplineDf:
    def test_large_n(self):
        # [DERIVED] direct evaluation of the adaptive formula
        assert select_spline_df(15735, 5000) == 4

    def test_small_n(self):
        assert select_spline_df(5, 5) == 2

    def test_tiny_n_triggers_constant(self):
        assert select_spline_df(2, 2) == 1

    def test_capped_by_distinct(self):
        assert select_spline_df(1000, 3) == 3

    def test_invalid(self):
        with pytest.raises(ValueError):
            select_spline_df(0, 1)


class TestFitTrend:
    def test_constant_data(self):
        # [TRIVIAL] exact interpolation of a constant
        rng = np.random.default_rng(0)
        m = rng.standard_normal(50)
        fit = fit_trend(m, np.full(50, 3.25))
        grid = np.linspace(m.min(), m.max(), 100)
        assert np.max(np.abs(fit.evaluate(grid) - 3.25)) <= 1e-9

    def test_exact_line_recovered(self):
        # [DERIVED] natural splines contain linear functions
        m = np.linspace(0.0, 1.0, 100)
        fit = fit_trend(m, 2.0 * m + 1.0)
        grid = np.linspace(0.0, 1.0, 333)
        assert np.max(np.abs(fit.evaluate(grid) - (2.0 * grid + 1.0))) <= 1e-6
        m_hat, xi2_hat = eval_trend(fit, 0.5)
        assert m_hat == pytest.approx(2.0, abs=1e-6)
        assert xi2_hat == pytest.approx(np.exp(2.0), rel=1e-6)

    def test_two_points_constant_rule(self):
        # [DERIVED] mean rule when selected df < 2
        fit = fit_trend(np.array([0.0, 1.0]), np.array([0.0, 4.0]))
        assert fit.kind == "constant"
        assert fit.evaluate(0.3) == pytest.approx(2.0, abs=1e-12)

    def test_identical_m_falls_back_with_warning(self):
        with pytest.warns(UserWarning):
            fit = fit_trend(np.zeros(100), np.arange(100.0))
        assert fit.kind == "constant"
        assert fit.evaluate(0.0) == pytest.approx(49.5)

    def test_linear_extrapolation(self):
        # [DERIVED] second differences vanish outside boundary knots
        rng = np.random.default_rng(1)
        m = rng.uniform(0.0, 1.0, 200)
        fit = fit_trend(m, np.sin(3 * m) + 0.1 * rng.standard_normal(200))
        span = m.max() - m.min()
        for far in (m.max() + span, m.max() + 2 * span,
                    m.min() - span, m.min() - 2 * span):
            h = 0.01 * span
            vals = fit.evaluate(np.array([far - h, far, far + h]))
            assert np.isfinite(vals).all()
            second_diff = vals[0] - 2 * vals[1] + vals[2]
            assert abs(second_diff) <= 1e-8

    def test_residuals_orthogonal_to_basis(self):
        # Invariant: least-squares normal equations hold.
        rng = np.random.default_rng(2)
        m = rng.uniform(-2.0, 5.0, 400)
        y = np.cos(m) + 0.3 * rng.standard_normal(400)
        fit = fit_trend(m, y)
        t = (m - fit.m_offset) / fit.m_scale
        basis = _natural_basis(t, fit.knots)
        resid = y - fit.evaluate(m)
        assert np.max(np.abs(basis.T @ resid)) / len(m) <= 1e-8

    def test_against_independent_lstsq_oracle(self):
        # Invariant: same-knot dense least-squares oracle agrees to 1e-8.
        rng = np.random.default_rng(3)
        m = rng.uniform(0.0, 10.0, 500)
        y = 0.5 * m - 0.02 * m**2 + 0.2 * rng.standard_normal(500)
        fit = fit_trend(m, y)
        t = (m - fit.m_offset) / fit.m_scale
        basis = _natural_basis(t, fit.knots)
        # independent solve via SVD pseudoinverse
        coefs = np.linalg.pinv(basis) @ y
        probe = rng.uniform(0.0, 10.0, 1000)
        tp = (probe - fit.m_offset) / fit.m_scale
        oracle = _natural_basis(tp, fit.knots) @ coefs
        assert np.max(np.abs(fit.evaluate(probe) - oracle)) <= 1e-8

    def test_xi2_strictly_positive(self):
        rng = np.random.default_rng(4)
        m = rng.standard_normal(100)
        fit = fit_trend(m, rng.uniform(-30, 5, 100))
        grid = np.linspace(-5, 5, 500)
        assert np.all(fit.xi2(grid) > 0)

    def test_mismatched_inputs_rejected(self):
        with pytest.raises(ValueError):
            fit_trend(np.ones(3), np.ones(4))
        with pytest.raises(ValueError):
            fit_trend(np.array([0.0, 1.0]), np.array([0.0, -np.inf]))
