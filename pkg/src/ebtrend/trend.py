"""Mean-variance trend fitting.

Fits log(S^2) against the side-information M with a least-squares natural
cubic spline. Degrees of freedom are chosen adaptively from the number of
units; tiny inputs fall back to a constant fit. The exponential of the
fitted curve is the multiplicative variance target xi^2(.) used downstream.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np


def select_spline_df(n: int, distinct_m: int) -> int:
    """Adaptive spline degrees of freedom, capped by the distinct-M count."""
    if n < 1 or distinct_m < 1:
        raise ValueError("need at least one point")
    adaptive = 1 + int(n >= 3) + int(n >= 6) + int(n >= 30)
    return min(adaptive, distinct_m)


def _natural_basis(x: np.ndarray, knots: np.ndarray) -> np.ndarray:
    """Natural cubic spline basis (truncated-power form) incl. intercept.

    For knots k_1 < ... < k_q the basis is {1, x, d_1-d_{q-1}, ...,
    d_{q-2}-d_{q-1}} with d_j(x) = [(x-k_j)_+^3 - (x-k_q)_+^3]/(k_q-k_j),
    which is linear beyond the boundary knots.
    """
    q = len(knots)
    cols = [np.ones_like(x), x]

    def d(j):
        num = np.clip(x - knots[j], 0, None) ** 3 - np.clip(x - knots[-1], 0, None) ** 3
        return num / (knots[-1] - knots[j])

    if q >= 3:
        d_last = d(q - 2)
        for j in range(q - 2):
            cols.append(d(j) - d_last)
    return np.column_stack(cols)


@dataclass(frozen=True)
class TrendFit:
    """Fitted trend m_hat(.) of log S^2 versus M."""

    kind: str                       # "constant" or "spline"
    constant_value: float
    knots: np.ndarray | None        # in scaled coordinates
    coefficients: np.ndarray | None
    df: int
    m_offset: float = 0.0
    m_scale: float = 1.0

    def evaluate(self, m) -> np.ndarray:
        """Fitted log-variance trend at m (vectorized)."""
        m = np.asarray(m, dtype=float)
        if self.kind == "constant":
            return np.full(m.shape, self.constant_value)
        t = (m - self.m_offset) / self.m_scale
        basis = _natural_basis(np.atleast_1d(t).ravel(), self.knots)
        out = basis @ self.coefficients
        return out.reshape(m.shape)

    def xi2(self, m) -> np.ndarray:
        """exp(m_hat(m)), the multiplicative variance target."""
        return np.exp(self.evaluate(m))


def constant_trend(value: float = 0.0) -> TrendFit:
    return TrendFit(kind="constant", constant_value=float(value),
                    knots=None, coefficients=None, df=1)


def fit_trend(m: np.ndarray, log_s2: np.ndarray, spline_df: int | None = None) -> TrendFit:
    """Least-squares natural-cubic-spline fit of log_s2 on m.

    When the selected degrees of freedom fall below 2, or all m coincide,
    returns the constant fit at the mean of log_s2.
    """
    m = np.asarray(m, dtype=float).ravel()
    log_s2 = np.asarray(log_s2, dtype=float).ravel()
    if m.size == 0 or m.size != log_s2.size:
        raise ValueError("need matching, non-empty m and log_s2")
    if not np.all(np.isfinite(log_s2)) or not np.all(np.isfinite(m)):
        raise ValueError("trend inputs must be finite (drop s2=0 units first)")

    distinct = np.unique(m).size
    requested = (select_spline_df(m.size, m.size) if spline_df is None
                 else spline_df)
    df = min(requested, distinct)
    if df < 2 or distinct < 2:
        if requested >= 2 and distinct < 2:
            warnings.warn("all side-information values identical; constant trend fit")
        return constant_trend(float(np.mean(log_s2)))

    lo, hi = float(np.min(m)), float(np.max(m))
    scale = hi - lo
    t = (m - lo) / scale
    # Interior knots at equally spaced quantiles, boundary knots at the range.
    n_interior = df - 1
    probs = np.linspace(0, 1, n_interior + 2)[1:-1]
    interior = np.quantile(t, probs) if n_interior > 0 else np.array([])
    knots = np.unique(np.concatenate([[0.0], interior, [1.0]]))
    basis = _natural_basis(t, knots)
    coefs, *_ = np.linalg.lstsq(basis, log_s2, rcond=None)
    return TrendFit(kind="spline", constant_value=float("nan"), knots=knots,
                    coefficients=coefs, df=df, m_offset=lo, m_scale=scale)


def eval_trend(fit: TrendFit, m) -> tuple[np.ndarray, np.ndarray]:
    """Return (m_hat, xi2_hat) at m; xi2_hat = exp(m_hat) is always positive."""
    m_hat = fit.evaluate(m)
    return m_hat, np.exp(m_hat)
