"""Per-unit p-values.

All partially-Bayes p-values are posterior ratios: mixture-weighted Gaussian
tails over the mixture marginal density, evaluated in log space. The Tweedie
evaluators re-express the same quantities through marginal densities at
adjacent degrees of freedom and exist purely as numerical cross-checks.
"""

from __future__ import annotations

import enum
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import integrate
from scipy.special import gammaln, logsumexp
from scipy.stats import norm, t as t_dist

from . import trend as trend_mod
from .priorfit import (
    BinnedPriorSet,
    DiscretePrior1D,
    DiscretePrior2D,
    InvChisqPrior,
    S2_FLOOR,
    log_joint_kernel,
    log_scaled_chisq_density,
    mixture_density_1d,
    mixture_density_2d,
    trigamma_inverse,
)
from scipy.special import polygamma


class QuadratureError(RuntimeError):
    """Raised when adaptive quadrature cannot reach the requested tolerance."""


class MethodId(enum.Enum):
    """Stable identifiers for the implemented testing methods."""

    TTest = "ttest"
    UntrendedInvChisq = "untrended_invchisq"
    UntrendedNpmle = "untrended_npmle"
    RegInvChisq = "reg_invchisq"
    RegNpmle = "reg_npmle"
    JointNpmle = "joint_npmle"
    DiscreteJoint = "discrete_joint"
    Map = "map"
    Manorm2 = "manorm2"
    Oracle = "oracle"      # simulation-only: requires the data-generating truth


# ---------------------------------------------------------------------------
# Classical and parametric p-values
# ---------------------------------------------------------------------------

def p_ttest(z, s2, nu: float, df: int) -> np.ndarray:
    """Two-sided t-test p-value; s2 = 0 uses the limit convention."""
    z = np.asarray(z, dtype=float)
    s2 = np.asarray(s2, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        stat = np.abs(z) / (nu * np.sqrt(s2))
    p = 2.0 * t_dist.sf(stat, df)
    zero = s2 <= 0
    if np.any(zero):
        p = np.where(zero & (z != 0), 0.0, np.where(zero, 1.0, p))
    return np.clip(p, 0.0, 1.0)


def p_limma_param(z, s2, nu: float, df: int, prior: InvChisqPrior,
                  xi2=1.0) -> np.ndarray:
    """Moderated-t p-value with the scaled inverse-chi-square prior."""
    z = np.asarray(z, dtype=float)
    s2 = np.asarray(s2, dtype=float)
    xi2 = np.asarray(xi2, dtype=float)
    if np.isinf(prior.kappa0):
        sd = np.sqrt(prior.s0_sq * xi2)
        return np.clip(2.0 * norm.sf(np.abs(z) / (nu * sd)), 0.0, 1.0)
    s2_mod = (df * s2 + prior.kappa0 * prior.s0_sq * xi2) / (df + prior.kappa0)
    stat = np.abs(z) / (nu * np.sqrt(s2_mod))
    return np.clip(2.0 * t_dist.sf(stat, df + prior.kappa0), 0.0, 1.0)


def p_map(z, nu: float, xi2) -> np.ndarray:
    """Gaussian p-value treating the trend value as the exact variance."""
    z = np.asarray(z, dtype=float)
    sd = np.sqrt(np.asarray(xi2, dtype=float))
    return np.clip(2.0 * norm.sf(np.abs(z) / (nu * sd)), 0.0, 1.0)


# ---------------------------------------------------------------------------
# Partially-Bayes mixture p-values
# ---------------------------------------------------------------------------

def _log_two_phi(stat: np.ndarray) -> np.ndarray:
    """log(2 * Phi(-stat)) for stat >= 0."""
    return np.log(2.0) + norm.logsf(stat)


def p_partially_bayes_1d(z, s2, nu: float, df: int, prior: DiscretePrior1D,
                         xi2=1.0) -> np.ndarray:
    """Posterior-integrated p-value under a discrete trend-adjusted prior.

    With xi2 = 1 this is the untrended version; otherwise the prior lives on
    the trend-adjusted scale and s2 is rescaled by xi2 before conditioning.
    """
    z = np.atleast_1d(np.asarray(z, dtype=float))
    s2 = np.atleast_1d(np.asarray(s2, dtype=float))
    xi2_arr = np.broadcast_to(np.asarray(xi2, dtype=float), s2.shape)
    v2 = s2 / xi2_arr
    v2 = np.where(v2 < S2_FLOOR, prior.support[0], v2)

    with np.errstate(divide="ignore"):
        logw = np.log(prior.weights)
    log_dens = log_scaled_chisq_density(v2[:, None], df, prior.support[None, :])
    sd = np.sqrt(xi2_arr[:, None] * prior.support[None, :])
    log_tail = _log_two_phi(np.abs(z)[:, None] / (nu * sd))
    log_den = logsumexp(logw + log_dens, axis=1)
    log_num = logsumexp(logw + log_dens + log_tail, axis=1)
    p = np.exp(log_num - log_den)

    bad = ~np.isfinite(log_den)
    if np.any(bad):
        warnings.warn(f"{bad.sum()} unit(s) with underflowing mixture density; "
                      "using the dominant support point")
        k_best = np.argmax(log_dens[bad], axis=1)
        p[bad] = np.exp(log_tail[bad, k_best])
    return np.clip(p, 0.0, 1.0)


def p_joint(z, s2, a, nu: float, k_samples: int, df: int,
            prior: DiscretePrior2D) -> np.ndarray:
    """Posterior-integrated p-value under a discrete bivariate prior."""
    z = np.atleast_1d(np.asarray(z, dtype=float))
    s2 = np.atleast_1d(np.asarray(s2, dtype=float))
    a = np.atleast_1d(np.asarray(a, dtype=float))
    s2 = np.where(s2 < S2_FLOOR, prior.sigma2.min(), s2)

    with np.errstate(divide="ignore"):
        logw = np.log(prior.weights)
    log_kern = log_joint_kernel(s2[:, None], a[:, None], prior.mu[None, :],
                                prior.sigma2[None, :], df, k_samples)
    log_tail = _log_two_phi(np.abs(z)[:, None] / (nu * np.sqrt(prior.sigma2)[None, :]))
    log_den = logsumexp(logw + log_kern, axis=1)
    log_num = logsumexp(logw + log_kern + log_tail, axis=1)
    p = np.exp(log_num - log_den)

    bad = ~np.isfinite(log_den)
    if np.any(bad):
        warnings.warn(f"{bad.sum()} unit(s) with underflowing joint density; "
                      "using the dominant atom")
        k_best = np.argmax(log_kern[bad], axis=1)
        p[bad] = np.exp(log_tail[bad, k_best])
    return np.clip(p, 0.0, 1.0)


def p_joint_binned(z, s2, a, nu: float, log_likelihood: np.ndarray,
                   column_sigma2: np.ndarray, column_weights: np.ndarray,
                   block: int = 512) -> np.ndarray:
    """Joint p-values from a precomputed bin-level likelihood matrix.

    Equivalent to :func:`p_joint` on the expanded atom prior, but reuses the
    (n x columns) likelihood matrix from the NPMLE fit: the Gaussian tail
    factor depends only on each column's sigma2.
    """
    z = np.asarray(z, dtype=float)
    n = log_likelihood.shape[0]
    row_max = np.max(log_likelihood, axis=1)
    lik = np.exp(log_likelihood - row_max[:, None])
    den = lik @ column_weights
    num = np.empty(n)
    tail_stat = np.abs(z)[:, None] / (nu * np.sqrt(column_sigma2)[None, :])
    # blockwise to avoid materializing a second n x columns array
    for start in range(0, n, block):
        sl = slice(start, min(start + block, n))
        tails = np.exp(_log_two_phi(tail_stat[sl]))
        num[sl] = (lik[sl] * tails) @ column_weights
    with np.errstate(divide="ignore", invalid="ignore"):
        p = num / den
    bad = ~np.isfinite(p)
    if np.any(bad):
        p[bad] = 1.0
    return np.clip(p, 0.0, 1.0)


def p_discrete_joint(z, s2, m, nu: float, df: int,
                     priors: BinnedPriorSet) -> np.ndarray:
    """Bin-wise partially-Bayes p-values for discrete side information."""
    z = np.atleast_1d(np.asarray(z, dtype=float))
    s2 = np.atleast_1d(np.asarray(s2, dtype=float))
    m = np.atleast_1d(np.asarray(m, dtype=float))
    p = np.empty(z.shape)
    for i in range(z.size):
        b = priors.bin_index(float(m[i]))
        p[i] = p_partially_bayes_1d(z[i:i + 1], s2[i:i + 1], nu, df,
                                    priors.priors[b], xi2=1.0)[0]
    return p


# ---------------------------------------------------------------------------
# MAnorm2 baseline
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Manorm2Fit:
    trend: trend_mod.TrendFit
    d0: float
    p: np.ndarray


def p_manorm2(ybar_a, s2_a, ybar_b, s2_b, k_a: int, k_b: int,
              occupancy=None) -> Manorm2Fit:
    """MAnorm2-style moderated two-group test.

    The mean-variance curve is fitted on the pooled per-group means and log
    variances with the same spline machinery used elsewhere; the prior
    degrees of freedom come from trigamma matching in each group, averaged.
    ``occupancy`` optionally restricts the matching to high-signal units
    (the reference implementation estimates the prior degrees of freedom on
    occupied intervals only); callers with the raw matrix pass the mask of
    units whose every sample exceeds that sample's median signal.
    """
    if k_a < 2 or k_b < 2:
        from .linmodel import DesignError
        raise DesignError("both groups need at least two samples")
    ybar_a = np.asarray(ybar_a, dtype=float)
    ybar_b = np.asarray(ybar_b, dtype=float)
    s2_a = np.asarray(s2_a, dtype=float)
    s2_b = np.asarray(s2_b, dtype=float)

    pooled_y = np.concatenate([ybar_a, ybar_b])
    pooled_s2 = np.concatenate([s2_a, s2_b])
    keep = pooled_s2 > 0
    curve = trend_mod.fit_trend(pooled_y[keep], np.log(pooled_s2[keep]))

    if occupancy is None:
        occupancy = np.ones(ybar_a.shape, dtype=bool)
    else:
        occupancy = np.asarray(occupancy, dtype=bool)
    d0_halves = []
    for ybar, s2, kg in ((ybar_a, s2_a, k_a), (ybar_b, s2_b, k_b)):
        pos = occupancy & (s2 > 0)
        if pos.sum() < 2:
            pos = s2 > 0
        zg = np.log(s2[pos]) - curve.evaluate(ybar[pos])
        target = float(np.var(zg, ddof=1)) - float(polygamma(1, (kg - 1) / 2.0))
        d0_halves.append(trigamma_inverse(target) if target > 0 else np.inf)
    d0 = float(2.0 * np.mean(d0_halves)) if np.all(np.isfinite(d0_halves)) else np.inf

    y_avg = 0.5 * (ybar_a + ybar_b)
    df_pool = k_a + k_b - 2
    s2_pool = ((k_a - 1) * s2_a + (k_b - 1) * s2_b) / df_pool
    xi_ma = curve.xi2(y_avg)
    diff = ybar_b - ybar_a
    se_factor = 1.0 / k_a + 1.0 / k_b
    if np.isinf(d0):
        stat = np.abs(diff) / np.sqrt(se_factor * xi_ma)
        p = 2.0 * norm.sf(stat)
    else:
        s2_mod = (d0 * xi_ma + df_pool * s2_pool) / (d0 + df_pool)
        stat = np.abs(diff) / np.sqrt(se_factor * s2_mod)
        p = 2.0 * t_dist.sf(stat, d0 + df_pool)
    return Manorm2Fit(trend=curve, d0=d0, p=np.clip(p, 0.0, 1.0))


# ---------------------------------------------------------------------------
# Tweedie-representation cross-checks
# ---------------------------------------------------------------------------

def _tweedie_norm_const(df: int) -> float:
    """Normalizing constant of the marginal-density p-value representation."""
    d = df
    log_c = (0.5 * np.log(2.0 / np.pi)
             + (d / 2.0) * np.log(d / 2.0)
             + ((1.0 - d) / 2.0) * np.log((d + 1.0) / 2.0)
             + gammaln((d + 1.0) / 2.0) - gammaln(d / 2.0))
    return float(np.exp(log_c))


def _tweedie_integral(density_dplus1, v2: float, z_over_xi_sq: float, nu: float,
                      df: int, quad_tol: float) -> float:
    """Integrate the shared Tweedie kernel with the edge substitution t2 = L + w^2."""
    d = df
    lower = (d * v2 + z_over_xi_sq / nu ** 2) / (d + 1.0)

    def integrand(w):
        t2 = lower + w * w
        root = np.sqrt((d + 1.0) * w * w + z_over_xi_sq / nu ** 2)
        if root == 0.0:
            return 0.0
        return (density_dplus1(t2) * t2 ** (-(d - 1.0) / 2.0) * 2.0 * w / root)

    value, err = integrate.quad(integrand, 0.0, np.inf,
                                epsabs=quad_tol * 1e-2, epsrel=quad_tol * 1e-2,
                                limit=400)
    if err > max(quad_tol, quad_tol * abs(value)) * 10:
        raise QuadratureError(f"quadrature error estimate {err} exceeds tolerance")
    return value


def tweedie_reg(z: float, s2: float, nu: float, df: int, prior: DiscretePrior1D,
                xi2: float = 1.0, quad_tol: float = 1e-8) -> float:
    """Marginal-density representation of the 1-D partially-Bayes p-value."""
    v2 = max(s2 / xi2, S2_FLOOR)
    f_d = float(mixture_density_1d(prior, df, np.array([v2]))[0])

    def f_d1(t2):
        return float(mixture_density_1d(prior, df + 1, np.array([t2]))[0])

    integral = _tweedie_integral(f_d1, v2, z * z / xi2, nu, df, quad_tol)
    p = _tweedie_norm_const(df) * v2 ** (df / 2.0 - 1.0) * integral / f_d
    return float(min(max(p, 0.0), 1.0))


def tweedie_joint(z: float, s2: float, a: float, nu: float, k_samples: int,
                  df: int, prior: DiscretePrior2D, quad_tol: float = 1e-8) -> float:
    """Marginal-density representation of the bivariate partially-Bayes p-value."""
    s2 = max(s2, S2_FLOOR)
    f_d = float(mixture_density_2d(prior, df, k_samples,
                                   np.array([s2]), np.array([a]))[0])

    def f_d1(t2):
        return float(mixture_density_2d(prior, df + 1, k_samples,
                                        np.array([t2]), np.array([a]))[0])

    integral = _tweedie_integral(f_d1, s2, z * z, nu, df, quad_tol)
    p = _tweedie_norm_const(df) * s2 ** (df / 2.0 - 1.0) * integral / f_d
    return float(min(max(p, 0.0), 1.0))
