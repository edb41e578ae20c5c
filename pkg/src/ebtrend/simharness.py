"""Seeded simulation harness.

Generates two-group datasets under the four benchmark settings (plus any
custom configuration), runs the full per-method pipelines, and aggregates
FDR/power over Monte-Carlo replicates. All randomness flows through a
counter-based generator keyed by (seed, replicate), so results are
deterministic and independent of thread count.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import digamma as sp_digamma
from scipy.stats import chi2

from . import priorfit, pvalues, trend as trend_mod
from .linmodel import Contrast, Design, fit_units, two_group_design
from .multiplicity import ErrorMetrics, bh_reject, error_metrics
from .pvalues import MethodId


@dataclass(frozen=True)
class SimConfig:
    """Parameters of one simulation scenario.

    ``prior_g`` is ("dirac", v), ("two_point", v1, v2, w) or
    ("scaled_invchisq", df, scale); ``trend_m`` is ("constant", c) or
    ("logistic", amplitude, center, width, offset) meaning
    m(mu) = amplitude / (1 + exp(-(mu - center)/width)) + offset.
    """

    n: int
    n0: int
    k_a: int
    k_b: int
    prior_g: tuple
    trend_m: tuple
    mu_mean: float
    mu_sd: float
    theta_scale: float = 16.0
    side_mode: str = "average_intensity"     # or "external_mu"
    alpha: float = 0.05
    reps: int = 20
    seed: int = 0
    # solver controls (defaults trade accuracy for desk-scale runtime)
    em_tol: float = 1e-8
    em_max_iter_1d: int = 3000
    em_max_iter_2d: int = 600

    def __post_init__(self):
        if not (0 <= self.n0 <= self.n):
            raise ValueError("need 0 <= n0 <= n")
        if self.k_a < 1 or self.k_b < 1 or self.k_a + self.k_b <= 2:
            raise ValueError("need k_a, k_b >= 1 with k_a + k_b > 2")
        if self.side_mode not in ("average_intensity", "external_mu"):
            raise ValueError(f"unknown side_mode {self.side_mode!r}")


PRESETS = ("setting1", "setting2", "setting3", "setting4")


def preset(name: str, n: int = 10_000, reps: int = 20, seed: int = 0,
           alpha: float = 0.05) -> SimConfig:
    """Named benchmark configurations (settings 1-4)."""
    common = dict(n=n, n0=int(round(0.9 * n)), alpha=alpha, reps=reps, seed=seed)
    steep = ("logistic", -6.0, 20.0, 0.15, 0.0)
    if name == "setting1":
        return SimConfig(k_a=3, k_b=3, prior_g=("two_point", 1.0, 10.0, 0.5),
                         trend_m=("constant", 0.0),
                         mu_mean=20.0, mu_sd=math.sqrt(3.0), **common)
    if name == "setting2":
        return SimConfig(k_a=3, k_b=3, prior_g=("two_point", 1.0, 10.0, 0.5),
                         trend_m=("logistic", -4.0, 16.0, 4.0, 12.0),
                         mu_mean=20.0, mu_sd=math.sqrt(3.0), **common)
    if name == "setting3":
        return SimConfig(k_a=2, k_b=10, prior_g=("scaled_invchisq", 10, 1.0),
                         trend_m=steep, mu_mean=20.0, mu_sd=math.sqrt(0.2),
                         **common)
    if name == "setting4":
        return SimConfig(k_a=3, k_b=5, prior_g=("dirac", 1.0), trend_m=steep,
                         mu_mean=20.0, mu_sd=math.sqrt(0.2),
                         side_mode="external_mu", **common)
    raise ValueError(f"unknown preset {name!r}")


def trend_value(trend_m: tuple, mu) -> np.ndarray:
    """Evaluate the true trend m(mu)."""
    mu = np.asarray(mu, dtype=float)
    if trend_m[0] == "constant":
        return np.full(mu.shape, float(trend_m[1]))
    if trend_m[0] == "logistic":
        _, amplitude, center, width, offset = trend_m
        return amplitude / (1.0 + np.exp(-(mu - center) / width)) + offset
    raise ValueError(f"unknown trend spec {trend_m[0]!r}")


def _draw_tau2(rng: np.random.Generator, prior_g: tuple, size: int) -> np.ndarray:
    kind = prior_g[0]
    if kind == "dirac":
        return np.full(size, float(prior_g[1]))
    if kind == "two_point":
        _, v1, v2, w = prior_g
        pick = rng.random(size) < w
        return np.where(pick, float(v1), float(v2))
    if kind == "scaled_invchisq":
        _, df, scale = prior_g
        return df * scale / rng.chisquare(df, size=size)
    raise ValueError(f"unknown prior spec {kind!r}")


@dataclass(frozen=True)
class SimDataset:
    """One simulated replicate plus the generating truth."""

    y: np.ndarray
    theta: np.ndarray
    mu: np.ndarray
    sigma2: np.ndarray
    tau2: np.ndarray
    is_null: np.ndarray
    cfg: SimConfig


def _rep_rng(seed: int, rep: int) -> np.random.Generator:
    return np.random.Generator(
        np.random.Philox(np.random.SeedSequence(entropy=seed, spawn_key=(rep,)))
    )


def gen_setting(cfg: SimConfig, rep: int = 0) -> SimDataset:
    """Generate one replicate; deterministic given (cfg.seed, rep)."""
    rng = _rep_rng(cfg.seed, rep)
    n, k = cfg.n, cfg.k_a + cfg.k_b
    mu = cfg.mu_mean + cfg.mu_sd * rng.standard_normal(n)
    tau2 = _draw_tau2(rng, cfg.prior_g, n)
    sigma2 = np.exp(trend_value(cfg.trend_m, mu)) * tau2
    theta = np.zeros(n)
    n_alt = n - cfg.n0
    if n_alt > 0:
        theta[cfg.n0:] = rng.standard_normal(n_alt) * np.sqrt(
            cfg.theta_scale * sigma2[cfg.n0:])
    # Group means mu +- theta * K_other/K keep each unit's grand mean at mu.
    mean_a = mu + theta * cfg.k_b / k
    mean_b = mu - theta * cfg.k_a / k
    means = np.empty((n, k))
    means[:, : cfg.k_a] = mean_a[:, None]
    means[:, cfg.k_a:] = mean_b[:, None]
    y = means + np.sqrt(sigma2)[:, None] * rng.standard_normal((n, k))
    return SimDataset(y=y, theta=theta, mu=mu, sigma2=sigma2, tau2=tau2,
                      is_null=theta == 0.0, cfg=cfg)


# ---------------------------------------------------------------------------
# Oracle priors (simulation truth, discretized)
# ---------------------------------------------------------------------------

def _tau2_atoms(prior_g: tuple, n_tau: int = 64):
    kind = prior_g[0]
    if kind == "dirac":
        return np.array([float(prior_g[1])]), np.array([1.0])
    if kind == "two_point":
        _, v1, v2, w = prior_g
        return np.array([float(v1), float(v2)]), np.array([w, 1.0 - w])
    if kind == "scaled_invchisq":
        _, df, scale = prior_g
        u = (np.arange(n_tau) + 0.5) / n_tau
        atoms = df * scale / chi2.ppf(1.0 - u, df)
        return atoms, np.full(n_tau, 1.0 / n_tau)
    raise ValueError(f"unknown prior spec {kind!r}")


def true_prior_1d(cfg: SimConfig, n_tau: int = 64) -> priorfit.DiscretePrior1D:
    """True residual prior G discretized for the 1-D oracle."""
    atoms, weights = _tau2_atoms(cfg.prior_g, n_tau)
    order = np.argsort(atoms)
    return priorfit.DiscretePrior1D(atoms[order], weights[order])


def true_prior_2d(cfg: SimConfig, n_mu: int = 81,
                  n_tau: int = 64) -> priorfit.DiscretePrior2D:
    """True bivariate prior H on (mu, sigma2), discretized.

    Gauss-Hermite nodes cover the Gaussian law of mu; the residual prior is
    discretized on quantile atoms (exact for discrete G).
    """
    x, wx = np.polynomial.hermite_e.hermegauss(n_mu)
    mu_nodes = cfg.mu_mean + cfg.mu_sd * x
    mu_w = wx / wx.sum()
    tau_nodes, tau_w = _tau2_atoms(cfg.prior_g, n_tau)
    sigma2 = np.exp(trend_value(cfg.trend_m, mu_nodes))[:, None] * tau_nodes[None, :]
    mu_atoms = np.repeat(mu_nodes, tau_nodes.size)
    weights = (mu_w[:, None] * tau_w[None, :]).ravel()
    return priorfit.DiscretePrior2D(mu_atoms, sigma2.ravel(), weights)


def _p_joint_blockwise(z, s2, a, nu, k_samples, df,
                       prior: priorfit.DiscretePrior2D,
                       block: int = 1024) -> np.ndarray:
    out = np.empty(z.shape[0])
    for start in range(0, z.shape[0], block):
        sl = slice(start, start + block)
        out[sl] = pvalues.p_joint(z[sl], s2[sl], a[sl], nu, k_samples, df, prior)
    return out


def oracle_pvalues(ds: SimDataset, units) -> np.ndarray:
    """Oracle p-values computed with the (discretized) generating truth.

    With average-intensity side information the exactly-calibrated oracle is
    the joint p-value under the true bivariate prior; with external M = mu
    it is the 1-D p-value with the true residual prior and true trend.
    """
    cfg = ds.cfg
    if cfg.side_mode == "external_mu":
        prior = true_prior_1d(cfg)
        xi2 = np.exp(trend_value(cfg.trend_m, ds.mu))
        return pvalues.p_partially_bayes_1d(units.z, units.s2, units.nu,
                                            units.df, prior, xi2=xi2)
    prior = true_prior_2d(cfg)
    return _p_joint_blockwise(units.z, units.s2, units.a, units.nu,
                              units.n_samples, units.df, prior)


# ---------------------------------------------------------------------------
# Method pipelines
# ---------------------------------------------------------------------------

@dataclass
class PipelineResult:
    pvalues: dict
    skipped: dict
    failures: dict
    extras: dict = field(default_factory=dict)


def method_pvalues(y: np.ndarray, design: Design, theta_contrast: Contrast,
                   methods, side_mode: str = "average_intensity",
                   side_values: np.ndarray | None = None, *,
                   em_tol: float = priorfit.EM_TOL,
                   em_max_iter_1d: int = priorfit.EM_MAX_ITER,
                   em_max_iter_2d: int = priorfit.EM_MAX_ITER,
                   grid_size: int = 300, n_bins: int = 50, n_resid: int = 50,
                   discrete_bin_rule=None) -> PipelineResult:
    """Run the per-method pipelines on one dataset and collect p-values.

    Inapplicable methods get a skip reason; per-method errors are isolated
    in ``failures`` rather than aborting the batch.
    """
    methods = list(methods)
    fit_side = "external" if side_mode in ("external", "external_mu") else side_mode
    units = fit_units(y, design, theta_contrast, side_mode=fit_side,
                      side_values=side_values)
    out = PipelineResult(pvalues={}, skipped={}, failures={},
                         extras={"units": units})

    trended = {MethodId.RegInvChisq, MethodId.RegNpmle, MethodId.JointNpmle,
               MethodId.Map}
    need_trend = bool(trended & set(methods))
    curve = None
    if need_trend:
        pos = units.s2 > 0
        try:
            curve = trend_mod.fit_trend(units.m[pos], np.log(units.s2[pos]))
            out.extras["trend"] = curve
        except Exception as exc:                     # pragma: no cover - defensive
            for mid in trended & set(methods):
                out.failures[mid] = f"trend fit failed: {exc!r}"
            methods = [mid for mid in methods if mid not in trended]

    def run(mid, fn):
        try:
            p = np.asarray(fn(), dtype=float)
            if np.any(np.isnan(p)):
                raise priorfit.InputError("NaN p-values produced")
            out.pvalues[mid] = p
        except Exception as exc:
            out.failures[mid] = repr(exc)

    for mid in methods:
        if mid == MethodId.Oracle:
            out.skipped[mid] = "oracle requires simulation truth"
        elif mid == MethodId.TTest:
            run(mid, lambda: pvalues.p_ttest(units.z, units.s2, units.nu, units.df))
        elif mid == MethodId.UntrendedInvChisq:
            def _f():
                prior = priorfit.fit_invchisq_untrended(units.s2, units.df)
                out.extras["invchisq_untrended"] = prior
                return pvalues.p_limma_param(units.z, units.s2, units.nu,
                                             units.df, prior)
            run(mid, _f)
        elif mid == MethodId.UntrendedNpmle:
            def _f():
                prior = priorfit.fit_untrended_npmle(
                    units.s2, units.df, grid_size=grid_size, tol=em_tol,
                    max_iter=em_max_iter_1d)
                out.extras["prior_untrended"] = prior
                return pvalues.p_partially_bayes_1d(units.z, units.s2, units.nu,
                                                    units.df, prior)
            run(mid, _f)
        elif mid == MethodId.RegInvChisq:
            def _f():
                prior = priorfit.fit_invchisq_trended(units.s2, units.m,
                                                      units.df, curve)
                out.extras["invchisq_trended"] = prior
                return pvalues.p_limma_param(units.z, units.s2, units.nu,
                                             units.df, prior,
                                             xi2=curve.xi2(units.m))
            run(mid, _f)
        elif mid == MethodId.RegNpmle:
            def _f():
                prior = priorfit.fit_reg_npmle(
                    units.s2, units.m, units.df, curve, grid_size=grid_size,
                    tol=em_tol, max_iter=em_max_iter_1d)
                out.extras["prior_reg"] = prior
                return pvalues.p_partially_bayes_1d(units.z, units.s2, units.nu,
                                                    units.df, prior,
                                                    xi2=curve.xi2(units.m))
            run(mid, _f)
        elif mid == MethodId.JointNpmle:
            if side_mode != "average_intensity":
                out.skipped[mid] = "method requires average intensity"
                continue

            def _f():
                sieve = priorfit.grid_2d(units.a, units.s2, curve,
                                         n_bins=n_bins, n_resid=n_resid)
                logl, col_bin, col_sig2 = priorfit.joint_likelihood_matrix(
                    units.s2, units.a, units.df, units.n_samples, sieve)
                fit = priorfit.fit_joint_npmle(
                    units.s2, units.a, units.df, units.n_samples, curve,
                    tol=em_tol, max_iter=em_max_iter_2d,
                    precomputed=(sieve, logl, col_bin, col_sig2))
                out.extras["prior_joint"] = fit.prior
                return pvalues.p_joint_binned(units.z, units.s2, units.a,
                                              units.nu, logl, col_sig2,
                                              fit.column_weights)
            run(mid, _f)
        elif mid == MethodId.DiscreteJoint:
            if discrete_bin_rule is None:
                out.skipped[mid] = "side information is not discrete"
                continue

            def _f():
                priors = priorfit.fit_discrete_priors(
                    units.s2, units.m, units.df, bin_rule=discrete_bin_rule,
                    grid_size=grid_size, tol=em_tol, max_iter=em_max_iter_1d)
                out.extras["binned_priors"] = priors
                return pvalues.p_discrete_joint(units.z, units.s2, units.m,
                                                units.nu, units.df, priors)
            run(mid, _f)
        elif mid == MethodId.Map:
            # The trend is fitted on log S^2, which underestimates log sigma^2
            # by psi(d/2) - log(d/2); MAP treats the trend value as the exact
            # variance, so remove the bias before plugging it in.
            debias = float(np.exp(np.log(units.df / 2.0)
                                  - sp_digamma(units.df / 2.0)))
            run(mid, lambda: pvalues.p_map(units.z, units.nu,
                                           curve.xi2(units.m) * debias))
        elif mid == MethodId.Manorm2:
            if side_mode in ("external", "external_mu"):
                out.skipped[mid] = "method not applicable with external side information"
                continue
            if not design.is_two_group():
                out.skipped[mid] = "method requires a two-group design"
                continue
            mask_a, mask_b = design.group_masks()
            if mask_a.sum() < 2 or mask_b.sum() < 2:
                out.skipped[mid] = "both groups need at least two samples"
                continue

            def _f():
                ya, yb = y[:, mask_a], y[:, mask_b]
                # occupancy proxy: every sample above its median signal
                occ = (y >= np.median(y, axis=0)).all(axis=1)
                fit = pvalues.p_manorm2(
                    ya.mean(axis=1), ya.var(axis=1, ddof=1),
                    yb.mean(axis=1), yb.var(axis=1, ddof=1),
                    int(mask_a.sum()), int(mask_b.sum()), occupancy=occ)
                out.extras["manorm2"] = fit
                return fit.p
            run(mid, _f)
        else:                                        # pragma: no cover
            out.failures[mid] = f"unknown method {mid!r}"
    return out


DEFAULT_SIM_METHODS = (
    MethodId.Oracle, MethodId.TTest, MethodId.UntrendedInvChisq,
    MethodId.UntrendedNpmle, MethodId.RegInvChisq, MethodId.RegNpmle,
    MethodId.JointNpmle, MethodId.Map, MethodId.Manorm2,
)


@dataclass
class RunOutcome:
    metrics: dict
    skipped: dict
    failures: dict
    pvalues: dict


def run_methods(ds: SimDataset, methods=DEFAULT_SIM_METHODS,
                alpha: float | None = None) -> RunOutcome:
    """Full pipeline for every requested method on one replicate."""
    cfg = ds.cfg
    alpha = cfg.alpha if alpha is None else alpha
    methods = list(methods)
    side_values = ds.mu if cfg.side_mode == "external_mu" else None
    design = two_group_design(cfg.k_a, cfg.k_b)
    contrast = Contrast.from_design(np.array([1.0, -1.0]), design)
    res = method_pvalues(
        ds.y, design, contrast, [m for m in methods if m != MethodId.Oracle],
        side_mode=cfg.side_mode, side_values=side_values,
        em_tol=cfg.em_tol, em_max_iter_1d=cfg.em_max_iter_1d,
        em_max_iter_2d=cfg.em_max_iter_2d)
    if MethodId.Oracle in methods:
        try:
            res.pvalues[MethodId.Oracle] = oracle_pvalues(ds, res.extras["units"])
        except Exception as exc:
            res.failures[MethodId.Oracle] = repr(exc)

    metrics = {}
    for mid in methods:
        if mid in res.pvalues:
            metrics[mid] = error_metrics(bh_reject(res.pvalues[mid], alpha),
                                         ds.is_null)
    return RunOutcome(metrics=metrics, skipped=res.skipped,
                      failures=res.failures, pvalues=res.pvalues)


@dataclass(frozen=True)
class MethodSummary:
    fdr: float
    fdr_se: float
    power: float
    power_se: float
    reps: int


@dataclass(frozen=True)
class MonteCarloResult:
    summary: dict                 # MethodId -> MethodSummary
    skipped: dict                 # MethodId -> reason
    failures: dict                # (rep, MethodId) -> message
    per_rep: dict                 # MethodId -> list[ErrorMetrics]


def monte_carlo(cfg: SimConfig, methods=DEFAULT_SIM_METHODS) -> MonteCarloResult:
    """Aggregate FDR/power over cfg.reps replicates (fixed-order reduction)."""
    if cfg.reps < 1:
        raise ValueError("need at least one replicate")
    methods = list(methods)
    per_rep = {mid: [] for mid in methods}
    skipped, failures = {}, {}
    for rep in range(cfg.reps):
        ds = gen_setting(cfg, rep)
        outcome = run_methods(ds, methods)
        skipped.update(outcome.skipped)
        for mid, msg in outcome.failures.items():
            failures[(rep, mid)] = msg
        for mid, met in outcome.metrics.items():
            per_rep[mid].append(met)

    summary = {}
    for mid in methods:
        mets = per_rep[mid]
        if not mets:
            continue
        fdp = np.array([m.fdp for m in mets])
        power = np.array([m.power for m in mets])
        r = len(mets)
        se = lambda v: float(np.std(v, ddof=1) / np.sqrt(r)) if r > 1 else 0.0
        summary[mid] = MethodSummary(fdr=float(fdp.mean()), fdr_se=se(fdp),
                                     power=float(power.mean()), power_se=se(power),
                                     reps=r)
    return MonteCarloResult(summary=summary, skipped=skipped, failures=failures,
                            per_rep=per_rep)
