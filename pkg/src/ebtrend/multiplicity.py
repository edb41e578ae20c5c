"""Benjamini-Hochberg step-up procedure and FDR/power bookkeeping."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .priorfit import InputError


@dataclass(frozen=True)
class BhResult:
    """Outcome of the BH step-up rule at level alpha."""

    alpha: float
    j_hat: int
    threshold: float
    rejected: np.ndarray


def bh_reject(p, alpha: float) -> BhResult:
    """BH step-up: reject the j_hat smallest p-values where j_hat is the
    largest j with P_(j) <= (j/n) alpha; ties at P_(j_hat) are all rejected.
    """
    p = np.asarray(p, dtype=float)
    if np.any(np.isnan(p)):
        raise InputError("p-values contain NaN")
    if np.any((p < 0) | (p > 1)):
        raise InputError("p-values must lie in [0, 1]")
    if not 0 < alpha < 1:
        raise InputError("alpha must lie in (0, 1)")
    n = p.size
    order = np.argsort(p, kind="stable")
    sorted_p = p[order]
    bounds = alpha * np.arange(1, n + 1) / n
    hits = np.nonzero(sorted_p <= bounds)[0]
    if hits.size == 0:
        return BhResult(alpha=alpha, j_hat=0, threshold=0.0,
                        rejected=np.zeros(n, dtype=bool))
    j_hat = int(hits[-1]) + 1
    cutoff = sorted_p[j_hat - 1]
    rejected = p <= cutoff
    j_hat = int(rejected.sum())
    return BhResult(alpha=alpha, j_hat=j_hat, threshold=j_hat / n * alpha,
                    rejected=rejected)


def q_values(p) -> np.ndarray:
    """BH-adjusted p-values: q_i = min over j >= rank(i) of n P_(j) / j."""
    p = np.asarray(p, dtype=float)
    if np.any(np.isnan(p)):
        raise InputError("p-values contain NaN")
    n = p.size
    order = np.argsort(p, kind="stable")
    scaled = p[order] * n / np.arange(1, n + 1)
    q_sorted = np.minimum.accumulate(scaled[::-1])[::-1]
    q = np.empty(n)
    q[order] = np.minimum(q_sorted, 1.0)
    return q


@dataclass(frozen=True)
class ErrorMetrics:
    """False/total discovery counts against known truth."""

    v: int
    r: int
    fdp: float
    power: float


def error_metrics(result: BhResult, null_mask) -> ErrorMetrics:
    """Realized false discovery proportion and power for one replicate."""
    null_mask = np.asarray(null_mask, dtype=bool)
    if null_mask.shape != result.rejected.shape:
        raise InputError("null mask length does not match the rejection vector")
    r = int(result.rejected.sum())
    v = int((result.rejected & null_mask).sum())
    n_alt = int((~null_mask).sum())
    power = (r - v) / n_alt if n_alt > 0 else 0.0
    return ErrorMetrics(v=v, r=r, fdp=v / max(r, 1), power=power)
