"""Per-unit linear-model summaries and design/contrast checks.

Each unit (gene, protein, genomic interval, ...) is a small OLS fit of K
responses on a shared K x p design. Downstream shrinkage methods consume
only the per-unit summaries: the contrast estimate ``z``, the residual
variance ``s2``, the average intensity ``a`` and the side-information ``m``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class DesignError(ValueError):
    """Raised for rank-deficient or otherwise unusable designs/contrasts."""


@dataclass(frozen=True)
class Design:
    """Shared design matrix with cached Gram inverse.

    ``x`` has K sample rows and p covariate columns and must have full
    column rank with p < K.
    """

    x: np.ndarray
    gram_inverse: np.ndarray = field(init=False, repr=False)
    _q: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float)
        if x.ndim != 2:
            raise DesignError("design matrix must be two-dimensional")
        k, p = x.shape
        if k <= p:
            raise DesignError(f"need more samples than covariates (K={k}, p={p})")
        q, r = np.linalg.qr(x)
        if np.min(np.abs(np.diag(r))) <= 1e-10 * max(1.0, np.max(np.abs(r))):
            raise DesignError("design matrix is rank deficient")
        rinv = np.linalg.solve(r, np.eye(p))
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "gram_inverse", rinv @ rinv.T)
        object.__setattr__(self, "_q", q)

    @property
    def n_samples(self) -> int:
        return self.x.shape[0]

    @property
    def n_covariates(self) -> int:
        return self.x.shape[1]

    @property
    def df_residual(self) -> int:
        return self.x.shape[0] - self.x.shape[1]

    def is_two_group(self) -> bool:
        """True for the indicator encoding of a two-sample comparison."""
        x = self.x
        if x.shape[1] != 2:
            return False
        e1 = np.array([1.0, 0.0])
        e2 = np.array([0.0, 1.0])
        rows_ok = np.all(np.all(x == e1, axis=1) | np.all(x == e2, axis=1))
        return bool(rows_ok) and bool(np.any(x[:, 0] == 1)) and bool(np.any(x[:, 1] == 1))

    def group_masks(self) -> tuple[np.ndarray, np.ndarray]:
        if not self.is_two_group():
            raise DesignError("design is not a two-group indicator encoding")
        return self.x[:, 0] == 1, self.x[:, 1] == 1


@dataclass(frozen=True)
class Contrast:
    """Contrast vector c with its standard-error factor nu = sqrt(c' (X'X)^-1 c)."""

    c: np.ndarray
    nu: float

    @classmethod
    def from_design(cls, c, design: Design) -> "Contrast":
        c = np.asarray(c, dtype=float)
        if c.shape != (design.n_covariates,):
            raise DesignError(
                f"contrast length {c.shape} does not match p={design.n_covariates}"
            )
        nu2 = float(c @ design.gram_inverse @ c)
        if nu2 <= 0:
            raise DesignError("contrast has non-positive variance factor")
        return cls(c=c, nu=float(np.sqrt(nu2)))


@dataclass(frozen=True)
class UnitSummary:
    """OLS summary for a single unit."""

    z: float
    s2: float
    a: float
    m: float
    df: int


@dataclass(frozen=True)
class UnitSummaries:
    """Vectorized per-unit summaries over n units sharing one design."""

    z: np.ndarray
    s2: np.ndarray
    a: np.ndarray
    m: np.ndarray
    df: int
    nu: float
    n_samples: int

    def __len__(self) -> int:
        return self.z.shape[0]

    def unit(self, i: int) -> UnitSummary:
        return UnitSummary(
            z=float(self.z[i]), s2=float(self.s2[i]), a=float(self.a[i]),
            m=float(self.m[i]), df=self.df,
        )


def intensity_contrast(design: Design) -> Contrast:
    """Contrast whose estimate is the average intensity: c_A = mean of the rows."""
    c_a = design.x.mean(axis=0)
    return Contrast.from_design(c_a, design)


def _manorm_tilde(y: np.ndarray, design: Design) -> np.ndarray:
    """Unweighted midpoint of the two group means (MAnorm2's curve argument)."""
    mask1, mask2 = design.group_masks()
    return 0.5 * (y[..., mask1].mean(axis=-1) + y[..., mask2].mean(axis=-1))


def fit_units(
    y: np.ndarray,
    design: Design,
    theta_contrast: Contrast,
    side_mode: str = "average_intensity",
    side_values: np.ndarray | None = None,
) -> UnitSummaries:
    """Fit every unit by OLS and collect summary statistics.

    ``y`` is n x K (or length K for a single unit). ``side_mode`` selects the
    side-information column: "average_intensity", "external" (values passed in
    ``side_values``) or "manorm_tilde" (two-group designs only).
    """
    y = np.atleast_2d(np.asarray(y, dtype=float))
    if y.shape[1] != design.n_samples:
        raise DesignError(
            f"response has {y.shape[1]} samples, design has {design.n_samples}"
        )
    if not np.all(np.isfinite(y)):
        raise DesignError("responses must be finite")

    q = design._q
    # Fitted values via the orthonormal column basis; stable for any
    # conditioning the rank check lets through.
    coefs_q = y @ q                      # n x p
    resid = y - coefs_q @ q.T
    df = design.df_residual
    ss_res = np.einsum("ij,ij->i", resid, resid)
    # Saturated fits must give s2 = 0 exactly; snap pure-roundoff residuals.
    scale = np.einsum("ij,ij->i", y, y)
    ss_res[ss_res <= (64 * np.finfo(float).eps) ** 2 * np.maximum(scale, 1.0)] = 0.0
    s2 = np.maximum(ss_res / df, 0.0)
    # z = c' (X'X)^-1 X' y, computed from the cached Gram inverse.
    w = design.x @ (design.gram_inverse @ theta_contrast.c)   # K vector
    z = y @ w
    a = y.mean(axis=1)

    if side_mode == "average_intensity":
        m = a.copy()
    elif side_mode == "external":
        if side_values is None:
            raise DesignError("side_mode='external' requires side_values")
        m = np.asarray(side_values, dtype=float)
        if m.shape != (y.shape[0],):
            raise DesignError("side_values length does not match number of units")
    elif side_mode == "manorm_tilde":
        m = _manorm_tilde(y, design)
    else:
        raise DesignError(f"unknown side_mode {side_mode!r}")

    return UnitSummaries(
        z=z, s2=s2, a=a, m=m, df=df, nu=theta_contrast.nu, n_samples=design.n_samples
    )


def fit_unit(
    y: np.ndarray,
    design: Design,
    theta_contrast: Contrast,
    side_mode: str = "average_intensity",
    side_value: float | None = None,
) -> UnitSummary:
    """Single-unit convenience wrapper around :func:`fit_units`."""
    side_values = None if side_value is None else np.array([side_value])
    units = fit_units(
        np.asarray(y, dtype=float)[None, :], design, theta_contrast,
        side_mode=side_mode, side_values=side_values,
    )
    return units.unit(0)


@dataclass(frozen=True)
class OrthogonalityReport:
    """Result of checking the contrast-orthogonality design condition."""

    value: float
    ok: bool
    ones_in_colspace: bool


def check_orthogonality(
    design: Design,
    theta_contrast: Contrast,
    side_contrast: Contrast,
    tol: float = 1e-10,
) -> OrthogonalityReport:
    """Check c_theta' (X'X)^-1 c_side = 0 and that 1 lies in the column space.

    Both conditions together license conditioning the analysis on the
    side-information summary.
    """
    c_t, c_s = theta_contrast.c, side_contrast.c
    if c_t.shape != (design.n_covariates,) or c_s.shape != (design.n_covariates,):
        raise DesignError("contrast dimensions do not match the design")
    value = float(c_t @ design.gram_inverse @ c_s)
    scale = max(1.0, float(np.linalg.norm(c_t) * np.linalg.norm(c_s)))
    ok_orth = abs(value) <= tol * scale

    ones = np.ones(design.n_samples)
    proj = design._q @ (design._q.T @ ones)
    ones_in = bool(np.linalg.norm(ones - proj) <= tol * np.sqrt(design.n_samples))
    return OrthogonalityReport(value=value, ok=ok_orth and ones_in,
                               ones_in_colspace=ones_in)


def two_group_design(k1: int, k2: int) -> Design:
    """Indicator-coded two-sample design with k1 treated and k2 control samples."""
    if k1 < 1 or k2 < 1:
        raise DesignError("both groups need at least one sample")
    x = np.zeros((k1 + k2, 2))
    x[:k1, 0] = 1.0
    x[k1:, 1] = 1.0
    return Design(x)
