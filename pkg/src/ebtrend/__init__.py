"""Trended empirical partially-Bayes testing for many small linear models.

Pipeline: per-unit OLS summaries (``linmodel``), mean-variance trend
(``trend``), parametric and nonparametric variance priors (``priorfit``),
partially-Bayes and baseline p-values (``pvalues``), BH multiplicity
control (``multiplicity``), plus a seeded benchmark harness (``simharness``)
and a batch CLI (``cli``).
"""

from .linmodel import (Contrast, Design, DesignError, UnitSummaries,
                       UnitSummary, check_orthogonality, fit_unit, fit_units,
                       intensity_contrast, two_group_design)
from .multiplicity import BhResult, ErrorMetrics, bh_reject, error_metrics, q_values
from .priorfit import (BinnedPriorSet, BinningError, DiscretePrior1D,
                       DiscretePrior2D, InputError, InvChisqPrior,
                       fit_discrete_priors, fit_invchisq_trended,
                       fit_invchisq_untrended, fit_joint_npmle, fit_reg_npmle,
                       fit_untrended_npmle, npmle_em, npmle_kkt_gap,
                       trigamma_inverse)
from .pvalues import (MethodId, QuadratureError, p_discrete_joint, p_joint,
                      p_limma_param, p_manorm2, p_map, p_partially_bayes_1d,
                      p_ttest, tweedie_joint, tweedie_reg)
from .simharness import (SimConfig, SimDataset, gen_setting, method_pvalues,
                         monte_carlo, preset, run_methods)
from .trend import TrendFit, eval_trend, fit_trend, select_spline_df

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
