"""Effect estimators: ICPW weighting, the unadjusted contrast, contrasts.

The ICPW estimators weight each unit by the inverse of its conditional
treatment probability given the within-cluster count,

    Yhat(a) = (1/n) sum_ij 1{A_ij = a} Y_ij / P(A_ij = a | X_i, T_i; beta_hat),

with n the retained-unit count after positivity filtering (weights do not
exist on dropped clusters).
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .cmle import CondFit, binary_unit_quantities, unit_logprobs
from .data_model import Dataset
from .errors import ConvergenceError, DataError, DomainError, EstimabilityError

PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class EffectEstimate:
    """A point estimate with optional uncertainty attachments."""

    method: str
    estimand: str
    point: float
    n_used: int
    clusters_dropped: int = 0
    se: float | None = None
    ci: tuple | None = None
    warnings: tuple = ()

    def __post_init__(self):
        if self.se is not None and self.se < 0:
            raise DataError("standard error must be nonnegative")
        if self.n_used < 0:
            raise DataError("n_used must be nonnegative")

    def with_uncertainty(self, se=None, ci=None, extra_warnings=()):
        return replace(self, se=se if se is not None else self.se,
                       ci=ci if ci is not None else self.ci,
                       warnings=self.warnings + tuple(extra_warnings))

    def to_json_dict(self) -> dict:
        return {
            "method": self.method,
            "estimand": self.estimand,
            "point": self.point,
            "se": self.se,
            "ci_low": None if self.ci is None else self.ci[0],
            "ci_high": None if self.ci is None else self.ci[1],
            "n_used": self.n_used,
            "clusters_dropped": self.clusters_dropped,
            "warnings": list(self.warnings),
        }

    def to_csv_row(self) -> list:
        d = self.to_json_dict()
        return [d["method"], d["estimand"], repr(d["point"]),
                "" if d["se"] is None else repr(d["se"]),
                "" if d["ci_low"] is None else repr(d["ci_low"]),
                "" if d["ci_high"] is None else repr(d["ci_high"]),
                str(d["n_used"]), str(d["clusters_dropped"])]


CSV_HEADER = ["method", "estimand", "point", "se", "ci_low", "ci_high",
              "n_used", "clusters_dropped"]


@dataclass(frozen=True)
class WeightTable:
    """Observed-level conditional probabilities and their inverse weights."""

    probs: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        if np.any(self.probs <= 0) or np.any(self.probs > 1):
            raise DataError("conditional probabilities must lie in (0, 1]")


def build_weight_table(data: Dataset, fit: CondFit) -> WeightTable:
    """Per-unit weights 1 / P(A_ij = a_ij | X_i, T_i; beta_hat)."""
    _require_converged(fit)
    probs = np.exp(unit_logprobs(data, fit.beta))
    return WeightTable(probs=probs, weights=1.0 / probs)


def _require_converged(fit: CondFit):
    if not fit.converged:
        raise ConvergenceError(
            "treatment-model fit did not converge; refusing to weight")


def icpw_mean_potential(data: Dataset, fit: CondFit, a: int,
                        prob_floor: float = PROB_FLOOR,
                        truncate_quantile: float | None = None,
                        clusters_dropped: int = 0) -> EffectEstimate:
    """Weighted mean of the potential outcome at treatment level ``a``.

    Only units observed at level ``a`` contribute; their conditional
    probability of that level is the observed-level probability, so one
    probability table serves every level.  ``truncate_quantile``, if set,
    caps weights at that sample quantile (off by default; no truncation in
    the reference results).
    """
    _require_converged(fit)
    if not 0 <= a <= data.n_levels:
        raise DomainError("treatment level %d out of range" % a)
    logp = unit_logprobs(data, fit.beta)
    mask = data.treatment == a
    phi = np.exp(logp[mask])
    warnings = []
    n_extreme = int(np.sum(phi < prob_floor))
    if n_extreme:
        warnings.append(
            "%d unit(s) with conditional probability below %g; weights are "
            "extreme" % (n_extreme, prob_floor))
    w = 1.0 / phi
    if truncate_quantile is not None:
        if not 0 < truncate_quantile <= 1:
            raise DomainError("truncation quantile must be in (0, 1]")
        cap = np.quantile(w, truncate_quantile) if w.size else np.inf
        w = np.minimum(w, cap)
        warnings.append("weights truncated at the %g quantile"
                        % truncate_quantile)
    point = float(np.sum(data.outcome[mask] * w) / data.n_units)
    return EffectEstimate(method="icpw", estimand="mean_potential(%d)" % a,
                          point=point, n_used=data.n_units,
                          clusters_dropped=clusters_dropped,
                          warnings=tuple(warnings))


def icpw_tau(data: Dataset, fit: CondFit,
             prob_floor: float = PROB_FLOOR,
             truncate_quantile: float | None = None,
             clusters_dropped: int = 0) -> EffectEstimate:
    """ICPW average treatment effect, the difference of the two arm means."""
    if data.n_levels != 1:
        raise DataError("tau is defined for binary treatment")
    m1 = icpw_mean_potential(data, fit, 1, prob_floor, truncate_quantile,
                             clusters_dropped)
    m0 = icpw_mean_potential(data, fit, 0, prob_floor, truncate_quantile,
                             clusters_dropped)
    return EffectEstimate(method="icpw", estimand="tau",
                          point=m1.point - m0.point, n_used=data.n_units,
                          clusters_dropped=clusters_dropped,
                          warnings=tuple(dict.fromkeys(m1.warnings
                                                       + m0.warnings)))


def naive_tau(data: Dataset, variant: str = "as_printed",
              clusters_dropped: int = 0) -> EffectEstimate:
    """Unadjusted contrast.

    ``as_printed`` follows the reference formula (1/n) sum (A - (1-A)) Y, a
    difference of per-n sums whose value depends on the arm imbalance;
    ``group_means`` is the conventional difference of arm means.
    """
    if data.n_levels != 1:
        raise DataError("the naive contrast is defined for binary treatment")
    a = data.treatment
    y = data.outcome
    if variant == "as_printed":
        point = float(np.sum((2 * a - 1) * y) / data.n_units)
    elif variant == "group_means":
        if not (np.any(a == 1) and np.any(a == 0)):
            raise EstimabilityError("both treatment arms must be observed")
        point = float(y[a == 1].mean() - y[a == 0].mean())
    else:
        raise DomainError("unknown naive variant %r" % variant)
    return EffectEstimate(method="naive", estimand="tau", point=point,
                          n_used=data.n_units,
                          clusters_dropped=clusters_dropped)


def effect_contrast(p1: EffectEstimate, p0: EffectEstimate, kind: str,
                    replicates=None, level: float = 0.95) -> EffectEstimate:
    """Contrast two potential-outcome means.

    ``replicates``, if given, is a (B, 2) array of joint bootstrap draws of
    (mean at level 1, mean at level 0); the contrast's se and percentile CI
    are then taken over the per-replicate contrasts.
    """
    if kind == "risk_difference":
        fn = lambda v1, v0: v1 - v0
    elif kind == "relative_risk":
        fn = lambda v1, v0: v1 / v0
    elif kind == "odds_ratio":
        fn = lambda v1, v0: (v1 / (1 - v1)) / (v0 / (1 - v0))
    else:
        raise DomainError("unknown contrast kind %r" % kind)
    if kind in ("relative_risk", "odds_ratio"):
        for est in (p1, p0):
            if not 0 < est.point < 1:
                raise DomainError(
                    "%s requires potential-outcome means in (0, 1); got %g"
                    % (kind, est.point))
    point = float(fn(p1.point, p0.point))
    se = ci = None
    if replicates is not None:
        reps = np.asarray(replicates, dtype=np.float64)
        vals = fn(reps[:, 0], reps[:, 1])
        vals = vals[np.isfinite(vals)]
        if vals.size >= 2:
            se = float(np.std(vals, ddof=1))
            alpha = (1.0 - level) / 2.0
            ci = (float(np.quantile(vals, alpha)),
                  float(np.quantile(vals, 1.0 - alpha)))
    return EffectEstimate(method=p1.method, estimand=kind, point=point,
                          n_used=min(p1.n_used, p0.n_used),
                          clusters_dropped=p1.clusters_dropped,
                          se=se, ci=ci)


def binary_weight_parts(data: Dataset, fit: CondFit) -> dict:
    """Per-unit probability and score pieces shared with the sandwich."""
    _require_converged(fit)
    if data.n_levels != 1:
        raise DataError("binary weight parts need binary treatment")
    return binary_unit_quantities(data, fit.beta)
