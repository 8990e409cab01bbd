"""Uncertainty quantification: sandwich asymptotics and cluster bootstrap.

The sandwich covariance for the conditional-likelihood estimate is
B1 = B2^-1 B3 B2^-1 with B2 the average per-unit Hessian of the
conditional log-densities and B3 the average outer product of per-cluster
score sums (clusters are the independent sampling units, so scores are
summed within cluster before the outer product).

Effect-level variances stack the estimating equations for the
coefficients and the weighted mean: the per-cluster influence is
psi_i = d_i + H' B2^-1 s_i, where d_i is the cluster sum of centered
weighted-outcome contributions (the variability the estimator would have
at fixed coefficients), s_i the cluster score sum, and H the derivative
of the estimator in the coefficients.  V = (1/n) sum psi_i^2 and
se = sqrt(V / n); the pure coefficient-propagation part of V is the
quadratic form H' B1 H.

The bootstrap resamples whole clusters with replacement and reruns the
entire pipeline (positivity filter, refit, re-estimate) per replicate.
Each replicate draws from its own counter-based stream seeded by
(seed, replicate index), so results cannot depend on scheduling.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import baselines, estimators
from .cmle import CondFit, binary_unit_quantities, fit_cmle, \
    unit_logprobs, unit_scores, _fd_hessian
from .data_model import Dataset, filter_positivity
from .errors import (BootstrapError, DataError, DomainError, IcpwError,
                     SingularMatrixError, UsageError)
from .estimators import EffectEstimate


@dataclass
class SandwichParts:
    """Pieces of the asymptotic variance, filled in as they are computed.

    ``b1`` is the limiting covariance of sqrt(n) (beta_hat - beta); ``h1``
    and ``h2`` are the delta-method slopes for the potential-outcome mean
    and the treatment effect; ``v1``/``v2`` the resulting variances.
    ``cluster_scores`` holds the per-cluster score sums and ``direct`` the
    per-cluster centered sums of weighted-outcome contributions for the
    most recently requested estimator.
    """

    b2: np.ndarray | None = None
    b3: np.ndarray | None = None
    b1: np.ndarray | None = None
    h1: np.ndarray | None = None
    h2: np.ndarray | None = None
    v1: float | None = None
    v2: float | None = None
    cluster_scores: np.ndarray | None = None
    direct: np.ndarray | None = None


def _require_converged(fit: CondFit):
    estimators._require_converged(fit)


def sandwich_beta_cov(data: Dataset, fit: CondFit,
                      fd_step: float = 1e-5) -> SandwichParts:
    """B1, B2, B3 evaluated at the fitted coefficients.

    B2 comes from central finite differences of the analytic score (one
    Hessian of the total conditional log-likelihood, divided by n); B3
    from analytic per-unit scores summed within cluster.
    """
    _require_converged(fit)
    n = data.n_units
    b2 = _fd_hessian(data, fit.beta, fd_step) / n
    scores = unit_scores(data, fit.beta)
    b3 = cluster_score_outer(scores, data.starts)
    cond = np.linalg.cond(b2)
    if not np.isfinite(cond) or cond > 1e12:
        evals, evecs = np.linalg.eigh(b2)
        worst = evecs[:, np.argmin(np.abs(evals))]
        names = _direction_names(worst, data, fit)
        raise SingularMatrixError(
            "Hessian of the conditional log-likelihood is singular "
            "(condition number %.2e); flattest direction loads on %s"
            % (cond, names))
    inv_b3 = np.linalg.solve(b2, b3)
    b1 = np.linalg.solve(b2, inv_b3.T)
    b1 = 0.5 * (b1 + b1.T)
    sums = np.add.reduceat(scores, data.starts[:-1], axis=0)
    return SandwichParts(b2=b2, b3=b3, b1=b1, cluster_scores=sums)


def cluster_score_outer(scores: np.ndarray, starts: np.ndarray) -> np.ndarray:
    """Average outer product of within-cluster score sums (the B3 matrix).

    Clusters are the independent sampling units; with singleton clusters
    this reduces to the plain per-unit outer-product average.
    """
    sums = np.add.reduceat(scores, starts[:-1], axis=0)
    return sums.T @ sums / scores.shape[0]


def _direction_names(direction, data: Dataset, fit: CondFit) -> str:
    names = data.covariate_names
    if fit.n_levels > 1:
        names = ["%s[level %d]" % (nm, k + 1)
                 for k in range(fit.n_levels) for nm in names]
    order = np.argsort(-np.abs(direction))
    return ", ".join("%s (%.3f)" % (names[k], direction[k])
                     for k in order[:3])


def influence_vectors(data: Dataset, fit: CondFit, a: int | None,
                      parts: SandwichParts | None = None) -> SandwichParts:
    """Slope and direct residuals of the estimator in the coefficients.

    With ``a`` an integer, fills ``h1`` for the potential-outcome mean at
    that level: (1/n) sum over units with A=a of Y / phi(a)^2 times the
    gradient of phi(a).  With ``a=None``, fills ``h2`` for the treatment
    effect (binary treatment only), both arms carrying the gradient of the
    treated-level probability.  Either way also fills ``direct`` with the
    per-cluster sums of centered weighted-outcome contributions, the
    fixed-coefficient part of the estimator's influence function.
    """
    _require_converged(fit)
    if parts is None:
        parts = SandwichParts()
    n = data.n_units
    y = data.outcome
    sizes = np.diff(data.starts)
    if a is not None:
        if not 0 <= a <= data.n_levels:
            raise DomainError("treatment level %d out of range" % a)
        # only units observed at level a contribute, and for them phi(a)
        # is the observed-level probability
        logp = unit_logprobs(data, fit.beta)
        grads = unit_scores(data, fit.beta)
        mask = data.treatment == a
        contrib = (y[mask] * np.exp(-logp[mask]))[:, None] * grads[mask]
        parts.h1 = contrib.sum(axis=0) / n
        c = np.zeros(n)
        c[mask] = y[mask] * np.exp(-logp[mask])
        parts.direct = np.add.reduceat(c, data.starts[:-1]) \
            - sizes * (c.sum() / n)
        return parts
    if data.n_levels != 1:
        raise DataError("the effect-level slope is defined for binary "
                        "treatment only")
    q = binary_unit_quantities(data, fit.beta)
    logphi1, logphi0, glog1 = q["logphi1"], q["logphi0"], q["glog1"]
    a_obs = data.treatment
    # {A/phi1^2 + (1-A)/(1-phi1)^2} Y dphi1, with dphi1 = phi1 * glog1
    scale = np.where(a_obs == 1, np.exp(-logphi1),
                     np.exp(logphi1 - 2.0 * logphi0))
    parts.h2 = ((y * scale)[:, None] * glog1).sum(axis=0) / n
    w_obs = np.exp(-np.where(a_obs == 1, logphi1, logphi0))
    c = np.where(a_obs == 1, y * w_obs, -y * w_obs)
    parts.direct = np.add.reduceat(c, data.starts[:-1]) \
        - sizes * (c.sum() / n)
    return parts


def asymptotic_se(parts: SandwichParts, n: int, target: str) -> float:
    """se = sqrt(V / n) for ``target`` in {mean_potential, tau}.

    V = (1/n) sum_i psi_i^2 with psi_i = direct_i + H' B2^-1 s_i: the
    fixed-coefficient variability of the weighted sums plus the
    propagation of coefficient uncertainty.  Nonnegative by construction.
    """
    if parts.b1 is None or parts.cluster_scores is None:
        raise UsageError("parts lack b1; run sandwich_beta_cov first")
    if target == "mean_potential":
        h = parts.h1
    elif target == "tau":
        h = parts.h2
    else:
        raise UsageError("unknown se target %r" % target)
    if h is None or parts.direct is None:
        raise UsageError("parts lack the slope for %s; run "
                         "influence_vectors first" % target)
    psi = parts.direct + parts.cluster_scores @ np.linalg.solve(parts.b2, h)
    v = float(psi @ psi) / n
    if target == "mean_potential":
        parts.v1 = v
    else:
        parts.v2 = v
    return float(np.sqrt(v / n))


def icpw_tau_with_se(data: Dataset, fit: CondFit,
                     clusters_dropped: int = 0) -> EffectEstimate:
    """ICPW effect with the sandwich standard error attached."""
    est = estimators.icpw_tau(data, fit, clusters_dropped=clusters_dropped)
    parts = sandwich_beta_cov(data, fit)
    influence_vectors(data, fit, None, parts)
    se = asymptotic_se(parts, data.n_units, "tau")
    return est.with_uncertainty(se=se)


# -- pipelines ----------------------------------------------------------------


def make_pipeline(method: str, **options):
    """Estimator recipe: Dataset -> EffectEstimate, filtering included.

    Known methods: icpw, ipw_fixed, ipw_random, naive.  The icpw,
    ipw_fixed and naive recipes apply the positivity filter first, since
    the first two are undefined on unanimous clusters and the comparison
    is fairest on a shared sample.  The ipw_random recipe keeps every
    cluster (a random intercept pools across clusters, so unanimous ones
    carry information instead of breaking the fit) and weights by the
    population-level propensity; pass ``prediction="mode"`` or
    ``quadrature_nodes`` to override.
    """
    if method not in PIPELINE_METHODS:
        raise UsageError("unknown method %r; expected one of %s"
                         % (method, ", ".join(PIPELINE_METHODS)))

    def run(data: Dataset) -> EffectEstimate:
        if method == "ipw_random":
            opts = {"prediction": "marginal", **options}
            fit = baselines.fit_random_logistic(data, **opts)
            return baselines.ipw_tau_from_propensity(data, fit)
        res = filter_positivity(data)
        sub, dropped = res.retained, len(res.dropped_cluster_ids)
        if method == "naive":
            return estimators.naive_tau(sub, clusters_dropped=dropped,
                                        **options)
        if method == "icpw":
            fit = fit_cmle(sub)
            return estimators.icpw_tau(sub, fit, clusters_dropped=dropped,
                                       **options)
        fit = baselines.fit_fixed_logistic(sub)
        return baselines.ipw_tau_from_propensity(sub, fit,
                                                 clusters_dropped=dropped)

    run.method = method
    return run


PIPELINE_METHODS = ("icpw", "ipw_fixed", "ipw_random", "naive")


# -- cluster bootstrap ---------------------------------------------------------


def cluster_bootstrap(data: Dataset, pipeline, B: int, seed: int,
                      level: float = 0.95, threads: int = 1,
                      max_failure_rate: float = 0.2,
                      replicate_sink: list | None = None) -> EffectEstimate:
    """Percentile bootstrap over whole-cluster resamples.

    ``pipeline`` is a method tag or a callable Dataset -> EffectEstimate;
    it is rerun from scratch (filter, fit, estimate) on every replicate.
    Replicate r draws from ``default_rng([seed, r])``, so the sequence is
    reproducible and independent of ``threads``.  Failed replicates are
    excluded and counted; more than ``max_failure_rate`` of them aborts.
    ``replicate_sink``, if a list, receives (replicate index, estimate or
    None) pairs for diagnostics dumps.
    """
    if B < 2:
        raise UsageError("need at least 2 bootstrap replicates")
    if not 0 < level < 1:
        raise DomainError("confidence level must be in (0, 1)")
    if isinstance(pipeline, str):
        pipeline = make_pipeline(pipeline)
    point = pipeline(data)
    m = data.m

    def one(rep: int):
        rng = np.random.default_rng([seed, rep])
        idx = rng.integers(0, m, size=m)
        try:
            return pipeline(data.take_clusters(idx, relabel=True)).point
        except (IcpwError, np.linalg.LinAlgError):
            return None

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            raw = list(pool.map(one, range(B)))
    else:
        raw = [one(rep) for rep in range(B)]
    if replicate_sink is not None:
        replicate_sink.extend(enumerate(raw))
    values = np.array([v for v in raw if v is not None], dtype=np.float64)
    n_failed = B - values.size
    if n_failed > max_failure_rate * B:
        raise BootstrapError("%d of %d bootstrap replicates failed; "
                             "summary would be unreliable" % (n_failed, B))
    se = float(np.std(values, ddof=1))
    alpha = 1.0 - level
    lo, hi = np.quantile(values, [alpha / 2.0, 1.0 - alpha / 2.0])
    warnings = ()
    if n_failed:
        warnings = ("%d of %d bootstrap replicates failed and were excluded"
                    % (n_failed, B),)
    return point.with_uncertainty(se=se, ci=(float(lo), float(hi)),
                                  extra_warnings=warnings)
