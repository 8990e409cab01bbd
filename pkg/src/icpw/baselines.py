"""Comparison IPW estimators: fixed-effect and random-intercept logistic.

Both models regress treatment on covariates with a per-cluster intercept;
the fixed-effect variant estimates one intercept per cluster by joint
maximum likelihood (block elimination makes this cheap), the random
variant integrates a Normal(0, sigma^2) intercept out of the likelihood by
mode-centered, curvature-scaled Gauss-Hermite quadrature.

The random-intercept model includes a global intercept (the zero-mean
random effect cannot absorb an overall treatment rate); the fixed-effect
model's cluster intercepts absorb it instead.

All per-cluster work (intercept solves, quadrature) is vectorized across
clusters and reduced with fixed-order numpy sums, so results are
deterministic regardless of thread settings.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.optimize import minimize
from scipy.special import expit

from .data_model import Dataset
from .errors import ConvergenceError, DataError, DomainError, SeparationError
from .estimators import EffectEstimate

# below this variance the random intercept is indistinguishable from zero
# and the model has collapsed to pooled logistic regression
BOUNDARY_SIGMA2 = 1e-4


@dataclass
class PropensityFit:
    """A fitted propensity model for binary treatment.

    ``cluster_effects`` holds per-cluster intercepts: maximum likelihood
    estimates for the fixed-effect model, posterior modes (empirical Bayes)
    for the random-intercept model.  ``estimable`` marks covariates that
    could be fitted (cluster-constant columns are collinear with the
    fixed-effect intercepts and left at zero).
    """

    kind: str
    beta: np.ndarray
    cluster_effects: np.ndarray
    converged: bool
    loglik: float
    variance_component: float | None = None
    intercept: float = 0.0
    prediction: str = "mode"
    boundary: bool = False
    estimable: np.ndarray | None = None
    warnings: tuple = ()
    ll_trace: tuple = ()


def _require_binary(data: Dataset):
    if data.n_levels != 1:
        raise DataError("propensity baselines support binary treatment only")


def _bernoulli_ll(a, zeta):
    return float(np.sum(a * zeta - np.logaddexp(0.0, zeta)))


def _solve_cluster_intercepts(eta, t, starts, sigma2=None, u0=None,
                              max_iter=60, tol=1e-11):
    """Per-cluster intercepts solving sum_j expit(eta_j + u) = t (+ prior).

    With ``sigma2`` the Newton target is the posterior mode (the -u/sigma^2
    prior term added); without it, the profile intercept.  Vectorized over
    clusters.  The objective is strictly concave in u, so clipped Newton
    converges from any start.
    """
    m = t.shape[0]
    ci = np.repeat(np.arange(m), np.diff(starts))
    u = np.zeros(m) if u0 is None else u0.copy()
    prior = 0.0 if sigma2 is None else 1.0 / sigma2
    for _ in range(max_iter):
        p = expit(eta + u[ci])
        resid = t - np.add.reduceat(p, starts[:-1])
        if sigma2 is not None:
            resid = resid - u * prior
        if np.max(np.abs(resid)) < tol:
            break
        w = np.add.reduceat(p * (1.0 - p), starts[:-1]) + prior
        u += np.clip(resid / np.maximum(w, 1e-12), -10.0, 10.0)
    return u


def fit_fixed_logistic(data: Dataset, tol: float = 1e-9,
                       max_iter: int = 50) -> PropensityFit:
    """Joint ML logistic fit with one intercept per cluster.

    The global intercept is absorbed by the cluster intercepts, so no
    intercept column is added.  Covariates without within-cluster variation
    anywhere are collinear with the intercepts and reported as inestimable
    (left at zero).  Profile Newton: intercepts are re-solved exactly for
    each candidate beta, and the beta step uses the Schur-complement
    Hessian.
    """
    _require_binary(data)
    X = data.covariates
    a = data.treatment.astype(np.float64)
    starts = data.starts
    sizes = data.sizes()
    t = np.add.reduceat(a, starts[:-1])
    if np.any(t <= 0) or np.any(t >= sizes):
        raise SeparationError(
            "constant-treatment cluster: its intercept has no finite MLE; "
            "apply the positivity filter first")
    ci = data.cluster_index()

    # cluster-constant columns are collinear with the intercepts
    first = X[starts[:-1]][ci]
    estimable = ~np.all(X == first, axis=0)
    warnings = []
    if not estimable.all():
        dropped = [data.covariate_names[k]
                   for k in np.flatnonzero(~estimable)]
        warnings.append("covariates %s have no within-cluster variation; "
                        "inestimable with cluster intercepts, left at zero"
                        % dropped)
    Xa = X[:, estimable]
    pa = Xa.shape[1]

    beta = np.zeros(pa)
    eta = Xa @ beta if pa else np.zeros(data.n_units)
    u = _solve_cluster_intercepts(eta, t, starts)
    ll = _bernoulli_ll(a, eta + u[ci])
    trace = [ll]
    converged = not pa  # intercept-only model is solved exactly
    for _ in range(max_iter if pa else 0):
        p = expit(eta + u[ci])
        w = p * (1.0 - p)
        score = Xa.T @ (a - p)
        if np.max(np.abs(score)) <= tol:
            converged = True
            break
        xw = Xa * w[:, None]
        h_bb = -xw.T @ Xa
        j = np.add.reduceat(xw, starts[:-1], axis=0)        # (m, pa)
        w_i = np.add.reduceat(w, starts[:-1])
        h_prof = h_bb + (j / w_i[:, None]).T @ j
        try:
            step = np.linalg.solve(h_prof, -score)
        except np.linalg.LinAlgError:
            warnings.append("singular profile Hessian; stopping early")
            break
        lam, accepted = 1.0, False
        for _ in range(30):
            cand = beta + lam * step
            eta_c = Xa @ cand
            u_c = _solve_cluster_intercepts(eta_c, t, starts, u0=u)
            ll_c = _bernoulli_ll(a, eta_c + u_c[ci])
            if ll_c > ll or abs(ll_c - ll) <= 1e-12 * (1 + abs(ll)):
                beta, eta, u, accepted = cand, eta_c, u_c, True
                converged = abs(ll_c - ll) <= 1e-12 * (1 + abs(ll))
                ll = ll_c
                break
            lam /= 2.0
        if not accepted:
            break
        trace.append(ll)
        if converged:
            break
        if np.linalg.norm(beta) > 1e3:
            raise SeparationError("propensity coefficients diverging; "
                                  "separated data")
    if np.max(np.abs(u)) > 30:
        warnings.append("a cluster intercept exceeds 30 in absolute value; "
                        "within-cluster separation suspected")
        converged = False
    full_beta = np.zeros(data.n_covariates)
    full_beta[estimable] = beta
    return PropensityFit(kind="fixed_effect", beta=full_beta,
                         cluster_effects=u, converged=converged, loglik=ll,
                         estimable=estimable, warnings=tuple(warnings),
                         ll_trace=tuple(trace))


# -- random intercept ---------------------------------------------------------


@lru_cache(maxsize=8)
def _hermgauss(q):
    z, w = np.polynomial.hermite.hermgauss(q)
    return z, np.log(w)


def _pooled_logistic(X1, a, iters=25):
    beta = np.zeros(X1.shape[1])
    for _ in range(iters):
        p = expit(X1 @ beta)
        g = X1.T @ (a - p)
        if np.max(np.abs(g)) < 1e-10:
            break
        w = np.maximum(p * (1 - p), 1e-10)
        try:
            beta += np.linalg.solve((X1 * w[:, None]).T @ X1, g)
        except np.linalg.LinAlgError:
            break
        beta = np.clip(beta, -30, 30)
    return beta


def fit_random_logistic(data: Dataset, quadrature_nodes: int = 15,
                        prediction: str = "mode") -> PropensityFit:
    """Logistic mixed model by adaptive Gauss-Hermite quadrature.

    Maximizes the marginal likelihood over (intercept, beta, log sigma).
    Nodes are recentered at the per-cluster posterior mode and rescaled by
    the curvature there on every objective evaluation; the gradient uses
    the same nodes (it is the quadrature approximation of the posterior
    expectation of the complete-data score).  One node reduces exactly to
    the Laplace approximation.

    A boundary solution sigma -> 0 is reported via ``boundary=True``; the
    fit then coincides with pooled logistic regression.
    """
    _require_binary(data)
    if prediction not in ("mode", "marginal"):
        raise DomainError("prediction must be 'mode' or 'marginal'")
    if quadrature_nodes < 1:
        raise DomainError("need at least 1 quadrature node")
    X = data.covariates
    a = data.treatment.astype(np.float64)
    starts = data.starts
    t = np.add.reduceat(a, starts[:-1])
    ci = data.cluster_index()
    m = data.m
    z, logw = _hermgauss(quadrature_nodes)
    psi_lo, psi_hi = np.log(1e-4), np.log(60.0)

    X1 = np.column_stack([np.ones(data.n_units), X])

    def parts(theta):
        alpha, beta, psi = theta[0], theta[1:-1], theta[-1]
        sigma2 = np.exp(2.0 * psi)
        eta = alpha + X @ beta
        mode = _solve_cluster_intercepts(eta, t, starts, sigma2=sigma2)
        p_at = expit(eta + mode[ci])
        curv = np.add.reduceat(p_at * (1 - p_at), starts[:-1]) + 1.0 / sigma2
        s = 1.0 / np.sqrt(curv)
        u = mode[:, None] + np.sqrt(2.0) * s[:, None] * z[None, :]  # (m, Q)
        zeta = eta[:, None] + u[ci]                                  # (n, Q)
        h = np.add.reduceat(a[:, None] * zeta - np.logaddexp(0, zeta),
                            starts[:-1], axis=0)
        h += -0.5 * u ** 2 / sigma2 - psi - 0.5 * np.log(2 * np.pi)
        core = logw[None, :] + z[None, :] ** 2 + h
        top = core.max(axis=1, keepdims=True)
        ll_i = np.log(np.sum(np.exp(core - top), axis=1)) + top[:, 0] \
            + 0.5 * np.log(2.0) + np.log(s)
        return ll_i, core, zeta, u, mode, sigma2

    def nll_grad(theta):
        ll_i, core, zeta, u, mode, sigma2 = parts(theta)
        omega = np.exp(core - core.max(axis=1, keepdims=True))
        omega /= omega.sum(axis=1, keepdims=True)                    # (m, Q)
        resid = a[:, None] - expit(zeta)                             # (n, Q)
        r_i = np.add.reduceat(resid, starts[:-1], axis=0)            # (m, Q)
        g_alpha = np.sum(omega * r_i)
        g_beta = np.empty(X.shape[1])
        for c in range(X.shape[1]):
            rb = np.add.reduceat(resid * X[:, c:c + 1], starts[:-1], axis=0)
            g_beta[c] = np.sum(omega * rb)
        g_psi = np.sum(omega * (u ** 2 / sigma2 - 1.0))
        grad = np.concatenate([[g_alpha], g_beta, [g_psi]])
        return -float(ll_i.sum()), -grad

    x0 = np.concatenate([_pooled_logistic(X1, a), [0.0]])
    bounds = [(None, None)] * X1.shape[1] + [(psi_lo, psi_hi)]
    trace = []
    seen: dict[bytes, float] = {}

    def objective(theta):
        val, grad = nll_grad(theta)
        seen[theta.tobytes()] = val
        return val, grad

    def nll_only(theta):
        val = -float(parts(theta)[0].sum())
        seen[theta.tobytes()] = val
        return val

    def record(xk):
        # accepted iterates were just evaluated; fall back to a fresh eval
        key = xk.tobytes()
        trace.append(-(seen[key] if key in seen else nll_grad(xk)[0]))

    # The analytic score holds the adapted nodes fixed.  With one node that
    # drops the curvature half of the objective entirely, so the Laplace
    # path differentiates numerically; from two nodes up the mismatch is
    # a vanishing quadrature artifact.
    fun, jac = (nll_only, None) if quadrature_nodes == 1 else (objective, True)
    res = minimize(fun, x0, jac=jac, method="L-BFGS-B", bounds=bounds,
                   callback=record, options={"maxiter": 200})
    if not res.success:
        # line searches can fail on the tiny quadrature-induced mismatch
        # between objective and gradient; a fresh start usually clears it
        res = minimize(fun, res.x, jac=jac, method="L-BFGS-B",
                       bounds=bounds, callback=record,
                       options={"maxiter": 200})
    theta = res.x
    ll_i, _, _, _, mode, sigma2 = parts(theta)
    boundary = sigma2 <= BOUNDARY_SIGMA2
    warnings = ()
    converged = bool(res.success)
    if not converged and np.max(np.abs(res.jac)) < 5e-3:
        converged = True
        warnings = ("optimizer stopped early on a flat region; gradient "
                    "norm %.1e accepted" % np.max(np.abs(res.jac)),)
    elif not converged:
        warnings = ("optimizer: %s" % res.message,)
    return PropensityFit(kind="random_intercept", beta=theta[1:-1].copy(),
                         cluster_effects=mode, converged=converged,
                         loglik=float(ll_i.sum()),
                         variance_component=float(sigma2),
                         intercept=float(theta[0]), prediction=prediction,
                         boundary=boundary, warnings=warnings,
                         ll_trace=tuple(trace))


def predict_propensity(data: Dataset, fit: PropensityFit) -> np.ndarray:
    """Per-unit P(A=1 | X, cluster effect) under the fitted model."""
    _require_binary(data)
    eta = data.covariates @ fit.beta
    if fit.kind == "fixed_effect":
        return expit(eta + fit.cluster_effects[data.cluster_index()])
    eta = eta + fit.intercept
    if fit.prediction == "mode":
        eta = eta + fit.cluster_effects[data.cluster_index()]
    return expit(eta)


def ipw_tau_from_propensity(data: Dataset, fit: PropensityFit,
                            prob_floor: float = 1e-12,
                            clusters_dropped: int = 0) -> EffectEstimate:
    """IPW effect (1/n) sum {A Y / e - (1-A) Y / (1-e)} under ``fit``."""
    _require_binary(data)
    if not fit.converged:
        raise ConvergenceError("propensity model (%s) did not converge; "
                               "refusing to weight by it" % fit.kind)
    e = predict_propensity(data, fit)
    warnings = []
    n_extreme = int(np.sum((e < prob_floor) | (e > 1 - prob_floor)))
    if n_extreme:
        warnings.append("%d unit(s) with propensity within %g of 0 or 1"
                        % (n_extreme, prob_floor))
    a = data.treatment
    y = data.outcome
    point = float(np.mean(np.where(a == 1, y / e, -y / (1.0 - e))))
    method = "ipw_fixed" if fit.kind == "fixed_effect" else "ipw_random"
    return EffectEstimate(method=method, estimand="tau", point=point,
                          n_used=data.n_units,
                          clusters_dropped=clusters_dropped,
                          warnings=tuple(warnings))
