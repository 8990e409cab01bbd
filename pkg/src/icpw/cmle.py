"""Conditional maximum likelihood for the treatment model.

The objective is the composite conditional log-likelihood

    l(beta) = sum_i sum_j log P(A_ij = a_ij | X_i, T_i; beta),

a product over units of per-unit conditional probabilities.  (This is not
the classical cluster-level conditional likelihood P(A_i | T_i); the
per-unit form is implemented deliberately and the distinction surfaces in
the cluster-level score sums used by the sandwich variance.)

Newton iteration with the analytic score and a finite-difference Hessian of
that score; step halving keeps the objective non-decreasing.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cond_prob import _multi_dp, _multi_weights, binary_group_logprobs, \
    binary_group_scores
from .data_model import Dataset
from .errors import DegeneracyError, EstimabilityError, SeparationError, \
    SingularMatrixError


@dataclass(frozen=True)
class OptimizerOptions:
    max_iter: int = 100
    score_tol: float = 1e-8
    rel_ll_tol: float = 1e-12
    fd_step: float = 1e-5
    separation_norm: float = 1e3
    max_halvings: int = 30


@dataclass
class CondFit:
    """Result of a conditional maximum likelihood fit.

    ``beta_cov`` stays ``None`` until the inference module attaches the
    sandwich covariance.  ``ll_trace`` records the accepted objective path
    (non-decreasing by construction of the line search).
    """

    beta: np.ndarray
    log_cond_lik: float
    iterations: int
    converged: bool
    grad_norm_at_solution: float
    n_levels: int
    beta_cov: np.ndarray | None = None
    ll_trace: tuple = ()


def _binary_groups(data: Dataset):
    """Packed groups plus their counts, validated as non-degenerate."""
    out = []
    for g in data.packed().groups:
        t = g["A"].sum(axis=1)
        if np.any(t <= 0) or np.any(t >= g["n"]):
            raise DegeneracyError(
                "degenerate cluster reached the conditional likelihood; "
                "positivity filtering is a caller contract")
        out.append((g, t))
    return out


def _check_information(data: Dataset):
    """Reject covariate columns with no within-cluster variation anywhere."""
    dead = np.ones(data.n_covariates, dtype=bool)
    for g in data.packed().groups:
        x = g["X"]
        dead &= np.all(x == x[:, :1, :], axis=(0, 1))
        if not dead.any():
            return
    names = [data.covariate_names[k] for k in np.flatnonzero(dead)]
    raise EstimabilityError(
        "covariates %s are constant within every cluster; the conditional "
        "likelihood carries no information about their coefficients" % names)


# -- multinomial cluster-level pieces ---------------------------------------


def _multi_clusters(data: Dataset, beta_mat):
    for i in range(data.m):
        c = data.cluster(i)
        a_vec = np.asarray(c.treatments)
        targets = np.array([(a_vec == k).sum()
                            for k in range(1, data.n_levels + 1)])
        lw = _multi_weights(c.covariates @ beta_mat.T)
        yield lw, c.covariates, a_vec, targets


def _multi_cluster_logliks(lw, a_vec, targets):
    n = lw.shape[0]
    den = _multi_dp(lw, targets)[tuple(targets)]
    out = np.empty(n)
    for j in range(n):
        red = targets.copy()
        if a_vec[j] >= 1:
            red[a_vec[j] - 1] -= 1
        num = _multi_dp(lw, targets, skip=(j,))[tuple(red)]
        out[j] = lw[j, a_vec[j]] + num - den
    return out


def _multi_cluster_scores(lw, x, a_vec, targets):
    """Per-unit scores (n, K*p) sharing ensemble tables across units."""
    n, p = x.shape
    K = targets.shape[0]
    logden = _multi_dp(lw, targets)[tuple(targets)]
    # denominator ensemble expectations, common to every unit
    den_term = np.zeros((K, p))
    skip_tables = [_multi_dp(lw, targets, skip=(l,)) for l in range(n)]
    for l in range(n):
        for k in range(1, K + 1):
            if targets[k - 1] == 0:
                continue
            red = targets.copy()
            red[k - 1] -= 1
            den_term[k - 1] += np.exp(
                lw[l, k] + skip_tables[l][tuple(red)] - logden) * x[l]
    scores = np.empty((n, K * p))
    for j in range(n):
        a = int(a_vec[j])
        numt = targets.copy()
        if a >= 1:
            numt[a - 1] -= 1
        lognum = skip_tables[j][tuple(numt)]
        grad = np.zeros((K, p))
        if a >= 1:
            grad[a - 1] += x[j]
        for l in range(n):
            if l == j:
                continue
            tbl = _multi_dp(lw, targets, skip=(j, l))
            for k in range(1, K + 1):
                if numt[k - 1] == 0:
                    continue
                red = numt.copy()
                red[k - 1] -= 1
                grad[k - 1] += np.exp(
                    lw[l, k] + tbl[tuple(red)] - lognum) * x[l]
        scores[j] = (grad - den_term).reshape(-1)
    return scores


# -- objective, score, per-unit quantities -----------------------------------


def cond_loglik(data: Dataset, beta) -> float:
    """Composite conditional log-likelihood at ``beta``."""
    beta = np.asarray(beta, dtype=np.float64)
    if data.n_levels == 1:
        total = 0.0
        for g, t in _binary_groups(data):
            logphi1, logphi0 = binary_group_logprobs(g["X"] @ beta, t)
            a = g["A"]
            total += float(np.sum(np.where(a == 1, logphi1, logphi0)))
        return total
    beta_mat = beta.reshape(data.n_levels, -1)
    return float(sum(_multi_cluster_logliks(lw, a_vec, targets).sum()
                     for lw, _, a_vec, targets in _multi_clusters(data, beta_mat)))


def unit_scores(data: Dataset, beta) -> np.ndarray:
    """Per-unit score contributions, (n_units, dim), in dataset order."""
    beta = np.asarray(beta, dtype=np.float64)
    if data.n_levels == 1:
        packed = data.packed()
        per_group = []
        for g, t in _binary_groups(data):
            logphi1, logphi0, glog1 = binary_group_scores(g["X"] @ beta, t,
                                                          g["X"])
            a = g["A"][..., None]
            # d log phi(0) = -(p1 / phi0) d log p1, computed as a log-ratio
            ratio = np.exp(logphi1 - logphi0)[..., None]
            per_group.append(np.where(a == 1, glog1, -ratio * glog1))
        return packed.scatter_units(per_group, data.n_units, width=beta.size)
    beta_mat = beta.reshape(data.n_levels, -1)
    rows = [
        _multi_cluster_scores(lw, x, a_vec, targets)
        for lw, x, a_vec, targets in _multi_clusters(data, beta_mat)
    ]
    return np.vstack(rows)


def cond_score(data: Dataset, beta) -> np.ndarray:
    """Score of the composite conditional log-likelihood."""
    return unit_scores(data, beta).sum(axis=0)


def unit_logprobs(data: Dataset, beta) -> np.ndarray:
    """Observed-level conditional log-probabilities per unit, dataset order."""
    beta = np.asarray(beta, dtype=np.float64)
    if data.n_levels == 1:
        packed = data.packed()
        vals = []
        for g, t in _binary_groups(data):
            logphi1, logphi0 = binary_group_logprobs(g["X"] @ beta, t)
            vals.append(np.where(g["A"] == 1, logphi1, logphi0))
        return packed.scatter_units(vals, data.n_units)
    beta_mat = beta.reshape(data.n_levels, -1)
    return np.concatenate([
        _multi_cluster_logliks(lw, a_vec, targets)
        for lw, _, a_vec, targets in _multi_clusters(data, beta_mat)])


def binary_unit_quantities(data: Dataset, beta) -> dict:
    """Flat per-unit arrays used by the estimators and the sandwich.

    Keys: ``logphi1``, ``logphi0`` (conditional log-probabilities of the
    two levels), and ``glog1`` (d log P(A=1|T) / d beta, shape (n, p)).
    """
    beta = np.asarray(beta, dtype=np.float64)
    packed = data.packed()
    l1, l0, gl = [], [], []
    for g, t in _binary_groups(data):
        logphi1, logphi0, glog1 = binary_group_scores(g["X"] @ beta, t, g["X"])
        l1.append(logphi1)
        l0.append(logphi0)
        gl.append(glog1)
    return {
        "logphi1": packed.scatter_units(l1, data.n_units),
        "logphi0": packed.scatter_units(l0, data.n_units),
        "glog1": packed.scatter_units(gl, data.n_units, width=beta.size),
    }


# -- Newton fit ---------------------------------------------------------------


def _line_search(data, beta, ll, step, first_ll, max_halvings):
    """Backtracking search for an increase; returns (beta, ll) or None."""
    lam = 1.0
    cand_ll = first_ll
    for _ in range(max_halvings):
        cand = beta + lam * step
        if cand_ll is None:
            cand_ll = cond_loglik(data, cand)
        if cand_ll > ll:
            return cand, cand_ll
        lam /= 2.0
        cand_ll = None
    return None


def _fd_hessian(data, beta, step):
    dim = beta.size
    H = np.empty((dim, dim))
    for k in range(dim):
        h = step * (1.0 + abs(beta[k]))
        bp = beta.copy()
        bp[k] += h
        bm = beta.copy()
        bm[k] -= h
        H[:, k] = (cond_score(data, bp) - cond_score(data, bm)) / (2.0 * h)
    return (H + H.T) / 2.0


def fit_cmle(data: Dataset, options: OptimizerOptions | None = None,
             start=None) -> CondFit:
    """Maximize the composite conditional likelihood by Newton iteration.

    Starts at ``beta = 0`` unless ``start`` is given.  Non-convergence is
    reported through ``converged=False``, never silently; a parameter norm
    above ``options.separation_norm`` raises a separation error since the
    conditional likelihood then has no interior maximizer.
    """
    opts = options or OptimizerOptions()
    _check_information(data)
    dim = data.n_covariates * data.n_levels
    beta = np.zeros(dim) if start is None else \
        np.asarray(start, dtype=np.float64).copy()
    if beta.shape != (dim,):
        raise EstimabilityError("starting point has wrong dimension")

    ll = cond_loglik(data, beta)
    trace = [ll]
    converged = False
    it = 0
    for it in range(1, opts.max_iter + 1):
        score = cond_score(data, beta)
        gnorm = float(np.max(np.abs(score)))
        if gnorm <= opts.score_tol:
            converged = True
            it -= 1
            break
        H = _fd_hessian(data, beta, opts.fd_step)
        try:
            step = np.linalg.solve(H, -score)
        except np.linalg.LinAlgError:
            raise SingularMatrixError(
                "Newton step failed: singular Hessian of the conditional "
                "log-likelihood")
        accepted = None
        if float(score @ step) > 0.0:
            cand = beta + step
            cand_ll = cond_loglik(data, cand)
            small_step = np.linalg.norm(step) <= 1e-5 * (1 + np.linalg.norm(beta))
            if small_step and abs(cand_ll - ll) <= opts.rel_ll_tol * (1 + abs(ll)):
                # flat to float resolution along a vanishing Newton step
                if cand_ll >= ll:
                    beta, ll = cand, cand_ll
                trace.append(ll)
                converged = True
                break
            accepted = _line_search(data, beta, ll, step, cand_ll,
                                    opts.max_halvings)
        if accepted is None:
            # Hessian not usable here (objective is only locally concave);
            # fall back to a bounded gradient-ascent step
            gstep = score / max(1.0, gnorm)
            accepted = _line_search(data, beta, ll, gstep, None,
                                    opts.max_halvings)
        if accepted is None:
            break
        beta, ll = accepted
        if np.linalg.norm(beta) > opts.separation_norm:
            raise SeparationError(
                "parameter norm exceeded %.0f; conditional likelihood looks "
                "separated (no finite maximizer)" % opts.separation_norm)
        trace.append(ll)
    final_score = cond_score(data, beta)
    gnorm = float(np.max(np.abs(final_score)))
    if gnorm <= opts.score_tol:
        converged = True
    return CondFit(beta=beta, log_cond_lik=ll, iterations=it,
                   converged=converged, grad_norm_at_solution=gnorm,
                   n_levels=data.n_levels, ll_trace=tuple(trace))
