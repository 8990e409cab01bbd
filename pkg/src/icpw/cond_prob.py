"""Conditional treatment probabilities given within-cluster counts.

Everything reduces to elementary symmetric polynomials of the assignment
weights ``w_l = exp(eta_l)``: conditioning a cluster on its treatment count
``t`` makes

    P(A_j = 1 | T = t) = w_j * e_{t-1}(w without j) / e_t(w)

and the multinomial analogue replaces the single count by a vector of
per-level counts with a lattice of partial counts as DP state.  All
polynomial evaluation is done in log space with log-sum-exp so large
``|eta|`` or large clusters cannot overflow.

Gradients are analytic.  The derivative of a log conditional probability is
a difference of ensemble expectations of covariates, whose ingredients are
leave-one-out and leave-two-out symmetric polynomials.  Those are obtained
by rerunning the same shift recurrence on reduced weight vectors, which
keeps every stored quantity a log of something positive (a signed
derivative channel carried through the recurrence would forfeit the
log-space guarantee).

Batched entry points operate on clusters packed by size into rectangular
arrays; per-unit results come back in the same layout.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .errors import DataError, DegeneracyError, DomainError, SizeError
from .data_model import SufficientStat

BRUTEFORCE_CAP_BINARY = 14
BRUTEFORCE_CAP_MULTINOMIAL = 9
DEFAULT_STATE_CAP = 1_000_000

# score tensors need G*n*(n-1)*(n-2) floats; above this, fall back to a
# per-unit loop with O(G*n^2) memory
_SCORE_BLOCK_LIMIT = 20_000_000


@dataclass(frozen=True)
class LinearPredictors:
    """Per-unit linear predictors and the covariates that generated them.

    ``eta`` has shape (n,) for binary treatment or (n, K) for K + 1 levels
    (level 0 is the reference with predictor fixed at 0).  ``x`` is kept so
    gradients with respect to beta can be assembled.
    """

    eta: np.ndarray
    x: np.ndarray

    def __post_init__(self):
        eta = np.asarray(self.eta, dtype=np.float64)
        x = np.asarray(self.x, dtype=np.float64)
        object.__setattr__(self, "eta", eta)
        object.__setattr__(self, "x", x)
        if eta.ndim not in (1, 2):
            raise DataError("eta must be a vector or an (n, K) matrix")
        if not np.all(np.isfinite(eta)):
            raise DataError("eta entries must be finite")
        if x.ndim != 2 or x.shape[0] != eta.shape[0]:
            raise DataError("covariates must be (n, p) matching eta length")

    @property
    def n(self) -> int:
        return self.eta.shape[0]

    @classmethod
    def from_beta(cls, x, beta) -> "LinearPredictors":
        x = np.asarray(x, dtype=np.float64)
        beta = np.asarray(beta, dtype=np.float64)
        if beta.ndim == 1:
            return cls(eta=x @ beta, x=x)
        # multinomial: beta stacked (K, p), eta columns per level
        return cls(eta=x @ beta.T, x=x)


@dataclass(frozen=True)
class CondProbResult:
    """A conditional probability with its log and score contribution."""

    log_prob: float
    prob: float
    grad_log_prob: np.ndarray


def _log_esp(lw, kmax=None):
    """Log elementary symmetric polynomials along the last axis.

    Input (..., n) of log weights; output (..., kmax + 1) where entry k is
    log e_k.  Shift recurrence with logaddexp, entries above the running
    prefix length stay -inf.
    """
    n = lw.shape[-1]
    if kmax is None:
        kmax = n
    out = np.full(lw.shape[:-1] + (kmax + 1,), -np.inf)
    out[..., 0] = 0.0
    for l in range(n):
        hi = min(l + 1, kmax)
        out[..., 1:hi + 1] = np.logaddexp(
            out[..., 1:hi + 1], out[..., :hi] + lw[..., l, None])
    return out


def _delete_idx(n):
    """(n, n-1) index matrix whose row j enumerates 0..n-1 without j."""
    i = np.arange(n - 1)
    return i[None, :] + (i[None, :] >= np.arange(n)[:, None])


def log_elem_sym(weights, t: int) -> float:
    """Log of the degree-``t`` elementary symmetric polynomial.

    Parameters
    ----------
    weights : positive, finite vector of length n.
    t : integer with 0 <= t <= n.
    """
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim != 1:
        raise DomainError("weights must be a vector")
    if not (np.all(np.isfinite(w)) and np.all(w > 0)):
        raise DomainError("weights must be positive and finite")
    if not 0 <= t <= w.shape[0]:
        raise DomainError("t=%d out of range for n=%d" % (t, w.shape[0]))
    return float(_log_esp(np.log(w), kmax=t)[..., t])


def _center(eta):
    # subtract the per-row max: weights become <= 1 (no overflow) and an
    # exactly-representable cluster-constant shift cancels bit-for-bit
    return eta - np.max(eta, axis=-1, keepdims=True)


def _take_last(arr, idx):
    """take_along_axis on the last axis with a broadcast integer index."""
    idx = np.broadcast_to(idx, arr.shape[:-1])[..., None]
    return np.take_along_axis(arr, idx, axis=-1)[..., 0]


def binary_group_logprobs(eta, t):
    """Per-unit log P(A_j=1|T=t) and log P(A_j=0|T=t) for packed clusters.

    Parameters
    ----------
    eta : (G, n) linear predictors for G same-size clusters.
    t : (G,) integer counts, each strictly inside (0, n).

    Returns
    -------
    logphi1, logphi0 : (G, n) arrays; exp of them sums to 1 per unit.
    """
    eta = np.asarray(eta, dtype=np.float64)
    t = np.asarray(t, dtype=np.int64)
    G, n = eta.shape
    if np.any(t <= 0) or np.any(t >= n):
        raise DegeneracyError("count t must satisfy 0 < t < n")
    lw = _center(eta)
    logden = _take_last(_log_esp(lw), t)                   # (G,)
    loo = _log_esp(lw[:, _delete_idx(n)])                  # (G, n, n)
    logphi1 = lw + _take_last(loo, (t - 1)[:, None]) - logden[:, None]
    logphi0 = _take_last(loo, t[:, None]) - logden[:, None]
    return logphi1, logphi0


def binary_group_scores(eta, t, x):
    """Per-unit d log P(A_j=1|T=t) / d beta for packed clusters.

    Returns ``(logphi1, logphi0, glog1)`` where ``glog1`` is (G, n, p).
    The identity used is

        d log p1_j = x_j + E[sum_{l != j} x_l A_l | A_j=1, T] - E[sum_l x_l A_l | T]

    with the conditional inclusion probabilities built from leave-two-out
    polynomials.
    """
    eta = np.asarray(eta, dtype=np.float64)
    t = np.asarray(t, dtype=np.int64)
    x = np.asarray(x, dtype=np.float64)
    G, n = eta.shape
    if np.any(t <= 0) or np.any(t >= n):
        raise DegeneracyError("count t must satisfy 0 < t < n")
    lw = _center(eta)
    idx1 = _delete_idx(n)
    logE = _log_esp(lw)
    logden = _take_last(logE, t)
    lw1 = lw[:, idx1]                                      # (G, n, n-1)
    loo = _log_esp(lw1)                                    # (G, n, n)
    loo_tm1 = _take_last(loo, (t - 1)[:, None])            # (G, n)
    logphi1 = lw + loo_tm1 - logden[:, None]
    logphi0 = _take_last(loo, t[:, None]) - logden[:, None]

    p1 = np.exp(logphi1)
    x1 = x[:, idx1, :]                                     # (G, n, n-1, p)
    if n >= 3:
        cond = _pair_inclusion(lw, lw1, loo_tm1, t, idx1)
        pair_term = np.einsum("gjl,gjlp->gjp", cond, x1)
    else:
        # n == 2, t == 1: the other unit is untreated for sure
        pair_term = np.zeros_like(x)
    s_all = np.einsum("gj,gjp->gp", p1, x)
    glog1 = x + pair_term - s_all[:, None, :]
    return logphi1, logphi0, glog1


def _pair_inclusion(lw, lw1, loo_tm1, t, idx1):
    """cond[g, j, l'] = P(A_l = 1 | A_j = 1, T = t), l' indexing units != j."""
    G, n = lw.shape
    idx2 = _delete_idx(n - 1)
    tm2 = np.maximum(t - 2, 0)
    if G * n * (n - 1) * (n - 2) <= _SCORE_BLOCK_LIMIT:
        l2o = _log_esp(lw1[:, :, idx2])                    # (G, n, n-1, n-1)
        val = _take_last(l2o, tm2[:, None, None])          # (G, n, n-1)
    else:
        val = np.empty((G, n, n - 1))
        for j in range(n):
            l2o = _log_esp(lw1[:, j][:, idx2])             # (G, n-1, n-1)
            val[:, j] = _take_last(l2o, tm2[:, None])
    logcond = lw1 + val - loo_tm1[:, :, None]
    logcond[np.broadcast_to((t == 1)[:, None, None], logcond.shape)] = -np.inf
    return np.exp(logcond)


def cond_prob_binary(cluster_eta: LinearPredictors, t: int, j: int,
                     a: int) -> CondProbResult:
    """P(A_j = a | X, T = t) for one binary-treatment cluster.

    ``j`` is a 0-based unit index.  Requires 0 < t < n (degenerate counts
    must have been filtered upstream).

    Examples: eta=(0,0), t=1 gives probability 1/2 for either unit; for
    eta=log(1,2,4) and t=1 the first unit's treated probability is 1/7.
    """
    eta = np.asarray(cluster_eta.eta, dtype=np.float64)
    if eta.ndim != 1:
        raise DataError("binary conditional probability needs a vector eta")
    n = eta.shape[0]
    if not 0 <= j < n:
        raise DomainError("unit index %d out of range for n=%d" % (j, n))
    if a not in (0, 1):
        raise DomainError("binary treatment level must be 0 or 1")
    if not 0 < t < n:
        raise DegeneracyError(
            "t=%d is degenerate for n=%d; cluster should have been filtered"
            % (t, n))
    logphi1, logphi0, glog1 = binary_group_scores(
        eta[None], np.array([t]), cluster_eta.x[None])
    if a == 1:
        lp = logphi1[0, j]
        grad = glog1[0, j]
    else:
        lp = logphi0[0, j]
        # d log(1 - p1) = -p1/(1-p1) * d log p1
        grad = -np.exp(logphi1[0, j] - logphi0[0, j]) * glog1[0, j]
    return CondProbResult(log_prob=float(lp), prob=float(np.exp(lp)),
                          grad_log_prob=grad)


# ---------------------------------------------------------------------------
# multinomial treatment


def _multi_weights(eta):
    """(n, K+1) log weight matrix with the reference level prepended."""
    eta = np.asarray(eta, dtype=np.float64)
    if eta.ndim != 2:
        raise DataError("multinomial eta must be an (n, K) matrix")
    lw = np.concatenate([np.zeros((eta.shape[0], 1)), eta], axis=1)
    # center non-reference columns for overflow safety (ratio-invariant)
    lw[:, 1:] -= lw[:, 1:].max(axis=0, keepdims=True)
    return lw


def _multi_dp(lw, targets, skip=()):
    """Log sums over assignments of the given units with level counts == state.

    ``lw`` is (n, K+1); ``targets`` bounds the DP lattice.  Units listed in
    ``skip`` are left out.  Returns the full lattice table; entry ``c`` is
    the log weight sum of assignments whose non-reference level counts are
    exactly ``c``.
    """
    K = len(targets)
    shape = tuple(tk + 1 for tk in targets)
    dp = np.full(shape, -np.inf)
    dp[(0,) * K] = 0.0
    grow = [slice(None)] * K
    shrink = [slice(None)] * K
    for l in range(lw.shape[0]):
        if l in skip:
            continue
        acc = dp + lw[l, 0]
        for k in range(1, K + 1):
            if targets[k - 1] == 0:
                continue
            grow[k - 1] = slice(1, None)
            shrink[k - 1] = slice(0, -1)
            sh = np.full(shape, -np.inf)
            sh[tuple(grow)] = dp[tuple(shrink)] + lw[l, k]
            acc = np.logaddexp(acc, sh)
            grow[k - 1] = slice(None)
            shrink[k - 1] = slice(None)
        dp = acc
    return dp


def _check_counts(counts: SufficientStat, n: int):
    targets = np.asarray(counts.counts, dtype=np.int64)
    if counts.size != n:
        raise DataError("sufficient statistic size does not match cluster")
    if np.any(targets < 0) or targets.sum() > n:
        raise DomainError("count vector is inconsistent with cluster size")
    nonref = targets.sum()
    if nonref == 0 or np.any(targets == n):
        raise DegeneracyError(
            "constant treatment vector; cluster should have been filtered")
    return targets


def cond_prob_multinomial(cluster_eta: LinearPredictors,
                          counts: SufficientStat, j: int, a: int,
                          state_cap: int = DEFAULT_STATE_CAP
                          ) -> CondProbResult:
    """P(A_j = a | X, T) for a cluster with K + 1 treatment levels.

    ``counts`` holds the non-reference level counts (t_1, ..., t_K).  The
    numerator and denominator are lattice DPs over partial count vectors;
    the gradient stacks the K per-level blocks row-major into a vector of
    length K * p.
    """
    eta = np.asarray(cluster_eta.eta, dtype=np.float64)
    if eta.ndim == 1:
        eta = eta[:, None]
    n, K = eta.shape
    x = cluster_eta.x
    p = x.shape[1]
    targets = _check_counts(counts, n)
    if targets.shape[0] != K:
        raise DataError("counts length does not match number of levels")
    if not 0 <= j < n:
        raise DomainError("unit index %d out of range for n=%d" % (j, n))
    if not 0 <= a <= K:
        raise DomainError("treatment level %d out of range" % a)
    if int(np.prod(targets + 1)) > state_cap:
        raise SizeError("DP state space %d exceeds cap %d"
                        % (int(np.prod(targets + 1)), state_cap))
    if a >= 1 and targets[a - 1] == 0:
        raise DegeneracyError(
            "unit level %d has count 0; infeasible conditional query" % a)
    if a == 0 and targets.sum() == n:
        raise DegeneracyError(
            "no reference-level slots left; infeasible conditional query")

    lw = _multi_weights(eta)
    num_targets = targets.copy()
    if a >= 1:
        num_targets[a - 1] -= 1
    den = _multi_dp(lw, targets)
    num = _multi_dp(lw, targets, skip=(j,))[tuple(num_targets)]
    logden = den[tuple(targets)]
    lp = lw[j, a] + num - logden

    grad = np.zeros((K, p))
    if a >= 1:
        grad[a - 1] += x[j]
    # denominator ensemble: P_T(A_l = k) for every unit l
    for l in range(n):
        tbl = _multi_dp(lw, targets, skip=(l,))
        for k in range(1, K + 1):
            if targets[k - 1] == 0:
                continue
            red = targets.copy()
            red[k - 1] -= 1
            pk = np.exp(lw[l, k] + tbl[tuple(red)] - logden)
            grad[k - 1] -= pk * x[l]
    # numerator ensemble over units != j with target num_targets
    lognum = num
    for l in range(n):
        if l == j:
            continue
        tbl = _multi_dp(lw, targets, skip=(j, l))
        for k in range(1, K + 1):
            if num_targets[k - 1] == 0:
                continue
            red = num_targets.copy()
            red[k - 1] -= 1
            pk = np.exp(lw[l, k] + tbl[tuple(red)] - lognum)
            grad[k - 1] += pk * x[l]
    return CondProbResult(log_prob=float(lp), prob=float(np.exp(lp)),
                          grad_log_prob=grad.reshape(-1))


# ---------------------------------------------------------------------------
# enumeration oracle


def cond_prob_bruteforce(cluster_eta: LinearPredictors, stat: SufficientStat,
                         j: int, a: int,
                         cap_binary: int = BRUTEFORCE_CAP_BINARY,
                         cap_multinomial: int = BRUTEFORCE_CAP_MULTINOMIAL
                         ) -> CondProbResult:
    """Reference implementation by full enumeration of the permutation set.

    Used by tests and the self-test suites as the independent oracle; never
    on large clusters (caps: 14 units binary, 9 multinomial).
    """
    eta = np.asarray(cluster_eta.eta, dtype=np.float64)
    x = np.asarray(cluster_eta.x, dtype=np.float64)
    binary = eta.ndim == 1
    n = eta.shape[0]
    if binary and n > cap_binary:
        raise SizeError("n=%d exceeds binary enumeration cap %d"
                        % (n, cap_binary))
    if not binary and n > cap_multinomial:
        raise SizeError("n=%d exceeds multinomial enumeration cap %d"
                        % (n, cap_multinomial))
    if not 0 <= j < n:
        raise DomainError("unit index %d out of range" % j)

    if binary:
        t = int(stat.t) if isinstance(stat, SufficientStat) else int(stat)
        if not 0 < t < n:
            raise DegeneracyError("degenerate t for enumeration")
        if a not in (0, 1):
            raise DomainError("binary treatment level must be 0 or 1")
        lw = eta - eta.max()
        vectors = [v for v in itertools.product((0, 1), repeat=n)
                   if sum(v) == t]
        level = np.array(vectors, dtype=np.float64)        # (V, n)
        logw = level @ lw
        w = np.exp(logw - logw.max())
        den = w.sum()
        in_num = level[:, j] == a
        num = w[in_num].sum()
        prob = num / den
        # gradient: ensemble covariate-mean difference
        e_den = (w[:, None] * level).sum(0) / den          # E_den[A_l]
        e_num = (w[in_num, None] * level[in_num]).sum(0) / num
        grad = x.T @ (e_num - e_den)
        return CondProbResult(log_prob=float(np.log(prob)), prob=float(prob),
                              grad_log_prob=grad)

    K = eta.shape[1]
    targets = _check_counts(stat, n)
    if not 0 <= a <= K:
        raise DomainError("treatment level %d out of range" % a)
    lw = _multi_weights(eta)
    vectors = [v for v in itertools.product(range(K + 1), repeat=n)
               if all(sum(1 for vi in v if vi == k) == targets[k - 1]
                      for k in range(1, K + 1))]
    logw = np.array([sum(lw[i, v[i]] for i in range(n)) for v in vectors])
    w = np.exp(logw - logw.max())
    den = w.sum()
    sel = np.array([v[j] == a for v in vectors])
    num = w[sel].sum()
    if num == 0.0:
        raise DegeneracyError("level %d infeasible under the count vector" % a)
    prob = num / den
    grad = np.zeros((K, x.shape[1]))
    for k in range(1, K + 1):
        ind = np.array([[1.0 if vi == k else 0.0 for vi in v]
                        for v in vectors])
        e_den = (w[:, None] * ind).sum(0) / den
        e_num = (w[sel, None] * ind[sel]).sum(0) / num
        grad[k - 1] = x.T @ (e_num - e_den)
    return CondProbResult(log_prob=float(np.log(prob)), prob=float(prob),
                          grad_log_prob=grad.reshape(-1))
