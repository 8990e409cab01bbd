"""Independent reference computations and the self-test suites.

Everything in this module is deliberately slow and simple: direct
enumeration over assignment vectors, Bayes conditioning in the joint
model, and central finite differences.  The suites compare the package's
recursions against these references on randomized inputs; they back both
``icpw selftest`` and the acceptance tests, which call them with larger
sample counts.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .cond_prob import (LinearPredictors, binary_group_logprobs,
                        cond_prob_binary, cond_prob_multinomial)
from .data_model import SufficientStat
from .errors import DomainError, SizeError, UsageError

# Negative-control hook. The suites add this to the production-side values
# before comparing, so a test can set it nonzero and confirm every suite
# actually fails when the numbers are wrong. It must stay 0.0 in a healthy
# build.
PERTURB = 0.0

_ENUM_CAP = 16


def _binary_vectors(n: int, t: int) -> np.ndarray:
    """All 0/1 assignment vectors of length n with exactly t ones, (V, n)."""
    if n > _ENUM_CAP:
        raise SizeError("enumeration over %d units is off the table" % n)
    if not 0 < t < n:
        raise DomainError("need a non-degenerate count, got t=%d, n=%d"
                          % (t, n))
    vecs = [v for v in itertools.product((0, 1), repeat=n) if sum(v) == t]
    return np.array(vecs, dtype=np.float64)


def enumerate_binary_probs(eta, t: int, u: float = 0.0) -> np.ndarray:
    """P(A_j = 1 | X, U = u, T = t) for every unit, by enumeration.

    Conditions the joint Bernoulli(expit(eta_j + u)) model on the treated
    count.  The result is mathematically independent of ``u``; passing
    different values exercises exactly that claim.
    """
    eta = np.asarray(eta, dtype=np.float64)
    vectors = _binary_vectors(eta.shape[0], t)
    p = expit(eta + u)
    logw = vectors @ np.log(p) + (1.0 - vectors) @ np.log1p(-p)
    w = np.exp(logw - logw.max())
    return (w[:, None] * vectors).sum(axis=0) / w.sum()


def enumerate_multinomial_probs(eta, counts) -> np.ndarray:
    """Per-unit level probabilities (n, K+1) given level counts, enumerated.

    ``eta`` is (n, K) for the non-reference levels; level 0 is reference.
    ``counts`` are the non-reference level counts (t_1, ..., t_K).
    """
    eta = np.asarray(eta, dtype=np.float64)
    n, K = eta.shape
    if n > 9:
        raise SizeError("multinomial enumeration capped at 9 units")
    targets = list(np.asarray(counts, dtype=np.int64))
    lw = np.concatenate([np.zeros((n, 1)), eta], axis=1)
    vectors = np.array(
        [v for v in itertools.product(range(K + 1), repeat=n)
         if all(sum(1 for vi in v if vi == k + 1) == targets[k]
                for k in range(K))], dtype=np.int64)
    logw = lw[np.arange(n), vectors].sum(axis=1)
    w = np.exp(logw - logw.max())
    probs = np.empty((n, K + 1))
    for k in range(K + 1):
        probs[:, k] = (w[:, None] * (vectors == k)).sum(axis=0) / w.sum()
    return probs


def enumerate_icpw_expectation(eta, t: int, y, a: int, phi=None) -> float:
    """E[ sum_j I(A_j=a) y_j / phi_j(a) | T = t ] by full enumeration.

    ``phi`` supplies the per-unit probabilities of level ``a`` used in the
    weights; by default they are enumerated here too, making the identity
    with ``sum(y)`` self-contained.  Passing the package's own values
    instead turns this into a check of the production weights.
    """
    eta = np.asarray(eta, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    p1 = enumerate_binary_probs(eta, t)
    if phi is None:
        phi = p1 if a == 1 else 1.0 - p1
    vectors = _binary_vectors(eta.shape[0], t)
    lw = eta - eta.max()
    logw = vectors @ lw
    w = np.exp(logw - logw.max())
    w /= w.sum()
    indicator = vectors if a == 1 else 1.0 - vectors
    sums = indicator @ (y / np.asarray(phi, dtype=np.float64))
    return float(w @ sums)


def fd_gradient(f, x, h: float = 1e-5) -> np.ndarray:
    """Central finite-difference gradient of a scalar function."""
    x = np.asarray(x, dtype=np.float64)
    g = np.empty(x.size)
    flat = x.reshape(-1)
    for k in range(flat.size):
        hk = h * (1.0 + abs(flat[k]))
        xp = flat.copy()
        xp[k] += hk
        xm = flat.copy()
        xm[k] -= hk
        g[k] = (f(xp.reshape(x.shape)) - f(xm.reshape(x.shape))) / (2 * hk)
    return g


# ---------------------------------------------------------------------------
# suites


@dataclass(frozen=True)
class SuiteResult:
    name: str
    ok: bool
    detail: str


def _random_binary_cluster(rng, max_size: int, p: int = 2):
    n = int(rng.integers(2, max_size + 1))
    x = rng.normal(size=(n, p))
    beta = rng.normal(scale=0.8, size=p)
    t = int(rng.integers(1, n))
    return LinearPredictors.from_beta(x, beta), beta, t


def _random_multinomial_cluster(rng, max_size: int, p: int = 2):
    """Cluster where every level occurs and a reference slot remains."""
    n = int(rng.integers(3, max_size + 1))
    x = rng.normal(size=(n, p))
    beta = rng.normal(scale=0.6, size=(2, p))
    while True:
        levels = rng.integers(0, 3, size=n)
        counts = np.array([np.sum(levels == 1), np.sum(levels == 2)])
        if np.all(counts >= 1) and counts.sum() < n:
            break
    lp = LinearPredictors.from_beta(x, beta)
    return lp, beta, SufficientStat(counts=counts, size=n)


def suite_dp_vs_enumeration(clusters: int = 120, max_size: int = 10,
                            multinomial_clusters: int = 40,
                            multinomial_max_size: int = 7,
                            seed: int = 101, tol: float = 1e-10,
                            multinomial_tol: float = 1e-9) -> SuiteResult:
    """Production recursions against direct enumeration, binary and 3-level."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(clusters):
        lp, _, t = _random_binary_cluster(rng, max_size)
        ref = enumerate_binary_probs(lp.eta, t)
        logphi1, _ = binary_group_logprobs(lp.eta[None], np.array([t]))
        got = np.exp(logphi1[0]) + PERTURB
        worst = max(worst, float(np.max(np.abs(got - ref) / ref)))
    worst_multi = 0.0
    for _ in range(multinomial_clusters):
        lp, _, stat = _random_multinomial_cluster(rng, multinomial_max_size)
        ref = enumerate_multinomial_probs(lp.eta, stat.counts)
        for j in range(lp.n):
            for a in range(3):
                got = cond_prob_multinomial(lp, stat, j, a).prob + PERTURB
                worst_multi = max(worst_multi,
                                  abs(got - ref[j, a]) / ref[j, a])
    ok = worst <= tol and worst_multi <= multinomial_tol
    return SuiteResult(
        "dp-vs-enumeration", ok,
        "max rel err binary %.2e (tol %g), multinomial %.2e (tol %g)"
        % (worst, tol, worst_multi, multinomial_tol))


def suite_u_invariance(clusters: int = 60, max_size: int = 9,
                       u_values=(-3.0, -1.0, 0.0, 1.0, 3.0),
                       seed: int = 202, tol: float = 1e-10) -> SuiteResult:
    """Conditioning on the count removes the cluster effect entirely."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(clusters):
        lp, _, t = _random_binary_cluster(rng, max_size)
        refs = np.stack([enumerate_binary_probs(lp.eta, t, u)
                         for u in u_values])
        spread = float(np.max(refs.max(axis=0) - refs.min(axis=0)))
        logphi1, _ = binary_group_logprobs(lp.eta[None], np.array([t]))
        vs_dp = float(np.max(np.abs(np.exp(logphi1[0]) + PERTURB - refs[0])))
        worst = max(worst, spread, vs_dp)
    return SuiteResult(
        "u-invariance", worst <= tol,
        "max discrepancy %.2e across U in %s (tol %g)"
        % (worst, list(u_values), tol))


def suite_exact_unbiasedness(clusters: int = 60, max_size: int = 8,
                             seed: int = 303, tol: float = 1e-10
                             ) -> SuiteResult:
    """Conditional expectation of the weighted cluster sum equals sum(y).

    Weights come from the production probabilities, the expectation from
    enumeration, so this ties the estimator identity to the shipped code.
    """
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(clusters):
        lp, _, t = _random_binary_cluster(rng, max_size)
        y = rng.normal(scale=2.0, size=lp.n)
        a = int(rng.integers(0, 2))
        logphi1, logphi0 = binary_group_logprobs(lp.eta[None], np.array([t]))
        phi = np.exp(logphi1[0] if a == 1 else logphi0[0]) + PERTURB
        got = enumerate_icpw_expectation(lp.eta, t, y, a, phi=phi)
        ref = float(y.sum())
        worst = max(worst, abs(got - ref) / (1.0 + abs(ref)))
    return SuiteResult(
        "exact-unbiasedness", worst <= tol,
        "max rel deviation of E[weighted sum] from sum(y): %.2e (tol %g)"
        % (worst, tol))


def suite_gradients(instances: int = 80, max_size: int = 8,
                    seed: int = 404, tol: float = 1e-6) -> SuiteResult:
    """Analytic scores of the log conditional probabilities vs central FD."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(instances):
        if rng.uniform() < 0.7:
            lp, beta, t = _random_binary_cluster(rng, max_size)
            j = int(rng.integers(0, lp.n))
            a = int(rng.integers(0, 2))
            got = cond_prob_binary(lp, t, j, a).grad_log_prob + PERTURB

            def f(b, x=lp.x, t=t, j=j, a=a):
                return cond_prob_binary(
                    LinearPredictors.from_beta(x, b), t, j, a).log_prob

            ref = fd_gradient(f, beta)
        else:
            lp, beta, stat = _random_multinomial_cluster(rng, 6)
            j = int(rng.integers(0, lp.n))
            a = int(rng.integers(0, 3))
            got = cond_prob_multinomial(lp, stat, j, a).grad_log_prob + PERTURB

            def f(b, x=lp.x, stat=stat, j=j, a=a):
                return cond_prob_multinomial(
                    LinearPredictors.from_beta(x, b), stat, j, a).log_prob

            ref = fd_gradient(f, beta)
        err = float(np.linalg.norm(got - ref)
                    / max(np.linalg.norm(ref), 1e-8))
        worst = max(worst, err)
    return SuiteResult("gradients", worst <= tol,
                       "max rel gradient error %.2e (tol %g)" % (worst, tol))


SUITES = {
    "dp-vs-enumeration": suite_dp_vs_enumeration,
    "u-invariance": suite_u_invariance,
    "exact-unbiasedness": suite_exact_unbiasedness,
    "gradients": suite_gradients,
}


def run_suites(names=None, seed=None) -> list[SuiteResult]:
    """Run the named suites (default: all) and return their results.

    With ``seed`` given, each suite draws its instances from a stream
    derived from it; otherwise the per-suite defaults apply.
    """
    if names is None or list(names) == ["all"]:
        names = list(SUITES)
    unknown = [n for n in names if n not in SUITES]
    if unknown:
        raise UsageError("unknown suite(s) %s; expected a subset of %s"
                         % (unknown, ", ".join(SUITES)))
    if seed is None:
        return [SUITES[n]() for n in names]
    return [SUITES[n](seed=1000003 * seed + 17 * i)
            for i, n in enumerate(names)]
