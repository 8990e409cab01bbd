"""Conditional treatment probabilities: closed forms, identities, oracles."""

import itertools

import numpy as np
import pytest
from numpy.testing import assert_allclose

from icpw.cond_prob import (LinearPredictors, binary_group_logprobs,
                            binary_group_scores, cond_prob_binary,
                            cond_prob_bruteforce, cond_prob_multinomial,
                            log_elem_sym)
from icpw.data_model import SufficientStat
from icpw.errors import DegeneracyError, DomainError, SizeError
from icpw.oracles import fd_gradient


def lp(eta, x=None):
    eta = np.asarray(eta, dtype=np.float64)
    if x is None:
        x = np.zeros((eta.shape[0], 1))
    return LinearPredictors(eta=eta, x=np.asarray(x, dtype=np.float64))


def test_log_elem_sym_small_case():
    # weights (2, 3, 5): e_0..e_3 = 1, 10, 31, 30
    for t, e in enumerate([1.0, 10.0, 31.0, 30.0]):
        assert_allclose(log_elem_sym([2.0, 3.0, 5.0], t), np.log(e),
                        rtol=1e-14)
    with pytest.raises(DomainError):
        log_elem_sym([2.0, 3.0], 3)
    with pytest.raises(DomainError):
        log_elem_sym([2.0, -3.0], 1)


def test_binary_closed_forms():
    # two exchangeable units, one treated: probability 1/2 each
    assert_allclose(cond_prob_binary(lp([0.0, 0.0]), 1, 0, 1).prob, 0.5,
                    rtol=1e-14)
    # weights (1, 2, 4), t=1: P(unit 0 treated) = 1/7
    eta = np.log([1.0, 2.0, 4.0])
    assert_allclose(cond_prob_binary(lp(eta), 1, 0, 1).prob, 1.0 / 7.0,
                    rtol=1e-13)
    # t=2: P(unit 0 treated) = w0(w1+w2)/e2 = 6/14
    assert_allclose(cond_prob_binary(lp(eta), 2, 0, 1).prob, 6.0 / 14.0,
                    rtol=1e-13)
    # complement level
    assert_allclose(cond_prob_binary(lp(eta), 2, 0, 0).prob, 8.0 / 14.0,
                    rtol=1e-13)


def test_binary_probabilities_sum_to_count():
    # E[sum_j A_j | T=t] = t, so the treated probabilities sum to t
    rng = np.random.default_rng(5)
    for _ in range(25):
        n = int(rng.integers(2, 11))
        eta = rng.normal(scale=1.5, size=n)
        t = int(rng.integers(1, n))
        logphi1, logphi0 = binary_group_logprobs(eta[None], np.array([t]))
        p1 = np.exp(logphi1[0])
        assert_allclose(p1.sum(), t, rtol=1e-12)
        assert_allclose(p1 + np.exp(logphi0[0]), 1.0, rtol=1e-12)


def test_cluster_constant_shift_is_invisible():
    # conditioning on the count cancels any cluster-level addend exactly;
    # this is the mechanism that removes the unmeasured confounder
    rng = np.random.default_rng(6)
    eta = rng.normal(size=7)
    base, _ = binary_group_logprobs(eta[None], np.array([3]))
    for shift in (-4.0, 0.5, 9.0):
        shifted, _ = binary_group_logprobs((eta + shift)[None], np.array([3]))
        assert_allclose(shifted, base, atol=1e-12)


def test_binary_matches_bruteforce():
    rng = np.random.default_rng(7)
    for _ in range(30):
        n = int(rng.integers(2, 9))
        eta = rng.normal(scale=1.2, size=n)
        t = int(rng.integers(1, n))
        j = int(rng.integers(0, n))
        a = int(rng.integers(0, 2))
        got = cond_prob_binary(lp(eta), t, j, a).prob
        ref = cond_prob_bruteforce(lp(eta), t, j, a).prob
        assert_allclose(got, ref, rtol=1e-12)


def test_multinomial_matches_bruteforce_and_sums_to_one():
    rng = np.random.default_rng(8)
    for _ in range(12):
        n = int(rng.integers(3, 8))
        x = rng.normal(size=(n, 2))
        beta = rng.normal(scale=0.7, size=(2, 2))
        while True:
            levels = rng.integers(0, 3, size=n)
            counts = np.array([np.sum(levels == 1), np.sum(levels == 2)])
            if np.all(counts >= 1) and counts.sum() < n:
                break
        pred = LinearPredictors.from_beta(x, beta)
        stat = SufficientStat(counts=counts, size=n)
        for j in range(n):
            probs = [cond_prob_multinomial(pred, stat, j, a).prob
                     for a in range(3)]
            refs = [cond_prob_bruteforce(pred, stat, j, a).prob
                    for a in range(3)]
            assert_allclose(probs, refs, rtol=1e-11)
            assert_allclose(sum(probs), 1.0, rtol=1e-11)


def test_multinomial_level_probabilities_sum_to_counts():
    x = np.arange(10.0).reshape(5, 2)
    pred = LinearPredictors.from_beta(x, np.array([[0.2, -0.1], [0.05, 0.3]]))
    stat = SufficientStat(counts=np.array([2, 1]), size=5)
    for level, expected in ((1, 2.0), (2, 1.0), (0, 2.0)):
        total = sum(cond_prob_multinomial(pred, stat, j, level).prob
                    for j in range(5))
        assert_allclose(total, expected, rtol=1e-11)


def test_single_level_multinomial_reduces_to_binary():
    rng = np.random.default_rng(9)
    x = rng.normal(size=(6, 2))
    beta = rng.normal(size=2)
    pred_b = LinearPredictors.from_beta(x, beta)
    pred_m = LinearPredictors(eta=pred_b.eta[:, None], x=x)
    stat = SufficientStat(counts=np.array([2]), size=6)
    for j in (0, 3, 5):
        b = cond_prob_binary(pred_b, 2, j, 1)
        m = cond_prob_multinomial(pred_m, stat, j, 1)
        assert_allclose(m.prob, b.prob, rtol=1e-12)
        assert_allclose(m.grad_log_prob, b.grad_log_prob, rtol=1e-9)


def test_gradients_match_finite_differences():
    rng = np.random.default_rng(10)
    x = rng.normal(size=(5, 2))
    beta = rng.normal(size=2)

    def f(b):
        return cond_prob_binary(LinearPredictors.from_beta(x, b), 2, 1,
                                0).log_prob

    got = cond_prob_binary(LinearPredictors.from_beta(x, beta), 2, 1,
                           0).grad_log_prob
    assert_allclose(got, fd_gradient(f, beta), rtol=1e-7)


def test_group_scores_consistent_with_per_unit_calls():
    rng = np.random.default_rng(11)
    eta = rng.normal(size=(3, 4))  # three clusters of size four
    x = rng.normal(size=(3, 4, 2))
    t = np.array([1, 2, 3])
    logphi1, logphi0, glog1 = binary_group_scores(eta, t, x)
    for g in range(3):
        for j in range(4):
            one = cond_prob_binary(LinearPredictors(eta[g], x[g]),
                                   int(t[g]), j, 1)
            assert_allclose(one.log_prob, logphi1[g, j], rtol=1e-12)
            assert_allclose(one.grad_log_prob, glog1[g, j], rtol=1e-10,
                            atol=1e-12)


def test_degenerate_and_domain_errors():
    with pytest.raises(DegeneracyError):
        cond_prob_binary(lp([0.0, 0.0]), 2, 0, 1)
    with pytest.raises(DegeneracyError):
        cond_prob_binary(lp([0.0, 0.0]), 0, 0, 1)
    with pytest.raises(DomainError):
        cond_prob_binary(lp([0.0, 0.0]), 1, 5, 1)
    with pytest.raises(DomainError):
        cond_prob_binary(lp([0.0, 0.0]), 1, 0, 2)
    pred = lp(np.zeros(16))
    with pytest.raises(SizeError):
        cond_prob_bruteforce(pred, 8, 0, 1)
    small = LinearPredictors(eta=np.zeros((4, 2)), x=np.zeros((4, 1)))
    stat = SufficientStat(counts=np.array([1, 1]), size=4)
    with pytest.raises(SizeError):
        cond_prob_multinomial(small, stat, 0, 1, state_cap=1)
    with pytest.raises(DegeneracyError):
        cond_prob_multinomial(small, SufficientStat(np.array([0, 0]), 4),
                              0, 1)


def test_bruteforce_enumeration_is_exact_bayes():
    # tiny case checked against a hand enumeration over all vectors
    eta = np.log([1.0, 3.0])
    # t=1: vectors (1,0) weight 1, (0,1) weight 3
    assert_allclose(cond_prob_bruteforce(lp(eta), 1, 1, 1).prob, 0.75,
                    rtol=1e-14)
    vecs = [v for v in itertools.product((0, 1), repeat=2) if sum(v) == 1]
    assert len(vecs) == 2
