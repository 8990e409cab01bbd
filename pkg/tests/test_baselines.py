"""Fixed-effect and random-intercept propensity baselines."""

import numpy as np
import pytest
from numpy.testing import assert_allclose

from icpw.baselines import (PropensityFit, fit_fixed_logistic,
                            fit_random_logistic, ipw_tau_from_propensity,
                            predict_propensity)
from icpw.data_model import Dataset, filter_positivity
from icpw.errors import ConvergenceError, DataError, DomainError, SeparationError
from icpw.simulate import ScenarioConfig, generate_dataset
from scipy.special import expit, logit


def build(labels, a, x, y=None):
    x = np.asarray(x, dtype=np.float64).reshape(len(labels), -1)
    y = np.zeros(len(labels)) if y is None else np.asarray(y, dtype=float)
    names = tuple("x%d" % (k + 1) for k in range(x.shape[1]))
    return Dataset.from_arrays(labels, a, y, x, names)


def scenario_data(study=2, scenario=1, seed=0, rep=0):
    config = ScenarioConfig.from_scenario(scenario, study=study, seed=seed)
    data, _ = generate_dataset(config, rep)
    return data


def test_fixed_effect_symmetric_solution():
    # within-cluster covariate symmetry makes beta = 0 the exact MLE and
    # each intercept the logit of the cluster's treated fraction
    d = build(["a"] * 4 + ["b"] * 2 + ["c"] * 3,
              [1, 0, 1, 0, 1, 0, 1, 1, 0],
              [[1.0], [1.0], [-1.0], [-1.0], [2.0], [2.0], [0.0], [0.0],
               [0.0]])
    fit = fit_fixed_logistic(d)
    assert fit.converged and fit.kind == "fixed_effect"
    assert_allclose(fit.beta, [0.0], atol=1e-8)
    assert_allclose(fit.cluster_effects,
                    [logit(0.5), logit(0.5), logit(2.0 / 3.0)], atol=1e-8)


def test_fixed_effect_profile_property():
    # at the joint MLE the fitted within-cluster probabilities sum to the
    # observed treated count
    d = filter_positivity(scenario_data(study=2, seed=7)).retained
    fit = fit_fixed_logistic(d)
    assert fit.converged
    e = predict_propensity(d, fit)
    sums = np.add.reduceat(e, d.starts[:-1])
    t = np.add.reduceat(d.treatment.astype(float), d.starts[:-1])
    assert_allclose(sums, t, atol=1e-8)


def test_fixed_effect_requires_filtered_input():
    d = build(["a", "a", "b", "b"], [1, 1, 1, 0],
              [[0.1], [0.2], [0.3], [0.4]])
    with pytest.raises(SeparationError):
        fit_fixed_logistic(d)


def test_fixed_effect_flags_cluster_constant_covariate():
    d = build(["a"] * 3 + ["b"] * 3, [1, 0, 0, 0, 1, 1],
              [[0.5, 7.0], [-0.5, 7.0], [0.1, 7.0],
               [0.2, 9.0], [-0.2, 9.0], [0.4, 9.0]])
    fit = fit_fixed_logistic(d)
    assert fit.estimable.tolist() == [True, False]
    assert fit.beta[1] == 0.0
    assert any("x2" in w for w in fit.warnings)


def test_random_intercept_boundary_collapses_to_pooled():
    # no cluster effect in the generator: the variance component runs to
    # its floor and the slopes match plain pooled logistic regression
    rng = np.random.default_rng(3)
    labels, a, x = [], [], []
    for i in range(80):
        n = int(rng.integers(3, 8))
        xi = rng.normal(size=n)
        ai = (rng.uniform(size=n) < expit(0.3 + xi)).astype(int)
        labels += ["c%d" % i] * n
        a += list(ai)
        x += list(xi)
    d = build(labels, a, np.array(x).reshape(-1, 1))
    fit = fit_random_logistic(d)
    assert fit.converged
    assert fit.boundary
    assert fit.variance_component <= 1e-3
    # pooled logistic on the same data, fitted straight by Newton
    X1 = np.column_stack([np.ones(d.n_units), d.covariates])
    beta = np.zeros(2)
    for _ in range(30):
        p = expit(X1 @ beta)
        beta += np.linalg.solve((X1 * (p * (1 - p))[:, None]).T @ X1,
                                X1.T @ (d.treatment - p))
    assert_allclose([fit.intercept, fit.beta[0]], beta, atol=1e-2)


def test_random_intercept_quadrature_stability():
    # scenario data with a real cluster effect: doubling the node count
    # beyond 7 moves the estimate by less than 1e-4
    d = scenario_data(study=2, seed=11)
    f7 = fit_random_logistic(d, quadrature_nodes=7)
    f25 = fit_random_logistic(d, quadrature_nodes=25)
    assert f7.converged and f25.converged
    assert np.max(np.abs(f7.beta - f25.beta)) < 1e-4
    assert abs(f7.intercept - f25.intercept) < 1e-4


def test_random_intercept_laplace_single_node():
    d = scenario_data(study=2, seed=5)
    fit = fit_random_logistic(d, quadrature_nodes=1)
    assert fit.converged
    assert fit.variance_component > 0


def test_random_intercept_trace_and_validation():
    d = scenario_data(study=2, seed=2)
    fit = fit_random_logistic(d)
    trace = np.array(fit.ll_trace)
    assert trace.size >= 2
    # accepted L-BFGS iterates: non-decreasing up to line-search slack
    assert np.all(np.diff(trace) >= -1e-6 * (1 + np.abs(trace[:-1])))
    with pytest.raises(DomainError):
        fit_random_logistic(d, prediction="posterior")
    with pytest.raises(DomainError):
        fit_random_logistic(d, quadrature_nodes=0)


def test_predict_propensity_modes():
    d = build(["a", "a", "b", "b"], [1, 0, 0, 1], [[0.5], [1.0], [2.0],
                                                   [0.1]])
    fit = PropensityFit(kind="random_intercept", beta=np.array([0.2]),
                        cluster_effects=np.array([1.0, -1.0]),
                        converged=True, loglik=0.0, intercept=0.3,
                        prediction="mode")
    eta = 0.3 + 0.2 * d.covariates[:, 0]
    assert_allclose(predict_propensity(d, fit),
                    expit(eta + np.array([1.0, 1.0, -1.0, -1.0])))
    marginal = PropensityFit(kind="random_intercept", beta=np.array([0.2]),
                             cluster_effects=np.array([1.0, -1.0]),
                             converged=True, loglik=0.0, intercept=0.3,
                             prediction="marginal")
    assert_allclose(predict_propensity(d, marginal), expit(eta))


def test_ipw_estimate_from_known_propensity():
    d = build(["a", "a", "b", "b"], [1, 0, 0, 1], np.zeros((4, 1)),
              y=[2.0, 1.0, 3.0, 4.0])
    fit = PropensityFit(kind="fixed_effect", beta=np.zeros(1),
                        cluster_effects=np.zeros(2), converged=True,
                        loglik=0.0)
    est = ipw_tau_from_propensity(d, fit)
    # all propensities are 1/2: estimate is 2 * mean((2A - 1) Y)
    assert_allclose(est.point, 2.0 * np.mean((2 * d.treatment - 1)
                                             * d.outcome), rtol=1e-14)
    assert est.method == "ipw_fixed"
    bad = PropensityFit(kind="fixed_effect", beta=np.zeros(1),
                        cluster_effects=np.zeros(2), converged=False,
                        loglik=0.0)
    with pytest.raises(ConvergenceError):
        ipw_tau_from_propensity(d, bad)


def test_baselines_reject_multinomial_treatment():
    d = Dataset.from_arrays(["c"] * 4, [0, 1, 2, 1], np.zeros(4),
                            np.arange(4.0).reshape(4, 1), ("x1",))
    with pytest.raises(DataError):
        fit_fixed_logistic(d)
    with pytest.raises(DataError):
        fit_random_logistic(d)
