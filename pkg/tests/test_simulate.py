"""Scenario generator and the Monte Carlo replication harness."""

import json

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from icpw.errors import DomainError, UsageError
from icpw.simulate import (METHOD_TAGS, SCENARIOS, STUDIES, ScenarioConfig,
                           SimulationReport, generate_dataset, render_report,
                           run_replications, tau_simu)


def test_scenario_and_study_catalogue():
    assert SCENARIOS == {1: (0.0, 0.0), 2: (5.0, 0.0), 3: (0.0, 5.0),
                         4: (5.0, 5.0)}
    assert STUDIES == {1: (500, 2, 6), 2: (20, 2, 21)}
    config = ScenarioConfig.from_scenario(2, study=2, tau=1.5, seed=7,
                                          reps=10)
    assert (config.m, config.size_low, config.size_high) == (20, 2, 21)
    assert (config.rho_xu, config.rho_yu) == (5.0, 0.0)
    assert config.tau == 1.5 and config.seed == 7 and config.reps == 10
    with pytest.raises(UsageError, match="scenario"):
        ScenarioConfig.from_scenario(5)
    with pytest.raises(UsageError, match="study"):
        ScenarioConfig.from_scenario(1, study=3)


def test_config_validation():
    with pytest.raises(DomainError, match="cluster"):
        ScenarioConfig(m=0, size_low=2, size_high=6, rho_xu=0.0, rho_yu=0.0)
    with pytest.raises(DomainError, match="low"):
        ScenarioConfig(m=5, size_low=1, size_high=6, rho_xu=0.0, rho_yu=0.0)
    with pytest.raises(DomainError, match="low"):
        ScenarioConfig(m=5, size_low=4, size_high=3, rho_xu=0.0, rho_yu=0.0)
    with pytest.raises(DomainError, match="replication"):
        ScenarioConfig(m=5, size_low=2, size_high=6, rho_xu=0.0,
                       rho_yu=0.0, reps=0)


def test_generate_dataset_replicate_streams():
    config = ScenarioConfig.from_scenario(1, study=2, seed=5)
    data_a, internals_a = generate_dataset(config, 3)
    data_b, _ = generate_dataset(config, 3)
    assert_array_equal(data_a.treatment, data_b.treatment)
    assert_array_equal(data_a.outcome, data_b.outcome)
    assert_array_equal(data_a.covariates, data_b.covariates)
    data_c, _ = generate_dataset(config, 4)
    assert not np.array_equal(data_a.outcome, data_c.outcome)

    assert data_a.m == 20
    sizes = np.diff(data_a.starts)
    assert sizes.min() >= 2 and sizes.max() <= 20  # floor of Unif(2, 21)
    assert data_a.cluster_ids[0] == "s00000"
    assert set(np.unique(data_a.covariates[:, 1])) <= {-1.0, 0.0, 1.0}

    # the observable table and the latent record describe the same clusters
    first = internals_a[0]
    k = first.x1.size
    assert_array_equal(first.x1, data_a.covariates[:k, 0])
    assert_array_equal(first.treatments, data_a.treatment[:k])
    assert_array_equal(first.outcomes,
                       np.where(first.treatments == 1, first.y1, first.y0))


def test_tau_simu_matches_design_effect():
    config = ScenarioConfig.from_scenario(1, study=1, seed=11)
    _, internals = generate_dataset(config, 0)
    # scenario 1 has rho_YU = 0, so Y(1)-Y(0) = tau + noise
    assert abs(tau_simu(internals) - 2.0) < 0.2


def test_run_replications_counts_and_order():
    config = ScenarioConfig(m=2, size_low=2, size_high=2, rho_xu=0.0,
                            rho_yu=0.0, seed=21, reps=12)
    report = run_replications(config, ["simu", "icpw", "naive"])
    assert [ms.method for ms in report.methods] == ["simu", "icpw", "naive"]
    for ms in report.methods:
        assert ms.reps_used + ms.failures == config.reps
        assert_allclose(ms.bias, ms.mean - config.tau)
    by_tag = {ms.method: ms for ms in report.methods}
    assert by_tag["simu"].failures == 0
    # two-unit clusters are frequently unanimous, so icpw loses replicates
    assert by_tag["icpw"].failures > 0
    with pytest.raises(UsageError, match="unknown method tags"):
        run_replications(config, ["simu", "ols"])


def test_run_replications_thread_invariance():
    config = ScenarioConfig(m=30, size_low=2, size_high=6, rho_xu=0.0,
                            rho_yu=0.0, seed=13, reps=8)
    one = run_replications(config, ["simu", "naive"], threads=1)
    two = run_replications(config, ["simu", "naive"], threads=2)
    assert one.to_json() == two.to_json()


def test_report_renderings():
    config = ScenarioConfig(m=25, size_low=2, size_high=6, rho_xu=0.0,
                            rho_yu=0.0, seed=17, reps=5)
    report = run_replications(config, list(METHOD_TAGS))

    again = SimulationReport.from_json(render_report(report, "json"))
    assert again == report
    payload = json.loads(report.to_json())
    assert payload["config"]["m"] == 25

    csv_text = render_report(report, "csv")
    lines = csv_text.strip().split("\n")
    assert lines[0] == "method,mean,bias,sd,reps_used,failures"
    assert len(lines) == 1 + len(METHOD_TAGS)
    fields = lines[1].split(",")
    assert fields[0] == "simu"
    assert float(fields[1]) == report.methods[0].mean  # repr round-trips

    table = render_report(report, "table")
    assert "m=25" in table and "rho_XU=0" in table
    for tag in METHOD_TAGS:
        assert tag in table

    with pytest.raises(UsageError, match="format"):
        render_report(report, "yaml")
