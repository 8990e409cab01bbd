"""Dataset container, CSV round trips, and the positivity filter."""

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from icpw.data_model import (Cluster, Dataset, DatasetSchema, SufficientStat,
                             filter_positivity, load_csv, save_csv,
                             sufficient_stat)
from icpw.errors import (DataError, EmptyDataError, EstimabilityError,
                         ParseError, SchemaError)


def build(labels, a, y, x):
    x = np.asarray(x, dtype=np.float64).reshape(len(labels), -1)
    names = tuple("x%d" % (k + 1) for k in range(x.shape[1]))
    return Dataset.from_arrays(labels, a, y, x, names)


def test_from_arrays_groups_by_first_appearance():
    d = build(["b", "a", "b", "a"], [1, 0, 0, 1], [1.0, 2.0, 3.0, 4.0],
              [[10.0], [20.0], [30.0], [40.0]])
    assert d.cluster_ids == ("b", "a")
    assert d.m == 2 and d.n_units == 4
    # non-contiguous rows of one label are gathered in file order
    assert_array_equal(d.cluster(0).outcomes, [1.0, 3.0])
    assert_array_equal(d.cluster(1).covariates[:, 0], [20.0, 40.0])
    assert_array_equal(d.sizes(), [2, 2])
    assert_array_equal(d.cluster_index(), [0, 0, 1, 1])


def test_treatment_codes_must_cover_range():
    with pytest.raises(DataError, match="missing"):
        build(["c", "c", "c"], [0, 2, 2], [0.0, 0.0, 0.0], [[1], [2], [3]])


def test_cluster_ids_must_be_unique():
    with pytest.raises(DataError, match="unique"):
        Dataset(["c", "c"], [0, 1, 2], [0, 1], [0.0, 1.0],
                [[1.0], [2.0]], ("x1",), 1)


def test_outcome_must_be_finite():
    with pytest.raises(DataError, match="finite"):
        build(["c", "c"], [0, 1], [np.nan, 1.0], [[1.0], [2.0]])


def test_sufficient_stat_examples():
    c = Cluster("c", np.array([1, 0, 1]), np.zeros(3), np.zeros((3, 1)))
    assert sufficient_stat(c, 1).t == 2
    c3 = Cluster("c", np.array([0, 1, 2, 1]), np.zeros(4), np.zeros((4, 1)))
    stat = sufficient_stat(c3, 2)
    assert_array_equal(stat.counts, [2, 1])
    assert stat.size == 4
    with pytest.raises(DataError):
        SufficientStat(counts=np.array([2, 1]), size=4).t


def test_filter_positivity_drops_degenerate_clusters():
    d = build(["keep", "keep", "allone", "allone", "single", "zero", "zero"],
              [1, 0, 1, 1, 1, 0, 0],
              [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0],
              [[float(k)] for k in range(7)])
    res = filter_positivity(d)
    assert res.retained.cluster_ids == ("keep",)
    assert res.dropped_cluster_ids == ("allone", "single", "zero")
    assert res.dropped_unit_count == 5
    # idempotent
    again = filter_positivity(res.retained)
    assert again.dropped_cluster_ids == ()
    assert again.retained.n_units == res.retained.n_units


def test_filter_positivity_nothing_left_raises():
    d = build(["a", "a", "b"], [1, 1, 0], [0.0, 0.0, 0.0], [[1], [2], [3]])
    with pytest.raises(EstimabilityError):
        filter_positivity(d)


def test_take_clusters_relabel_allows_repeats():
    d = build(["a", "a", "b"], [1, 0, 0], [1.0, 2.0, 3.0], [[1], [2], [3]])
    boot = d.take_clusters([0, 0], relabel=True)
    assert boot.m == 2
    assert len(set(boot.cluster_ids)) == 2
    assert_array_equal(boot.outcome, [1.0, 2.0, 1.0, 2.0])
    with pytest.raises(DataError):
        d.take_clusters([0, 0])  # duplicate ids without relabelling


def test_csv_round_trip(tmp_path):
    d = build(["a", "a", "b", "b", "b"], [1, 0, 0, 1, 1],
              [0.1, -2.5, 3.25, 1e-7, 12345.678],
              [[0.3, -1.0], [1.7, 2.0], [-0.2, 0.0], [9.9, 1.0], [2.2, -3.5]])
    path = tmp_path / "d.csv"
    save_csv(d, path)
    back = load_csv(path, DatasetSchema(covariate_cols=("x1", "x2")))
    assert back.cluster_ids == d.cluster_ids
    assert_array_equal(back.treatment, d.treatment)
    # repr rendering makes the round trip exact, not just close
    assert_array_equal(back.outcome, d.outcome)
    assert_array_equal(back.covariates, d.covariates)


def test_load_csv_error_reporting(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("cluster,treatment,outcome,x1\n")
    with pytest.raises(EmptyDataError, match="no data rows"):
        load_csv(path, DatasetSchema(covariate_cols=("x1",)))
    path.write_text("cluster,treatment,outcome\nc,1,2.0\n")
    with pytest.raises(SchemaError, match="x1"):
        load_csv(path, DatasetSchema(covariate_cols=("x1",)))
    path.write_text("cluster,treatment,outcome,x1\nc,1,2.0,oops\nc,0,1.0,3\n")
    with pytest.raises(ParseError, match="line 2"):
        load_csv(path, DatasetSchema(covariate_cols=("x1",)))
    with pytest.raises(SchemaError, match="at least one covariate"):
        load_csv(path, DatasetSchema(covariate_cols=()))


def test_packed_layout_scatters_back_to_dataset_order():
    d = build(["a", "a", "a", "b", "b", "c", "c", "c"],
              [1, 0, 1, 0, 1, 1, 1, 0],
              np.arange(8.0), [[float(k)] for k in range(8)])
    packed = d.packed()
    sizes = sorted(g["n"] for g in packed.groups)
    assert sizes == [2, 3]
    vals = [g["Y"] for g in packed.groups]
    assert_allclose(packed.scatter_units(vals, d.n_units), d.outcome)
