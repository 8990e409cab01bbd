"""Clustered-data containers, CSV input and output, positivity screening.

A :class:`Dataset` stores units flat in numpy arrays with cluster boundary
offsets.  Object views (:class:`Cluster`, :class:`UnitRecord`) are built on
demand so the numerical code paths never have to touch per-unit Python
objects.  Treatment is an integer code in ``{0, ..., K}``; ``K == 1`` is the
binary case used throughout the weighting estimators.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import (
    DataError,
    EmptyDataError,
    EstimabilityError,
    ParseError,
    SchemaError,
)


@dataclass(frozen=True)
class UnitRecord:
    """One observation: cluster label, treatment code, outcome, covariates."""

    cluster_id: str
    treatment: int
    outcome: float
    covariates: np.ndarray


@dataclass(frozen=True)
class Cluster:
    """View of one cluster's units, in dataset order."""

    id: str
    treatments: np.ndarray
    outcomes: np.ndarray
    covariates: np.ndarray

    @property
    def size(self) -> int:
        return self.treatments.shape[0]

    @property
    def units(self) -> tuple[UnitRecord, ...]:
        return tuple(
            UnitRecord(self.id, int(a), float(y), x)
            for a, y, x in zip(self.treatments, self.outcomes, self.covariates)
        )


@dataclass(frozen=True)
class SufficientStat:
    """Within-cluster treatment counts.

    For binary treatment (``n_levels == 1``) the stored vector is the single
    count of treated units, exposed as the scalar :attr:`t`.  For ``K + 1``
    treatment levels it is the count vector ``(t_1, ..., t_K)`` of the
    non-reference levels; the reference-level count is the remainder.
    """

    counts: np.ndarray
    size: int

    @property
    def t(self) -> int:
        if self.counts.shape[0] != 1:
            raise DataError("scalar t is only defined for binary treatment")
        return int(self.counts[0])


class Dataset:
    """Immutable clustered dataset backed by flat arrays.

    Parameters
    ----------
    cluster_ids : sequence of str
        One label per cluster, unique, in presentation order.
    starts : ndarray
        Offsets of shape (m + 1,); cluster ``i`` owns rows
        ``starts[i]:starts[i + 1]``.
    treatment : ndarray of int
    outcome : ndarray of float
    covariates : ndarray of float, shape (n, p)
    covariate_names : tuple of str
    n_levels : int
        ``K``; treatment codes live in ``{0, ..., K}``.
    """

    def __init__(self, cluster_ids, starts, treatment, outcome, covariates,
                 covariate_names, n_levels):
        self.cluster_ids = tuple(str(c) for c in cluster_ids)
        self.starts = np.asarray(starts, dtype=np.int64)
        self.treatment = np.asarray(treatment, dtype=np.int64)
        self.outcome = np.asarray(outcome, dtype=np.float64)
        self.covariates = np.asarray(covariates, dtype=np.float64)
        self.covariate_names = tuple(covariate_names)
        self.n_levels = int(n_levels)
        self._validate()
        for arr in (self.starts, self.treatment, self.outcome, self.covariates):
            arr.setflags(write=False)
        self._packed = None

    def _validate(self):
        if self.covariates.ndim != 2:
            raise DataError("covariates must be a 2-d array")
        n = self.treatment.shape[0]
        if n == 0:
            raise EmptyDataError("dataset has no units")
        if self.outcome.shape[0] != n or self.covariates.shape[0] != n:
            raise DataError("treatment, outcome and covariates disagree on n")
        if self.covariates.shape[1] != len(self.covariate_names):
            raise DataError("covariate_names does not match covariate columns")
        if self.covariates.shape[1] == 0:
            raise DataError("at least one covariate column is required")
        m = len(self.cluster_ids)
        if len(set(self.cluster_ids)) != m:
            raise DataError("cluster ids must be unique")
        if self.starts.shape[0] != m + 1 or self.starts[0] != 0 or self.starts[-1] != n:
            raise DataError("cluster offsets are inconsistent with n")
        if np.any(np.diff(self.starts) < 1):
            raise DataError("every cluster must contain at least one unit")
        if self.n_levels < 1:
            raise DataError("n_levels must be >= 1")
        if self.treatment.min() < 0 or self.treatment.max() > self.n_levels:
            raise DataError(
                "treatment codes must lie in {0, ..., %d}" % self.n_levels)
        if not np.all(np.isfinite(self.outcome)):
            raise DataError("outcomes must be finite")
        if not np.all(np.isfinite(self.covariates)):
            raise DataError("covariates must be finite")

    # -- basic shape accessors -------------------------------------------

    @property
    def m(self) -> int:
        return len(self.cluster_ids)

    @property
    def n_units(self) -> int:
        return self.treatment.shape[0]

    @property
    def n_covariates(self) -> int:
        return self.covariates.shape[1]

    def sizes(self) -> np.ndarray:
        return np.diff(self.starts)

    def cluster_index(self) -> np.ndarray:
        """Cluster position (0-based) of every unit, shape (n,)."""
        return np.repeat(np.arange(self.m), self.sizes())

    def cluster(self, i: int) -> Cluster:
        s, e = self.starts[i], self.starts[i + 1]
        return Cluster(self.cluster_ids[i], self.treatment[s:e],
                       self.outcome[s:e], self.covariates[s:e])

    @property
    def clusters(self) -> tuple[Cluster, ...]:
        return tuple(self.cluster(i) for i in range(self.m))

    # -- construction ----------------------------------------------------

    @classmethod
    def from_arrays(cls, cluster_labels, treatment, outcome, covariates,
                    covariate_names, n_levels=None):
        """Build from per-unit arrays; units grouped by first appearance.

        ``cluster_labels`` has one entry per unit.  Rows sharing a label are
        gathered in file order even when not contiguous.
        """
        labels = [str(c) for c in cluster_labels]
        order: dict[str, list[int]] = {}
        for i, lab in enumerate(labels):
            order.setdefault(lab, []).append(i)
        idx = np.fromiter((i for rows in order.values() for i in rows),
                          dtype=np.int64)
        sizes = [len(rows) for rows in order.values()]
        starts = np.concatenate([[0], np.cumsum(sizes)])
        treatment = np.asarray(treatment, dtype=np.int64)[idx]
        if n_levels is None:
            n_levels = int(treatment.max()) if treatment.size else 1
            n_levels = max(n_levels, 1)
            seen = np.unique(treatment)
            expected = np.arange(n_levels + 1)
            if not np.array_equal(seen, expected):
                missing = sorted(set(expected.tolist()) - set(seen.tolist()))
                raise DataError(
                    "treatment codes must cover {0, ..., %d}; missing %s"
                    % (n_levels, missing))
        return cls(list(order.keys()), starts, treatment,
                   np.asarray(outcome, dtype=np.float64)[idx],
                   np.asarray(covariates, dtype=np.float64)[idx],
                   covariate_names, n_levels)

    @classmethod
    def from_clusters(cls, clusters, covariate_names, n_levels=None):
        labels = []
        treatment, outcome, covs = [], [], []
        for c in clusters:
            labels.extend([c.id] * c.size)
            treatment.append(np.asarray(c.treatments))
            outcome.append(np.asarray(c.outcomes))
            covs.append(np.asarray(c.covariates, dtype=np.float64))
        return cls.from_arrays(labels, np.concatenate(treatment),
                               np.concatenate(outcome), np.vstack(covs),
                               covariate_names, n_levels)

    def take_clusters(self, indices, relabel=False) -> "Dataset":
        """New dataset from cluster positions, allowing repeats if relabelled."""
        indices = np.asarray(indices, dtype=np.int64)
        sizes = self.sizes()[indices]
        row_idx = np.concatenate(
            [np.arange(self.starts[i], self.starts[i + 1]) for i in indices]
        ) if indices.size else np.empty(0, dtype=np.int64)
        if relabel:
            ids = ["b%04d_%s" % (k, self.cluster_ids[i])
                   for k, i in enumerate(indices)]
        else:
            ids = [self.cluster_ids[i] for i in indices]
        starts = np.concatenate([[0], np.cumsum(sizes)])
        return Dataset(ids, starts, self.treatment[row_idx],
                       self.outcome[row_idx], self.covariates[row_idx],
                       self.covariate_names, self.n_levels)

    # -- packed-by-size layout for the batched probability engine ---------

    def packed(self) -> "PackedBySize":
        if self._packed is None:
            self._packed = PackedBySize(self)
        return self._packed


class PackedBySize:
    """Clusters regrouped by size into padded rectangular tensors.

    For each distinct size ``n`` present in the dataset there is one group
    holding ``A`` (G, n), ``Y`` (G, n), ``X`` (G, n, p), sufficient counts,
    and the flat row positions so per-unit results can be scattered back to
    dataset order.
    """

    def __init__(self, data: Dataset):
        sizes = data.sizes()
        self.groups = []
        for n in np.unique(sizes):
            members = np.flatnonzero(sizes == n)
            rows = (data.starts[members][:, None] + np.arange(n)).ravel()
            shape = (members.size, int(n))
            self.groups.append({
                "n": int(n),
                "clusters": members,
                "rows": rows.reshape(shape),
                "A": data.treatment[rows].reshape(shape),
                "Y": data.outcome[rows].reshape(shape),
                "X": data.covariates[rows].reshape(shape + (-1,)),
            })

    def scatter_units(self, per_group_values, n_units, width=None):
        """Assemble per-unit group results into one flat dataset-order array."""
        shape = (n_units,) if width is None else (n_units, width)
        out = np.empty(shape)
        for g, vals in zip(self.groups, per_group_values):
            out[g["rows"].ravel()] = vals.reshape(-1) if width is None \
                else vals.reshape(-1, width)
        return out


def sufficient_stat(cluster: Cluster, n_levels: int) -> SufficientStat:
    """Within-cluster treatment counts conditioned on by the weighting model.

    Examples
    --------
    Binary: treatments (1, 0, 1) give ``t = 2``.  With three levels
    (``n_levels == 2``), treatments (0, 1, 2, 1) give counts ``(2, 1)``.
    """
    a = np.asarray(cluster.treatments)
    if n_levels == 1:
        counts = np.array([int(np.sum(a == 1))])
    else:
        counts = np.array([int(np.sum(a == k)) for k in range(1, n_levels + 1)])
    return SufficientStat(counts=counts, size=a.shape[0])


@dataclass(frozen=True)
class PositivityFilterResult:
    retained: Dataset
    dropped_cluster_ids: tuple[str, ...]
    dropped_unit_count: int


def filter_positivity(data: Dataset) -> PositivityFilterResult:
    """Drop clusters whose conditional treatment law is degenerate.

    A cluster is retained exactly when its treatment vector admits at least
    two distinct permutations with the same within-cluster counts, i.e. when
    it has two or more units and is not constant at a single level.
    Size-one clusters are always degenerate and always dropped.  The filter
    is idempotent.

    Note: with three or more treatment levels a retained subset can lose all
    occurrences of some level; downstream fits then raise estimability
    errors for the affected coefficient block.
    """
    keep = []
    dropped = []
    for i in range(data.m):
        s, e = data.starts[i], data.starts[i + 1]
        a = data.treatment[s:e]
        if a.shape[0] >= 2 and a.min() != a.max():
            keep.append(i)
        else:
            dropped.append(i)
    if not keep:
        raise EstimabilityError(
            "no cluster has within-cluster treatment variation; "
            "conditional weighting is not estimable")
    dropped_ids = tuple(data.cluster_ids[i] for i in dropped)
    dropped_units = int(np.sum(data.sizes()[dropped])) if dropped else 0
    return PositivityFilterResult(
        retained=data.take_clusters(keep),
        dropped_cluster_ids=dropped_ids,
        dropped_unit_count=dropped_units,
    )


@dataclass(frozen=True)
class DatasetSchema:
    """Column names binding a CSV file to dataset roles."""

    cluster_col: str = "cluster"
    treatment_col: str = "treatment"
    outcome_col: str = "outcome"
    covariate_cols: tuple[str, ...] = ()
    delimiter: str = ","


def _parse_int(text, what, line_no):
    try:
        value = float(text)
    except ValueError:
        raise ParseError("line %d: %s %r is not numeric" % (line_no, what, text))
    if value != int(value):
        raise ParseError("line %d: %s %r is not an integer code"
                         % (line_no, what, text))
    return int(value)


def _parse_float(text, what, line_no):
    try:
        return float(text)
    except ValueError:
        raise ParseError("line %d: %s %r is not numeric" % (line_no, what, text))


def load_csv(path, schema: DatasetSchema) -> Dataset:
    """Read a delimited file into a :class:`Dataset`.

    The file must have a header row naming every schema column.  Treatment
    codes are validated to cover ``{0, ..., K}`` for the inferred ``K``.
    """
    if not schema.covariate_cols:
        raise SchemaError("schema must name at least one covariate column")
    with open(path, newline="") as fh:
        reader = csv.reader(fh, delimiter=schema.delimiter)
        rows = [r for r in reader if r and any(cell.strip() for cell in r)]
    if not rows:
        raise EmptyDataError("%s: file is empty" % path)
    header = [h.strip() for h in rows[0]]
    needed = [schema.cluster_col, schema.treatment_col, schema.outcome_col,
              *schema.covariate_cols]
    missing = [c for c in needed if c not in header]
    if missing:
        raise SchemaError("%s: missing columns %s" % (path, missing))
    pos = {c: header.index(c) for c in needed}
    if len(rows) == 1:
        raise EmptyDataError("%s: no data rows" % path)
    labels, treatment, outcome = [], [], []
    covs = []
    for line_no, row in enumerate(rows[1:], start=2):
        if len(row) < len(header):
            raise ParseError("line %d: expected %d fields, found %d"
                             % (line_no, len(header), len(row)))
        labels.append(row[pos[schema.cluster_col]].strip())
        treatment.append(_parse_int(row[pos[schema.treatment_col]].strip(),
                                    "treatment", line_no))
        outcome.append(_parse_float(row[pos[schema.outcome_col]].strip(),
                                    "outcome", line_no))
        covs.append([_parse_float(row[pos[c]].strip(), c, line_no)
                     for c in schema.covariate_cols])
    return Dataset.from_arrays(labels, treatment, outcome,
                               np.array(covs, dtype=np.float64),
                               tuple(schema.covariate_cols))


def save_csv(data: Dataset, path, schema: DatasetSchema | None = None) -> None:
    """Write a dataset so that :func:`load_csv` round-trips it exactly.

    Floats are rendered with ``repr`` (shortest exact representation).
    """
    if schema is None:
        schema = DatasetSchema(covariate_cols=data.covariate_names)
    if len(schema.covariate_cols) != data.n_covariates:
        raise SchemaError("schema covariate count does not match dataset")
    ci = data.cluster_index()
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, delimiter=schema.delimiter)
        writer.writerow([schema.cluster_col, schema.treatment_col,
                         schema.outcome_col, *schema.covariate_cols])
        for row in range(data.n_units):
            writer.writerow([
                data.cluster_ids[ci[row]],
                int(data.treatment[row]),
                repr(float(data.outcome[row])),
                *(repr(float(v)) for v in data.covariates[row]),
            ])
