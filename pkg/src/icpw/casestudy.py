"""Bundled synthetic birth-weight study.

The package ships one small observational table relating maternal smoking
to infant birth weight, with mothers grouped into age clusters; it is the
dataset used by the documentation examples and the end-to-end tests.

The rows are synthetic. They are generated from a fixed seed so the
bundled file can be regenerated bit for bit, and the generator is
calibrated so the margins line up with the classic low-birth-weight
teaching dataset of Hosmer and Lemeshow (189 mothers, 74 smokers, race
split 96/26/67, smoker and non-smoker mean weights near 2772 g and
3055 g) and so the age grouping leaves 20 mixed-treatment clusters of
2 to 18 mothers (182 rows) once unanimous clusters are filtered out.
Unit-level values are simulated; do not use them for substantive
conclusions about smoking.
"""

from __future__ import annotations

import csv
import io
from importlib import resources
from pathlib import Path

import numpy as np
from scipy.special import expit, logit

CASE_SEED = 17

COLUMNS = ("age", "smoke", "bwt", "race", "ptl", "lwt_std")

# 20 clusters, sizes 2..18, totalling 182 retained rows
RETAINED_SIZES = (2, 3, 3, 4, 5, 6, 7, 8, 8, 8, 9, 10, 10, 11, 12, 13, 14,
                  15, 16, 18)
RETAINED_AGES = tuple(range(16, 36))
# unanimous (here: all non-smoking) clusters the positivity filter drops
DEGENERATE = ((14, 1), (37, 2), (41, 4))

_N_TOTAL = sum(RETAINED_SIZES) + sum(n for _, n in DEGENERATE)
_SMOKERS = 74

_RACE_POOL = ("white",) * 96 + ("black",) * 26 + ("other",) * 67
_PTL_POOL = (0,) * 159 + (1,) * 24 + (2,) * 5 + (3,)

_RACE_BWT = {"white": 0.0, "black": -220.0, "other": -120.0}


def _smoking_counts(sizes, u, rng) -> np.ndarray:
    """Per-cluster smoker counts: confounded by u, forced to total 74."""
    sizes = np.asarray(sizes)
    p = expit(logit(_SMOKERS / sum(RETAINED_SIZES)) + 0.55 * u)
    t = np.clip(np.rint(sizes * p).astype(int), 1, sizes - 1)
    order = rng.permutation(len(sizes))
    k = 0
    while t.sum() != _SMOKERS:
        i = order[k % len(order)]
        k += 1
        if t.sum() > _SMOKERS and t[i] > 1:
            t[i] -= 1
        elif t.sum() < _SMOKERS and t[i] < sizes[i] - 1:
            t[i] += 1
    return t


def generate_rows(seed: int = CASE_SEED) -> list[tuple]:
    """Deterministically rebuild the bundled table as a list of rows."""
    rng = np.random.default_rng(seed)
    clusters = [(age, n, True) for age, n in zip(RETAINED_AGES,
                                                 RETAINED_SIZES)]
    clusters += [(age, n, False) for age, n in DEGENERATE]
    clusters.sort()

    race = list(rng.permutation(np.array(_RACE_POOL)))
    ptl = list(rng.permutation(np.array(_PTL_POOL)))
    lwt = np.round(rng.normal(0.0, 1.0, _N_TOTAL), 3)
    u = rng.normal(0.0, 1.0, len(clusters))
    t_retained = _smoking_counts(
        [n for _, n, keep in clusters if keep],
        u[[i for i, (_, _, keep) in enumerate(clusters) if keep]], rng)

    rows = []
    pos = 0
    i_ret = 0
    for ci, (age, n, keep) in enumerate(clusters):
        smoke = np.zeros(n, dtype=int)
        r = race[pos:pos + n]
        q = np.array(ptl[pos:pos + n], dtype=float)
        w = lwt[pos:pos + n]
        if keep:
            pick = rng.choice(n, size=int(t_retained[i_ret]), replace=False,
                              p=_normalized(np.exp(0.2 * q - 0.1 * w)))
            smoke[pick] = 1
            i_ret += 1
        noise = rng.normal(0.0, 560.0, n)
        bwt = (3056.0 - 230.0 * smoke - 460.0 * u[ci]
               + np.array([_RACE_BWT[x] for x in r])
               - 90.0 * q + 70.0 * w + noise)
        for j in range(n):
            rows.append([age, int(smoke[j]), bwt[j], r[j], int(q[j]),
                         float(w[j])])
        pos += n

    # pin the two treatment-group means to the published margins
    bwts = np.array([row[2] for row in rows])
    smk = np.array([row[1] for row in rows], dtype=bool)
    bwts[smk] += 2771.9 - bwts[smk].mean()
    bwts[~smk] += 3054.96 - bwts[~smk].mean()
    bwts = np.clip(np.rint(bwts), 709, 4990).astype(int)
    return [(r[0], r[1], int(b), r[3], r[4], r[5])
            for r, b in zip(rows, bwts)]


def _normalized(w: np.ndarray) -> np.ndarray:
    return w / w.sum()


def rows_to_csv_text(rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(COLUMNS)
    for age, smoke, bwt, race, ptl, lwt in rows:
        writer.writerow([age, smoke, bwt, race, ptl, "%.3f" % lwt])
    return buf.getvalue()


def csv_path() -> Path:
    """Location of the bundled CSV inside the installed package."""
    return Path(str(resources.files("icpw") / "data" / "birthweight.csv"))


def regenerate(path: Path | None = None) -> Path:
    """Rewrite the bundled CSV from the frozen seed; returns the path."""
    target = Path(path) if path is not None else csv_path()
    target.parent.mkdir(parents=True, exist_ok=True)
    target.write_text(rows_to_csv_text(generate_rows()))
    return target
