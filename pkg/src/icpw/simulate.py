"""Monte Carlo generators and the replication harness.

Two study designs share one generating process: clusters of size
floor(Unif(size_low, size_high)), unit covariates X1 ~ N(0,1) and X2
uniform on {-1, 0, 1}, a latent cluster confounder
U_i ~ N(-rho_XU (X1bar + X2bar), 1), treatment assigned with probability
expit(X1 + X2 + U), and potential outcomes Y(0) = X1 + X2 + e0,
Y(1) = X1 + X2 + tau + rho_YU U + e1 with standard normal noise.  All
draws for a replicate come from ``default_rng([seed, rep])``, so changing
the replicate count never perturbs earlier replicates and parallel
scheduling cannot change any result.

Covariates are redrawn on every replicate (nothing in the design holds
them fixed across repetitions).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict

import numpy as np
from scipy.special import expit

from .data_model import Dataset
from .errors import DomainError, IcpwError, UsageError
from .inference import PIPELINE_METHODS, make_pipeline

SCENARIOS = {1: (0.0, 0.0), 2: (5.0, 0.0), 3: (0.0, 5.0), 4: (5.0, 5.0)}
STUDIES = {1: (500, 2, 6), 2: (20, 2, 21)}
METHOD_TAGS = ("simu",) + PIPELINE_METHODS


@dataclass(frozen=True)
class ScenarioConfig:
    m: int
    size_low: int
    size_high: int
    rho_xu: float
    rho_yu: float
    tau: float = 2.0
    seed: int = 0
    reps: int = 1000

    def __post_init__(self):
        if self.m < 1:
            raise DomainError("need at least one cluster")
        if not 2 <= self.size_low <= self.size_high:
            raise DomainError("cluster-size bounds must satisfy "
                              "2 <= low <= high")
        if self.reps < 1:
            raise DomainError("need at least one replication")

    @classmethod
    def from_scenario(cls, scenario: int, study: int = 1, tau: float = 2.0,
                      seed: int = 0, reps: int = 1000) -> "ScenarioConfig":
        """The four (rho_XU, rho_YU) settings crossed with two designs."""
        if scenario not in SCENARIOS:
            raise UsageError("scenario must be one of %s"
                             % sorted(SCENARIOS))
        if study not in STUDIES:
            raise UsageError("study must be one of %s" % sorted(STUDIES))
        rho_xu, rho_yu = SCENARIOS[scenario]
        m, lo, hi = STUDIES[study]
        return cls(m=m, size_low=lo, size_high=hi, rho_xu=rho_xu,
                   rho_yu=rho_yu, tau=tau, seed=seed, reps=reps)


@dataclass(frozen=True)
class GeneratedCluster:
    """One cluster with its latent internals, for diagnostics only.

    Estimators must never see ``u``, ``y0`` or ``y1``; the observable part
    lives in the Dataset returned alongside.
    """

    x1: np.ndarray
    x2: np.ndarray
    u: float
    treatments: np.ndarray
    y0: np.ndarray
    y1: np.ndarray
    outcomes: np.ndarray


def generate_dataset(config: ScenarioConfig, rep: int):
    """One replicate: (Dataset, list of GeneratedCluster).

    Clusters violating positivity are retained here; filtering is the
    estimator's job.
    """
    rng = np.random.default_rng([config.seed, rep])
    m = config.m
    sizes = np.floor(rng.uniform(config.size_low, config.size_high,
                                 size=m)).astype(np.int64)
    n = int(sizes.sum())
    starts = np.zeros(m + 1, dtype=np.int64)
    np.cumsum(sizes, out=starts[1:])
    ci = np.repeat(np.arange(m), sizes)

    x1 = rng.normal(size=n)
    x2 = rng.integers(-1, 2, size=n).astype(np.float64)
    xbar = (np.add.reduceat(x1, starts[:-1])
            + np.add.reduceat(x2, starts[:-1])) / sizes
    u = rng.normal(-config.rho_xu * xbar, 1.0)
    a = (rng.uniform(size=n) < expit(x1 + x2 + u[ci])).astype(np.int64)
    y0 = x1 + x2 + rng.normal(size=n)
    y1 = x1 + x2 + config.tau + config.rho_yu * u[ci] + rng.normal(size=n)
    y = np.where(a == 1, y1, y0)

    data = Dataset(cluster_ids=["s%05d" % i for i in range(m)],
                   starts=starts, treatment=a, outcome=y,
                   covariates=np.column_stack([x1, x2]),
                   covariate_names=("x1", "x2"), n_levels=1)
    internals = [GeneratedCluster(x1=x1[s:e], x2=x2[s:e], u=float(u[i]),
                                  treatments=a[s:e], y0=y0[s:e], y1=y1[s:e],
                                  outcomes=y[s:e])
                 for i, (s, e) in enumerate(zip(starts[:-1], starts[1:]))]
    return data, internals


def tau_simu(internals) -> float:
    """Mean unit-level causal effect Y(1)-Y(0) on the unfiltered sample."""
    num = sum(float(np.sum(c.y1 - c.y0)) for c in internals)
    den = sum(c.y1.shape[0] for c in internals)
    return num / den


@dataclass(frozen=True)
class MethodSummary:
    method: str
    mean: float
    bias: float
    sd: float
    reps_used: int
    failures: int


@dataclass(frozen=True)
class SimulationReport:
    config: ScenarioConfig
    methods: tuple = ()

    def to_json(self) -> str:
        payload = {"config": asdict(self.config),
                   "methods": [asdict(ms) for ms in self.methods]}
        return json.dumps(payload, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "SimulationReport":
        payload = json.loads(text)
        return cls(config=ScenarioConfig(**payload["config"]),
                   methods=tuple(MethodSummary(**ms)
                                 for ms in payload["methods"]))


def run_replications(config: ScenarioConfig, methods,
                     threads: int = 1) -> SimulationReport:
    """Generate, filter, fit and estimate per replicate; aggregate.

    A method failing on a replicate (separation, non-convergence, ...) is
    excluded for that method only and counted under ``failures``.
    Replicate values are sorted before aggregation, so the summary is
    bitwise independent of completion order.
    """
    methods = list(methods)
    unknown = [t for t in methods if t not in METHOD_TAGS]
    if unknown:
        raise UsageError("unknown method tags %s; expected a subset of %s"
                         % (unknown, ", ".join(METHOD_TAGS)))
    pipelines = {t: make_pipeline(t) for t in methods if t != "simu"}

    def one(rep: int):
        data, internals = generate_dataset(config, rep)
        out = {}
        for tag in methods:
            if tag == "simu":
                out[tag] = tau_simu(internals)
                continue
            try:
                out[tag] = pipelines[tag](data).point
            except IcpwError:
                out[tag] = None
        return out

    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(one, range(config.reps)))
    else:
        results = [one(rep) for rep in range(config.reps)]

    summaries = []
    for tag in methods:
        vals = np.sort(np.array([r[tag] for r in results
                                 if r[tag] is not None], dtype=np.float64))
        failures = config.reps - vals.size
        mean = float(np.mean(vals)) if vals.size else float("nan")
        sd = float(np.std(vals, ddof=1)) if vals.size > 1 else float("nan")
        summaries.append(MethodSummary(method=tag, mean=mean,
                                       bias=mean - config.tau, sd=sd,
                                       reps_used=int(vals.size),
                                       failures=int(failures)))
    return SimulationReport(config=config, methods=tuple(summaries))


REPORT_COLUMNS = ("method", "mean", "bias", "sd", "reps_used", "failures")


def render_report(report: SimulationReport, format: str = "table") -> str:
    """Aligned text, CSV, or JSON rendering of a simulation report."""
    if format == "json":
        return report.to_json()
    if format == "csv":
        lines = [",".join(REPORT_COLUMNS)]
        for ms in report.methods:
            lines.append("%s,%s,%s,%s,%d,%d"
                         % (ms.method, repr(ms.mean), repr(ms.bias),
                            repr(ms.sd), ms.reps_used, ms.failures))
        return "\n".join(lines) + "\n"
    if format == "table":
        c = report.config
        head = ("m=%d sizes=[%d,%d) rho_XU=%g rho_YU=%g tau=%g reps=%d "
                "seed=%d" % (c.m, c.size_low, c.size_high, c.rho_xu,
                             c.rho_yu, c.tau, c.reps, c.seed))
        rows = [head, "%-12s %10s %10s %10s %6s %9s"
                % ("method", "mean", "bias", "sd", "reps", "failures")]
        for ms in report.methods:
            rows.append("%-12s %10.3f %10.3f %10.3f %6d %9d"
                        % (ms.method, ms.mean, ms.bias, ms.sd,
                           ms.reps_used, ms.failures))
        return "\n".join(rows) + "\n"
    raise UsageError("unknown report format %r" % format)
