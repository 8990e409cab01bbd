"""Command line front end: ``estimate``, ``simulate``, ``selftest``.

Reports are deterministic: the rendered body depends only on the input
data, the flags, and ``--seed``, never on ``--threads``, wall time, or
the host.  Run metadata that cannot be deterministic (timestamps, the
exact command line) goes to a separate manifest: a JSON line on stderr,
or the sibling file ``<out>.manifest.json`` when ``--out`` is given.

Categorical covariates are handled here, not in the library: any
``--covariates`` column containing a non-numeric cell is dummy coded.
Its distinct values are sorted, the first is the reference level, and
each remaining value becomes an indicator column named ``column=value``.

Exit codes: 0 success, 1 computation error, 2 usage error.  Failures
print ``error[<code>]: <message>`` on stderr with a stable code per
error family; warnings print as ``warning: <message>`` lines.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
from datetime import datetime, timezone
from importlib.metadata import PackageNotFoundError, version as _dist_version

import numpy as np
from scipy.stats import norm

from .cmle import fit_cmle
from .data_model import Dataset, _parse_float, _parse_int, filter_positivity
from .errors import EmptyDataError, IcpwError, ParseError, SchemaError, UsageError
from .estimators import CSV_HEADER, EffectEstimate
from .inference import (PIPELINE_METHODS, cluster_bootstrap, icpw_tau_with_se,
                        make_pipeline)
from .oracles import SUITES, run_suites
from .simulate import METHOD_TAGS, ScenarioConfig, render_report, run_replications


def _library_version() -> str:
    try:
        return _dist_version("icpw")
    except PackageNotFoundError:
        return "unknown"


def _utc_now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _csv_list(text: str) -> list[str]:
    items = [piece.strip() for piece in text.split(",")]
    return [piece for piece in items if piece]


def _is_number(text: str) -> bool:
    try:
        float(text)
    except ValueError:
        return False
    return True


def load_table(path, cluster_col, treatment_col, outcome_col,
               covariate_cols) -> Dataset:
    """Read a CSV file into a dataset, dummy coding string covariates."""
    if not covariate_cols:
        raise UsageError("--covariates must name at least one column")
    try:
        with open(path, newline="") as fh:
            rows = [r for r in csv.reader(fh)
                    if r and any(cell.strip() for cell in r)]
    except OSError as exc:
        raise UsageError("cannot read %s: %s" % (path, exc.strerror))
    if not rows:
        raise EmptyDataError("%s: file is empty" % path)
    header = [h.strip() for h in rows[0]]
    needed = [cluster_col, treatment_col, outcome_col, *covariate_cols]
    missing = [c for c in needed if c not in header]
    if missing:
        raise SchemaError("%s: missing columns %s" % (path, missing))
    if len(rows) == 1:
        raise EmptyDataError("%s: no data rows" % path)
    body = rows[1:]
    for line_no, row in enumerate(body, start=2):
        if len(row) < len(header):
            raise ParseError("line %d: expected %d fields, found %d"
                             % (line_no, len(header), len(row)))
    pos = {c: header.index(c) for c in needed}

    def column(name):
        return [row[pos[name]].strip() for row in body]

    labels = column(cluster_col)
    treatment = [_parse_int(v, "treatment", i)
                 for i, v in enumerate(column(treatment_col), start=2)]
    outcome = [_parse_float(v, "outcome", i)
               for i, v in enumerate(column(outcome_col), start=2)]
    design, names = [], []
    for col in covariate_cols:
        cells = column(col)
        if all(_is_number(v) for v in cells):
            design.append([float(v) for v in cells])
            names.append(col)
            continue
        levels = sorted(set(cells))
        for level in levels[1:]:
            design.append([1.0 if v == level else 0.0 for v in cells])
            names.append("%s=%s" % (col, level))
    if not design:
        raise SchemaError("every covariate column is constant after coding; "
                          "nothing to adjust for")
    x = np.array(design, dtype=np.float64).T
    return Dataset.from_arrays(labels, treatment, outcome, x, tuple(names))


def _sha256(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            digest.update(block)
    return digest.hexdigest()


# ---------------------------------------------------------------------------
# rendering and emission


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return "%.6g" % value
    return str(value)


def render_estimate(est: EffectEstimate, format: str) -> str:
    """One report object, three renderings; JSON is the canonical one."""
    d = est.to_json_dict()
    if format == "json":
        return json.dumps(d, indent=2, sort_keys=True) + "\n"
    if format == "csv":
        return ",".join(CSV_HEADER) + "\n" + ",".join(est.to_csv_row()) + "\n"
    if format == "table":
        lines = ["%-16s %s" % (key, _fmt(d[key])) for key in CSV_HEADER]
        lines += ["%-16s %s" % ("warning", w) for w in d["warnings"]]
        return "\n".join(lines) + "\n"
    raise UsageError("unknown report format %r" % format)


def _manifest(args, input_digest) -> dict:
    config = {k: v for k, v in vars(args).items()
              if k not in ("func", "argv", "started")}
    return {
        "command": ["icpw", *args.argv],
        "config": config,
        "seed": getattr(args, "seed", None),
        "version": _library_version(),
        "input_sha256": input_digest,
        "started_utc": args.started,
        "finished_utc": _utc_now(),
    }


def _emit(text, warnings, args, input_digest=None) -> None:
    """Report to stdout or --out; manifest and warnings to the side."""
    manifest = _manifest(args, input_digest)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
        with open(args.out + ".manifest.json", "w") as fh:
            fh.write(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    else:
        sys.stdout.write(text)
        sys.stderr.write(json.dumps(manifest, sort_keys=True) + "\n")
    for w in warnings:
        sys.stderr.write("warning: %s\n" % w)


# ---------------------------------------------------------------------------
# subcommands


def cmd_estimate(args) -> int:
    data = load_table(args.input, args.cluster_col, args.treatment_col,
                      args.outcome_col, _csv_list(args.covariates))
    if args.bootstrap:
        est = cluster_bootstrap(data, args.method, args.bootstrap, args.seed,
                                level=args.level, threads=args.threads)
    elif args.method == "icpw":
        res = filter_positivity(data)
        fit = fit_cmle(res.retained)
        est = icpw_tau_with_se(res.retained, fit,
                               clusters_dropped=len(res.dropped_cluster_ids))
        z = float(norm.ppf(0.5 + args.level / 2.0))
        est = est.with_uncertainty(ci=(est.point - z * est.se,
                                       est.point + z * est.se))
    else:
        est = make_pipeline(args.method)(data)
        est = est.with_uncertainty(extra_warnings=(
            "method %r reports no uncertainty without --bootstrap"
            % args.method,))
    if est.clusters_dropped:
        est = est.with_uncertainty(extra_warnings=(
            "%d cluster(s) with unanimous treatment dropped"
            % est.clusters_dropped,))
    _emit(render_estimate(est, args.format), est.warnings, args,
          input_digest=_sha256(args.input))
    return 0


def cmd_simulate(args) -> int:
    config = ScenarioConfig.from_scenario(args.scenario, study=args.study,
                                          tau=args.tau, seed=args.seed,
                                          reps=args.reps)
    report = run_replications(config, _csv_list(args.methods),
                              threads=args.threads)
    _emit(render_report(report, args.format), (), args)
    return 0


def cmd_selftest(args) -> int:
    results = run_suites(_csv_list(args.suite), seed=args.seed)
    text = "".join("%s %s: %s\n" % ("PASS" if r.ok else "FAIL",
                                    r.name, r.detail)
                   for r in results)
    _emit(text, (), args)
    return 0 if all(r.ok for r in results) else 1


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="icpw",
        description="Treatment effect estimation for clustered data with "
                    "unmeasured cluster-level confounding.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=0,
                       help="root seed; all randomness flows from it")
        p.add_argument("--threads", type=int, default=os.cpu_count() or 1,
                       help="worker threads (results do not depend on this)")
        p.add_argument("--out", default=None, metavar="FILE",
                       help="write the report here instead of stdout; the "
                            "manifest goes to FILE.manifest.json")
        p.add_argument("--format", choices=("json", "csv", "table"),
                       default="table", help="report rendering")

    est = sub.add_parser(
        "estimate", help="estimate a treatment effect from a CSV file")
    est.add_argument("--input", required=True, help="CSV file to read")
    est.add_argument("--cluster-col", required=True)
    est.add_argument("--treatment-col", required=True)
    est.add_argument("--outcome-col", required=True)
    est.add_argument("--covariates", required=True, metavar="A,B,C",
                     help="covariate columns; non-numeric ones are dummy "
                          "coded against their first sorted level")
    est.add_argument("--method", choices=PIPELINE_METHODS, default="icpw")
    est.add_argument("--bootstrap", type=int, default=0, metavar="B",
                     help="cluster bootstrap replicates (default: sandwich "
                          "standard error for icpw, none otherwise)")
    est.add_argument("--level", type=float, default=0.95,
                     help="confidence level for intervals")
    common(est)
    est.set_defaults(func=cmd_estimate)

    sim = sub.add_parser(
        "simulate", help="run a replication study on synthetic data")
    sim.add_argument("--scenario", type=int, required=True,
                     help="confounding scenario 1-4")
    sim.add_argument("--study", type=int, default=1,
                     help="1: many small clusters; 2: few large ones")
    sim.add_argument("--reps", type=int, default=1000)
    sim.add_argument("--tau", type=float, default=2.0,
                     help="true common treatment effect")
    sim.add_argument("--methods", default=",".join(METHOD_TAGS),
                     metavar="A,B,C",
                     help="method tags to compare (default: all)")
    common(sim)
    sim.set_defaults(func=cmd_simulate)

    st = sub.add_parser(
        "selftest", help="run internal consistency suites")
    st.add_argument("--suite", default="all",
                    help="comma separated subset of: %s" % ", ".join(SUITES))
    common(st)
    st.set_defaults(func=cmd_selftest)
    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    args.argv = argv
    args.started = _utc_now()
    try:
        return args.func(args)
    except UsageError as exc:
        sys.stderr.write("error[%s]: %s\n" % (exc.code, exc))
        return 2
    except IcpwError as exc:
        sys.stderr.write("error[%s]: %s\n" % (exc.code, exc))
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
