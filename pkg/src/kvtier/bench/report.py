"""CSV output for experiment reports, comparisons and sweeps.

Every numeric field is written as a fixed-precision decimal so that two runs
with the same seed and config produce byte-identical files.
"""

import csv
import dataclasses
import os

from .config import ConfigError, format_config
from .experiment import StepRecord, run_experiment

__all__ = [
    "RECALL_NOTE",
    "format_value",
    "write_csv",
    "write_report",
    "compare_strategies",
    "write_comparison",
    "sweep",
]

# recall is a retrieval proxy; it says nothing about end-task accuracy
RECALL_NOTE = "# recall = share of exact top-m attention entries covered; not task accuracy"

FLOAT_DIGITS = 9


def format_value(v):
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, int):
        return str(v)
    if isinstance(v, float):
        return f"{v:.{FLOAT_DIGITS}f}"
    return str(v)


def write_csv(path, header, rows, note=None):
    with open(path, "w", newline="") as fh:
        if note:
            fh.write(note + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([format_value(v) for v in row])


def write_report(report, out_dir, layout=False, io_trace=False):
    """Write report.csv, summary.csv, access_hist.csv (and optional extras) to ``out_dir``."""
    os.makedirs(out_dir, exist_ok=True)
    names = [f.name for f in dataclasses.fields(StepRecord)]
    write_csv(os.path.join(out_dir, "report.csv"), names,
              ([getattr(r, n) for n in names] for r in report.rows), RECALL_NOTE)
    write_csv(os.path.join(out_dir, "summary.csv"), ["metric", "value"],
              report.summary.items(), RECALL_NOTE)
    write_csv(os.path.join(out_dir, "access_hist.csv"), ["entries", "commands"],
              report.access_hist.items())
    with open(os.path.join(out_dir, "config.txt"), "w") as fh:
        fh.write(format_config(report.config))
    written = ["report.csv", "summary.csv", "access_hist.csv", "config.txt"]
    if layout and report.layout_dump:
        with open(os.path.join(out_dir, "layout.txt"), "w") as fh:
            fh.write(report.layout_dump)
        written.append("layout.txt")
    if io_trace:
        with open(os.path.join(out_dir, "io_trace.txt"), "w") as fh:
            fh.write("op offset length time\n")
            for op, off, n, t in report.io_trace:
                fh.write(f"{op} {off} {n} {t:.9f}\n")
        written.append("io_trace.txt")
    return written


def _ratio(a, b):
    if not isinstance(a, (int, float)) or isinstance(a, bool):
        return ""
    if b == a:
        return 1.0
    if not b:
        return ""
    return float(a) / float(b)


def compare_strategies(configs, names=None):
    """Run each config and tabulate every summary metric with ratios against the first.

    Returns ``(header, rows, reports)``.
    """
    configs = list(configs)
    if len(configs) < 2:
        raise ConfigError("compare needs at least two configs")
    seeds = {c.workload.seed for c in configs}
    if len(seeds) != 1:
        raise ConfigError(f"configs use different workload seeds: {sorted(seeds)}")
    names = list(names) if names else [f"run{i}" for i in range(len(configs))]
    reports = [run_experiment(c) for c in configs]
    base = reports[0].summary
    header = ["metric"] + names + [f"{n}/{names[0]}" for n in names[1:]]
    rows = []
    for key, v0 in base.items():
        vals = [r.summary[key] for r in reports]
        ratios = [_ratio(v, v0) for v in vals[1:]]
        rows.append([key] + vals + ratios)
    return header, rows, reports


def write_comparison(header, rows, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "summary.csv")
    write_csv(path, header, rows, RECALL_NOTE)
    return path


def sweep(cfg, param, values):
    """One run per value of the flat config key ``param``; returns ``(header, rows)``."""
    values = list(values)
    if not values:
        raise ConfigError("sweep needs at least one value")
    header = None
    rows = []
    for v in values:
        rep = run_experiment(cfg.replace(**{param: v}))
        if header is None:
            header = [param] + list(rep.summary)
        rows.append([v] + list(rep.summary.values()))
    return header, rows
