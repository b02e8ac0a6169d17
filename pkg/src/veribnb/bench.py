"""Running property suites and summarising branching benchmarks."""
import csv
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace

import numpy as np

from .bab import BabConfig, verify_property
from .network import Network, PropertySpec, evaluate

log = logging.getLogger(__name__)

RESULT_FIELDS = ("property_id", "status", "wall_time_s", "n_subproblems", "final_lb", "final_ub")
TRACE_FIELDS = ("property_id", "t", "global_lb")
SUMMARY_FIELDS = ("brancher", "n_properties", "n_solved", "timeout_pct", "mean_time_s",
                  "mean_subproblems", "n_in_subproblem_mean")
CACTUS_FIELDS = ("brancher", "t", "n_solved")
SOLVED = ("verified", "falsified")


def misclassified(net: Network, prop: PropertySpec):
    if prop.c is not None:
        return False
    return int(np.argmax(evaluate(net, prop.center))) != int(prop.true_label)


def _run_one(args):
    pid, net, prop, cfg = args
    if misclassified(net, prop):
        row = {"property_id": pid, "status": "skipped", "wall_time_s": 0.0, "n_subproblems": 0,
               "final_lb": float("nan"), "final_ub": float("nan")}
        return row, []
    res = verify_property(net, prop, cfg)
    log.info("%s: %s in %.3fs, %d subproblems", pid, res.status, res.wall_time, res.n_subproblems)
    row = {"property_id": pid, "status": res.status, "wall_time_s": res.wall_time,
           "n_subproblems": res.n_subproblems, "final_lb": res.final_lb, "final_ub": res.final_ub}
    return row, [(pid, t, lb) for t, lb in res.trace]


def run_suite(net: Network, props, cfg: BabConfig = BabConfig(), workers=1):
    """Verify ``[(property_id, PropertySpec)]`` in order; returns ``(rows, trace)``.

    With ``workers > 1`` properties run in separate processes; output order
    still follows the input order.
    """
    jobs = [(pid, net, prop, cfg) for pid, prop in props]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            out = list(pool.map(_run_one, jobs))
    else:
        out = [_run_one(j) for j in jobs]
    rows = [r for r, _ in out]
    trace = [t for _, ts in out for t in ts]
    return rows, trace


def run_benchmark(net: Network, props, branchers, cfg: BabConfig = BabConfig(), workers=1):
    """``{brancher: rows}``; every brancher sees the same seed and properties."""
    if len(branchers) < 2:
        raise ValueError("a branching benchmark needs at least two branchers")
    return {b: run_suite(net, props, replace(cfg, brancher=b), workers)[0] for b in branchers}


def summarize(results):
    """Per-brancher summary rows.

    Mean subproblems only count properties that no brancher timed out on and
    that were not skipped; mean time covers every non-skipped property.
    """
    ids = [r["property_id"] for r in next(iter(results.values()))]
    timed_out = {r["property_id"] for rows in results.values() for r in rows if r["status"] == "timeout"}
    skipped = {r["property_id"] for rows in results.values() for r in rows if r["status"] == "skipped"}
    common = [i for i in ids if i not in timed_out and i not in skipped]
    out = []
    for brancher, rows in results.items():
        by_id = {r["property_id"]: r for r in rows}
        live = [r for r in rows if r["status"] != "skipped"]
        subs = [by_id[i]["n_subproblems"] for i in common]
        out.append({
            "brancher": brancher,
            "n_properties": len(live),
            "n_solved": sum(r["status"] in SOLVED for r in live),
            "timeout_pct": 100.0 * sum(r["status"] == "timeout" for r in live) / len(live) if live else 0.0,
            "mean_time_s": float(np.mean([r["wall_time_s"] for r in live])) if live else float("nan"),
            "mean_subproblems": float(np.mean(subs)) if subs else float("nan"),
            "n_in_subproblem_mean": len(subs),
        })
    return out


def cactus(results):
    """Cumulative solved count against wall time, one block of rows per brancher."""
    out = []
    for brancher, rows in results.items():
        times = sorted(r["wall_time_s"] for r in rows if r["status"] in SOLVED)
        out += [{"brancher": brancher, "t": t, "n_solved": k} for k, t in enumerate(times, start=1)]
    return out


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_csv(path, fields, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(fields)
        for row in rows:
            if isinstance(row, dict):
                row = [row[f] for f in fields]
            w.writerow([_fmt(v) for v in row])


def read_csv(path):
    """Rows as dicts; raises ValueError on a ragged row."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = []
        for i, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise ValueError(f"{path}: line {i} has {len(row)} fields, header has {len(header)}")
            rows.append(dict(zip(header, row)))
    return header, rows
