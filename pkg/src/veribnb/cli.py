"""Command-line entry point: ``veribnb {train,verify,attack,bound,bench-branching}``.

A JSON config file (``--config``) may hold the sections ``train`` (training
options), ``data`` (dataset source), ``verify`` (verifier options plus
``workers``) and ``branchers`` (list of names). Flags override file values,
which override defaults.

Exit codes: 0 success, 1 internal error, 2 user or configuration error.
"""
import argparse
import json
import logging
import os
import sys
import time
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import asset_path, dual
from .attacks import check_counterexample, mifgsm_attack
from .bab import BRANCHERS, BabConfig
from .bench import (CACTUS_FIELDS, RESULT_FIELDS, SUMMARY_FIELDS, TRACE_FIELDS, cactus, misclassified,
                    run_benchmark, run_suite, summarize, write_csv)
from .data import DatasetError, ingest
from .intervals import ibp_forward, make_input_box
from .network import NetworkFormatError, canonicalize, evaluate, load_network, load_properties
from .train import METRIC_FIELDS, TrainConfig, desk_config, save_checkpoint, train

log = logging.getLogger("veribnb")

CONFIG_SECTIONS = ("train", "data", "verify", "branchers")
_BAB_SCALARS = {f.name for f in fields(BabConfig)} - {"attack_grid"}


class ConfigError(ValueError):
    pass


def _setup_logging():
    level = os.environ.get("VERIBNB_LOG", "error").lower()
    if level not in ("error", "info", "debug"):
        raise ConfigError(f"VERIBNB_LOG must be error, info or debug, got {level!r}")
    logging.basicConfig(level=getattr(logging, level.upper()), stream=sys.stderr,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")


def _key_line(text, key):
    for i, line in enumerate(text.splitlines(), start=1):
        if f'"{key}"' in line:
            return i
    return None


def _where(path, text, key):
    line = _key_line(text, key)
    return f"{path}:{line}" if line else str(path)


def load_config(path):
    """Parse and validate a JSON config file; errors carry the file line."""
    if path is None:
        return {}
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    text = path.read_text(encoding="utf-8")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}: invalid JSON ({exc.msg})") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}:1: top level must be an object")
    for key in doc:
        if key not in CONFIG_SECTIONS:
            raise ConfigError(f"{_where(path, text, key)}: unknown section {key!r}")
    if "train" in doc:
        try:
            TrainConfig.from_dict(doc["train"], base=desk_config())
        except (TypeError, ValueError) as exc:
            bad = next((k for k in doc["train"] if k not in TrainConfig.__dataclass_fields__), "train")
            raise ConfigError(f"{_where(path, text, bad)}: {exc}") from None
    for key in doc.get("verify", {}):
        if key not in _BAB_SCALARS | {"workers"}:
            raise ConfigError(f"{_where(path, text, key)}: unknown verifier option {key!r}")
    for name in doc.get("branchers", []):
        if name not in BRANCHERS:
            raise ConfigError(f"{_where(path, text, name)}: unknown brancher {name!r}")
    return doc


def _existing(path, what):
    if path is None:
        raise ConfigError(f"missing {what} path")
    if not Path(path).exists():
        raise ConfigError(f"{what} not found: {path}")
    return Path(path)


def _bab_config(args, doc):
    opts = {k: v for k, v in doc.get("verify", {}).items() if k != "workers"}
    if args.timeout_s is not None:
        opts["timeout_s"] = args.timeout_s
    if args.brancher is not None:
        opts["brancher"] = args.brancher
    if args.seed is not None:
        opts["seed"] = args.seed
    try:
        return BabConfig(**opts)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"verifier options: {exc}") from None


def _workers(args, doc):
    n = args.workers if args.workers is not None else doc.get("verify", {}).get("workers", 1)
    if int(n) < 1:
        raise ConfigError("--workers must be >= 1")
    return int(n)


def _out_dir(args):
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _net_and_props(args, default_assets=False):
    if default_assets and args.net is None and args.props is None:
        return load_network(asset_path("desk_model.json")), load_properties(asset_path("desk_props.json"))
    net = load_network(_existing(args.net, "network"))
    props = load_properties(_existing(args.props, "properties"))
    return net, props


# -- commands --------------------------------------------------------------------------

def cmd_train(args, doc):
    opts = dict(doc.get("train", {}))
    if args.seed is not None:
        opts["seed"] = args.seed
    try:
        cfg = TrainConfig.from_dict(opts, base=desk_config())
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"training options: {exc}") from None
    if args.data is not None:
        data = ingest(_existing(args.data, "dataset"))
    elif "data" in doc:
        source = doc["data"]
        if isinstance(source, str):
            source = _existing(source, "dataset")
        data = ingest(source)
    else:
        raise ConfigError("missing dataset path (use --data or a 'data' config section)")
    out = _out_dir(args)
    result = train(cfg, data)
    save_checkpoint(out / "checkpoint.json", result)
    write_csv(out / "metrics.csv", METRIC_FIELDS, result.metrics)
    print(f"trained {len(result.metrics)} steps in {result.wall_time:.1f}s -> {out / 'checkpoint.json'}")
    return 0


def cmd_verify(args, doc):
    net, props = _net_and_props(args)
    cfg = _bab_config(args, doc)
    out = _out_dir(args)
    rows, trace = run_suite(net, props, cfg, _workers(args, doc))
    write_csv(out / "results.csv", RESULT_FIELDS, rows)
    write_csv(out / "trace.csv", TRACE_FIELDS, trace)
    counts = {}
    for r in rows:
        counts[r["status"]] = counts.get(r["status"], 0) + 1
    print(" ".join(f"{k}={v}" for k, v in sorted(counts.items())))
    return 0


def cmd_attack(args, doc):
    net, props = _net_and_props(args)
    cfg = _bab_config(args, doc)
    out = _out_dir(args)
    rows = []
    for pid, prop in props:
        t0 = time.perf_counter()
        if misclassified(net, prop):
            rows.append({"property_id": pid, "status": "skipped", "min_output": float("nan"), "wall_time_s": 0.0})
            continue
        box = make_input_box(prop)
        best = np.inf
        for cnet in _margin_nets(net, prop):
            x = mifgsm_attack(cnet, box, cfg.attack_grid, seed=cfg.seed, rounds=cfg.attack_rounds)
            best = min(best, float(evaluate(cnet, x)[0]))
            if check_counterexample(cnet, x, box):
                break
        rows.append({"property_id": pid, "status": "falsified" if best <= 0 else "survived",
                     "min_output": best, "wall_time_s": time.perf_counter() - t0})
    write_csv(out / "attack.csv", ("property_id", "status", "min_output", "wall_time_s"), rows)
    print(f"falsified {sum(r['status'] == 'falsified' for r in rows)} of {len(rows)}")
    return 0


def cmd_bound(args, doc):
    net, props = _net_and_props(args)
    cfg = _bab_config(args, doc)
    out = _out_dir(args)
    rows = []
    for pid, prop in props:
        box = make_input_box(prop)
        ibp_lb = crown_lb = np.inf
        n_amb = 0
        for cnet in _margin_nets(net, prop):
            ibp = ibp_forward(cnet, box)
            ibp_lb = min(ibp_lb, float(ibp.pre_lb[-1][0]))
            bounds = dual.intermediate_bounds_alpha_crown(cnet, box, cfg.ib_iters, cfg.ib_lr, cfg.ib_decay)
            n_amb = max(n_amb, bounds.n_ambiguous())
            state = dual.optimize_dual(cnet, bounds, box, iters=cfg.root_iters, lr=cfg.dual_lr, decay=cfg.dual_decay)
            crown_lb = min(crown_lb, max(state.value, float(bounds.pre_lb[-1][0])))
        rows.append({"property_id": pid, "ibp_lb": ibp_lb, "crown_lb": crown_lb, "n_ambiguous": n_amb})
    write_csv(out / "bounds.csv", ("property_id", "ibp_lb", "crown_lb", "n_ambiguous"), rows)
    print(f"bounded {len(rows)} properties")
    return 0


def cmd_bench_branching(args, doc):
    net, props = _net_and_props(args, default_assets=True)
    cfg = _bab_config(args, doc)
    if args.branchers is not None:
        branchers = [b.strip() for b in args.branchers.split(",") if b.strip()]
    else:
        branchers = list(doc.get("branchers", BRANCHERS))
    unknown = [b for b in branchers if b not in BRANCHERS]
    if unknown:
        raise ConfigError(f"unknown brancher(s): {', '.join(unknown)}")
    if len(branchers) < 2:
        raise ConfigError("bench-branching needs at least two branchers")
    out = _out_dir(args)
    results = run_benchmark(net, props, branchers, cfg, _workers(args, doc))
    for b, rows in results.items():
        write_csv(out / f"results_{b}.csv", RESULT_FIELDS, rows)
    summary = summarize(results)
    write_csv(out / "summary.csv", SUMMARY_FIELDS, summary)
    write_csv(out / "cactus.csv", CACTUS_FIELDS, cactus(results))
    for row in summary:
        print(f"{row['brancher']:>9}: solved {row['n_solved']}/{row['n_properties']}, "
              f"timeouts {row['timeout_pct']:.1f}%, mean time {row['mean_time_s']:.3f}s, "
              f"mean subproblems {row['mean_subproblems']:.1f} (over {row['n_in_subproblem_mean']})")
    return 0


def _margin_nets(net, prop):
    if prop.c is not None:
        return [canonicalize(net, prop)]
    return [canonicalize(net, prop, target_label=t) for t in prop.targets(net.output_dim)]


COMMANDS = {"train": cmd_train, "verify": cmd_verify, "attack": cmd_attack, "bound": cmd_bound,
            "bench-branching": cmd_bench_branching}


def build_parser():
    parser = argparse.ArgumentParser(prog="veribnb", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--net", help="network JSON")
        p.add_argument("--props", help="property JSON file or directory")
        p.add_argument("--data", help="dataset CSV")
        p.add_argument("--out", help="output directory (default: current)")
        p.add_argument("--brancher", choices=BRANCHERS)
        p.add_argument("--timeout-s", type=float, dest="timeout_s")
        p.add_argument("--seed", type=int)
        p.add_argument("--workers", type=int)
        if name == "bench-branching":
            p.add_argument("--branchers", help="comma-separated brancher names")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        _setup_logging()
        doc = load_config(args.config)
        return COMMANDS[args.command](args, doc)
    except (ConfigError, NetworkFormatError, DatasetError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - last-resort handler for the exit code contract
        log.debug("internal error", exc_info=True)
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
