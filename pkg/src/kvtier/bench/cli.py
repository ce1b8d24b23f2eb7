"""Command line entry point: ``kvtier run|compare|sweep|estimate``."""

import argparse
import os
import sys

from .config import ConfigError, ExperimentConfig, ModelShape, load_config
from .experiment import run_experiment
from .footprint import estimate_kvcache_bytes
from .report import (compare_strategies, format_value, sweep, write_comparison, write_csv,
                     write_report)


def _load(path, seed):
    overrides = {} if seed is None else {"seed": str(seed)}
    if path is None:
        return ExperimentConfig().replace(**overrides)
    return load_config(path, overrides)


def _cmd_run(args):
    cfg = _load(args.config, args.seed)
    report = run_experiment(cfg, trace_io=args.io_trace)
    files = write_report(report, args.out, layout=args.layout, io_trace=args.io_trace)
    print(f"wrote {', '.join(files)} to {args.out}")
    for key in ("mean_recall", "read_bytes", "cache_hit_rate", "mean_access_entries"):
        print(f"{key} = {format_value(report.summary[key])}")


def _cmd_compare(args):
    cfgs = [_load(p, args.seed) for p in args.configs]
    names = [os.path.splitext(os.path.basename(p))[0] for p in args.configs]
    header, rows, _ = compare_strategies(cfgs, names)
    path = write_comparison(header, rows, args.out)
    print(f"wrote {path}")


def _cmd_sweep(args):
    cfg = _load(args.config, args.seed)
    header, rows = sweep(cfg, args.param, args.values.split(","))
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "sweep.csv")
    write_csv(path, header, rows)
    print(f"wrote {path}")


def _cmd_estimate(args):
    shape = ModelShape(args.layers, args.kv_heads, args.head_dim, args.bytes)
    n = estimate_kvcache_bytes(shape, args.seq_len)
    print(f"{n} bytes ({n / 1e9:.3f} GB)")


def build_parser():
    ap = argparse.ArgumentParser(prog="kvtier", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="simulate one config")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--layout", action="store_true", help="also write layout.txt")
    p.add_argument("--io-trace", action="store_true", help="also write io_trace.txt")
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("compare", help="run several configs side by side")
    p.add_argument("--configs", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=_cmd_compare)

    p = sub.add_parser("sweep", help="vary one config key")
    p.add_argument("--param", required=True)
    p.add_argument("--values", required=True, help="comma separated")
    p.add_argument("--config")
    p.add_argument("--out", default="sweep_out")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=_cmd_sweep)

    p = sub.add_parser("estimate", help="KV cache footprint of a model shape")
    p.add_argument("--layers", type=int, required=True)
    p.add_argument("--kv-heads", type=int, required=True)
    p.add_argument("--head-dim", type=int, required=True)
    p.add_argument("--bytes", type=int, default=2)
    p.add_argument("--seq-len", type=int, required=True)
    p.set_defaults(func=_cmd_estimate)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except (ConfigError, ValueError, OSError) as exc:
        print(f"kvtier: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
