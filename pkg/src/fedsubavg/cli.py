"""Command-line entry point: ``fedsubavg {run,sweep,check-theorems,estimate-counts}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .errors import ConfigError, DivergenceError, FedSubError

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_CHECK_FAILED = 0, 2, 3, 4


def _cmd_run(args) -> int:
    from .harness import ExperimentConfig, run_experiment

    cfg = ExperimentConfig.load(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out = args.out
    series = run_experiment(cfg)
    print(f"rounds={series.rounds[-1]} final_train_loss={series.train_loss[-1]:.6g}")
    return EXIT_OK


def _cmd_sweep(args) -> int:
    from .harness import ExperimentConfig, rounds_to_target, sweep

    cfg = ExperimentConfig.load(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    key, _, raw = args.vary.partition("=")
    if not raw:
        raise ConfigError("--vary expects KEY=v1,v2,...")
    results = sweep(cfg, key, raw.split(","), args.out)
    print(f"{key},final_train_loss" + (",rounds_to_target" if args.target is not None else ""))
    for v, s in results.items():
        line = f"{v},{s.train_loss[-1]:.6g}"
        if args.target is not None:
            line += f",{rounds_to_target(s, args.target)}"
        print(line)
    return EXIT_OK


def _cmd_check(args) -> int:
    from .analysis import run_theorem_suite, write_reports

    reports = run_theorem_suite(args.instances, args.seed)
    out = Path(args.report)
    failed = write_reports(reports, out)
    n_checks = sum(len(r.checks) for r in reports)
    print(f"instances={len(reports)} checks={n_checks} failed={failed} report={out}")
    return EXIT_OK if failed == 0 else EXIT_CHECK_FAILED


def _cmd_counts(args) -> int:
    from .harness import ExperimentConfig, build_task
    from .core import build_heat_table
    from .privacy import RRConfig, indicator_vector, rr_heat_table, secure_count

    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    task = build_task(cfg)
    sets = [c.index_set for c in task.clients]
    truth = build_heat_table(sets, task.M)
    if args.mechanism == "exact":
        est = secure_count([indicator_vector(s) for s in sets], seed=args.seed).counts.astype(float)
        clamped = np.zeros(task.M, dtype=bool)
    else:
        res = rr_heat_table(sets, RRConfig(args.p), seed=args.seed)
        est, clamped = res.counts, res.clamped
    print("index,true_count,estimate,clamped")
    for m in range(task.M):
        print(f"{m},{truth.counts[m]},{est[m]:.6g},{int(clamped[m])}")
    err = np.abs(est - truth.counts)
    print(f"# mean_abs_error={err.mean():.6g} max_abs_error={err.max():.6g}", file=sys.stderr)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedsubavg", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="cmd", required=True)

    r = sub.add_parser("run", help="run one experiment from a JSON config")
    r.add_argument("--config", required=True)
    r.add_argument("--seed", type=int)
    r.add_argument("--out")
    r.set_defaults(func=_cmd_run)

    s = sub.add_parser("sweep", help="repeat a run over values of one config key")
    s.add_argument("--config", required=True)
    s.add_argument("--vary", required=True, help="KEY=v1,v2,... (dotted keys allowed)")
    s.add_argument("--seed", type=int)
    s.add_argument("--out")
    s.add_argument("--target", type=float, help="train-loss target for rounds-to-target")
    s.set_defaults(func=_cmd_sweep)

    c = sub.add_parser("check-theorems", help="conditioning bounds on random certified quadratics")
    c.add_argument("--instances", type=int, default=100)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--report", default="theorem_report.jsonl")
    c.set_defaults(func=_cmd_check)

    e = sub.add_parser("estimate-counts", help="per-parameter client counts via a private mechanism")
    e.add_argument("--mechanism", choices=("exact", "rr"), default="rr")
    e.add_argument("--p", type=float, default=0.9)
    e.add_argument("--config")
    e.add_argument("--seed", type=int, default=0)
    e.set_defaults(func=_cmd_counts)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (FedSubError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
