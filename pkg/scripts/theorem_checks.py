"""Check the conditioning bounds on random certified quadratics.

Prints a per-check summary and writes the full records as JSON lines.
"""

import argparse
from collections import Counter

from fedsubavg.analysis import run_theorem_suite, write_reports


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--instances", type=int, default=100)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--max-N", type=int, default=50)
    ap.add_argument("--max-M", type=int, default=16)
    ap.add_argument("--report", default="results/theorem_checks.jsonl")
    args = ap.parse_args()

    reports = run_theorem_suite(args.instances, seed=args.seed, max_N=args.max_N, max_M=args.max_M)
    total, passed = Counter(), Counter()
    for rep in reports:
        for name, (_, _, ok) in rep.checks.items():
            total[name] += 1
            passed[name] += bool(ok)
    for name in sorted(total):
        print(f"{name}: {passed[name]}/{total[name]}")
    failed = write_reports(reports, args.report)
    print(f"failed={failed} report={args.report}")
    return 1 if failed else 0


if __name__ == "__main__":
    raise SystemExit(main())
