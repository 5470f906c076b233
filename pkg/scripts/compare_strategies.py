"""Train every strategy on the same synthetic sparse task and tabulate results.

For each seed, writes per-strategy metric CSVs under --out and prints the final
train loss plus rounds needed to reach the FedAvg final loss.
"""

import argparse
from pathlib import Path

from fedsubavg.harness import ExperimentConfig, StrategyConfig, TaskConfig, rounds_to_target, run_experiment

STRATEGIES = ("fedsubavg", "fedavg", "fedprox", "scaffold_approx", "fedadam", "central_sgd")


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--N", type=int, default=500)
    ap.add_argument("--V", type=int, default=1000)
    ap.add_argument("--dispersion", type=float, default=150.0)
    ap.add_argument("--K", type=int, default=50)
    ap.add_argument("--rounds", type=int, default=200)
    ap.add_argument("--lr", type=float, default=0.1)
    ap.add_argument("--out", default="results/compare")
    args = ap.parse_args()

    print("seed,strategy,final_train_loss,final_test_acc,rounds_to_fedavg_final")
    for seed in args.seeds:
        runs = {}
        for name in STRATEGIES:
            cfg = ExperimentConfig(
                task=TaskConfig(N=args.N, V=args.V, target_dispersion=args.dispersion, data_seed=seed),
                strategy=StrategyConfig(name, lr=args.lr, iterations=10, batch_size=5, prox_mu=0.01,
                                        server_lr=0.01),
                K=args.K, rounds=args.rounds, seed=seed,
            )
            runs[name] = run_experiment(cfg, Path(args.out) / f"seed={seed}" / name)
        target = runs["fedavg"].train_loss[-1]
        for name, s in runs.items():
            print(f"{seed},{name},{s.train_loss[-1]:.5f},{s.test_metric[-1]:.4f},{rounds_to_target(s, target)}")


if __name__ == "__main__":
    main()
