"""Rounds-to-target for FedSubAvg as the number of sampled clients grows."""

import argparse

from fedsubavg.harness import ExperimentConfig, StrategyConfig, TaskConfig, rounds_to_target, sweep


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--K", type=int, nargs="+", default=[10, 30, 50])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--target", type=float, default=0.55)
    ap.add_argument("--rounds", type=int, default=200)
    ap.add_argument("--out", default=None)
    args = ap.parse_args()

    print("seed,K,final_train_loss,rounds_to_target")
    for seed in args.seeds:
        cfg = ExperimentConfig(
            task=TaskConfig(N=500, V=1000, target_dispersion=150.0, data_seed=seed),
            strategy=StrategyConfig("fedsubavg", lr=0.1, iterations=10, batch_size=5),
            K=max(args.K), rounds=args.rounds, seed=seed,
        )
        out = None if args.out is None else f"{args.out}/seed={seed}"
        for K, s in sweep(cfg, "K", args.K, out).items():
            print(f"{seed},{K},{s.train_loss[-1]:.5f},{rounds_to_target(s, args.target)}")


if __name__ == "__main__":
    main()
