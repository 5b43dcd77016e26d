#!/usr/bin/env python3
"""Reconstruction-attack table: five representations x {10%, 100%} train data.

Trains a short parallel-SL snapshot on mosaic synthetic data, runs the
attack suite, and prints the MSE table (higher = less leakage).
"""

import sys

from splitmix.config import ExperimentConfig
from splitmix.runner import run_attack_suite


def main(seed="1", out_dir="runs/attack_table"):
    cfg = ExperimentConfig(
        method="parallel_sl", n_clients=2, dataset="synthetic",
        synthetic_samples=2048, synthetic_test=512, synthetic_mosaic=0.25,
        synthetic_noise=0.05, epochs=10, warmup_epochs=1, batch_size=32,
        seed=int(seed), out_dir=out_dir, attack_pretrain_epochs=6)
    result = run_attack_suite(cfg)
    print(f"{'representation':>16}  {'10%':>8}  {'100%':>8}")
    for rep, row in result["mse"].items():
        print(f"{rep:>16}  {row['0.1']:8.4f}  {row['1.0']:8.4f}")
    return 0


if __name__ == "__main__":
    sys.exit(main(*sys.argv[1:]))
