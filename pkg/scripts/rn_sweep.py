"""Grid over server EKT steps R and client local epochs N on the synthetic config."""

import argparse

import numpy as np

from fedmekt.config import ExperimentConfig
from fedmekt.experiment import sweep


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--rounds", type=int, default=30)
    ap.add_argument("--out", default="runs/rn_sweep")
    args = ap.parse_args()

    base = ExperimentConfig(rounds=args.rounds, dirichlet=0.3, num_clients=6, clients_per_round=3, output_dir=args.out)
    rows = sweep(base, {"ekt_steps": [1, 2, 3], "local_epochs": [1, 2, 3]})
    table = np.array([[r["probe_f1_mean"] for r in rows if r["ekt_steps"] == R] for R in (1, 2, 3)])
    print("rows R=1..3, cols N=1..3 (mean probe F1)")
    print(np.array2string(table, precision=4))
    print("column means over N:", np.round(table.mean(axis=1), 4))


if __name__ == "__main__":
    main()
