"""Closed-form per-round bytes for every strategy over the built-in architectures."""

import argparse

from fedmekt.evaluation import comm_cost
from fedmekt.models import preset

PAIRS = [("mhealth", "Acce", "Gyro"), ("mhealth", "Acce", "Mage"), ("mhealth", "Gyro", "Mage"),
         ("opp", "Acce", "Gyro"), ("urfall", "Acce", "RGB"), ("urfall", "Acce", "Depth"), ("urfall", "RGB", "Depth")]
STRATEGIES = ["FedMEKT-C", "FedMEKT-S", "MM-FedAvg", "MM-FedProx", "MM-MOON"]


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--n-proxy", type=int, default=500)
    ap.add_argument("--clients", type=int, default=10)
    ap.add_argument("--scalar-bytes", type=int, default=4)
    args = ap.parse_args()

    print(f"{'pair':<22}" + "".join(f"{s:>14}" for s in STRATEGIES) + f"{'ratio C/Avg':>13}")
    for name, a, b in PAIRS:
        try:
            arch = preset(name, a, b)
        except (KeyError, ValueError):
            continue
        costs = [comm_cost(s, arch, args.n_proxy, args.clients, (0, 1), args.scalar_bytes).total for s in STRATEGIES]
        print(f"{name + ':' + a + '-' + b:<22}" + "".join(f"{c:>14,}" for c in costs) + f"{costs[0] / costs[2]:>13.3f}")


if __name__ == "__main__":
    main()
