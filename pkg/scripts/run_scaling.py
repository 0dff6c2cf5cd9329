#!/usr/bin/env python3
"""Client-count scaling: per-client vs server traffic and simulated runtime.

Sweeps the roster size under unlimited bandwidth and writes one row per
count. Per-client bytes should stay near-flat (polylog growth) while server
bytes and total runtime grow roughly linearly with the roster.

Usage: python scripts/run_scaling.py [--out results/scaling] [--quick]
"""

import argparse
import sys

from dhdmm.cli import main as cli_main


def parse_args():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", default="results/scaling")
    p.add_argument("--grid", default="100,1000,3000", help="client counts")
    p.add_argument("--trials", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--quick", action="store_true", help="tiny grid for a smoke run")
    return p.parse_args()


def main() -> int:
    args = parse_args()
    grid = "20,60" if args.quick else args.grid
    trials = 1 if args.quick else args.trials
    return cli_main(
        [
            "sweep", "--axis", "clients", "--grid", grid,
            "--domain", "4x4", "--workload", "marginals:1",
            "--rho", "0.5", "--trials", str(trials), "--seed", str(args.seed),
            "--records-per-client", "20", "--out", args.out,
        ]
    )


if __name__ == "__main__":
    sys.exit(main())
