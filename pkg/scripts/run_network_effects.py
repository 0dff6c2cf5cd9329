#!/usr/bin/env python3
"""Runtime sensitivity to client bandwidth and link latency.

Runs two sweeps at a fixed roster: one over client uplink/downlink rates
(Mbit/s), one over one-way latency (seconds). Simulated runtime should fall
as bandwidth rises and grow additively with latency per protocol round.

Usage: python scripts/run_network_effects.py [--out results/network] [--quick]
"""

import argparse
import os
import sys

from dhdmm.cli import main as cli_main


def parse_args():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", default="results/network")
    p.add_argument("--clients", type=int, default=100)
    p.add_argument("--bandwidth-grid", default="1,10,100")
    p.add_argument("--latency-grid", default="0.01,0.05,0.1")
    p.add_argument("--trials", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--quick", action="store_true", help="tiny roster for a smoke run")
    return p.parse_args()


def main() -> int:
    args = parse_args()
    clients = 10 if args.quick else args.clients
    trials = 1 if args.quick else args.trials
    base = [
        "--domain", "4x4", "--workload", "marginals:1", "--rho", "0.5",
        "--clients", str(clients), "--trials", str(trials),
        "--seed", str(args.seed), "--records-per-client", "20",
    ]
    code = cli_main(
        ["sweep", "--axis", "bandwidth", "--grid", args.bandwidth_grid,
         "--out", os.path.join(args.out, "bandwidth")] + base
    )
    if code != 0:
        return code
    return cli_main(
        ["sweep", "--axis", "latency", "--grid", args.latency_grid,
         "--out", os.path.join(args.out, "latency")] + base
    )


if __name__ == "__main__":
    sys.exit(main())
