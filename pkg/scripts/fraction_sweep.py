#!/usr/bin/env python3
"""Sweep the sampled-population fraction and compare accounting modes.

Replaces the default 25/100 fraction split with a single percentage from 5%
to 85% and reports accepted utility and request volume for subsampled vs
UPC accounting (desk scale, DPK).
"""

import argparse
from pathlib import Path

import numpy as np

from dpplanner.harness import run_simulation
from dpplanner.io import write_run
from dpplanner.presets import desk_config


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="out/fraction_sweep")
    parser.add_argument("--family", default="W1", choices=("W1", "W2", "W3", "W4"))
    parser.add_argument("--seeds", type=int, default=3)
    parser.add_argument(
        "--fractions", type=float, nargs="+",
        default=[0.05, 0.25, 0.45, 0.65, 0.85],
    )
    args = parser.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    print(f"{'fraction':>9} {'sub util':>10} {'upc util':>10} {'ratio':>7} "
          f"{'sub req':>8} {'upc req':>8}")
    for fraction in args.fractions:
        totals = {"subsampled": [], "upc": []}
        counts = {"subsampled": [], "upc": []}
        for seed in range(args.seeds):
            for accounting in ("subsampled", "upc"):
                cfg = desk_config(
                    args.family, seed=seed, algorithm="dpk", accounting=accounting,
                    fraction_choices=((fraction, 1.0),), requests_per_round=150.0,
                )
                res = run_simulation(cfg)
                write_run(res, out / f"{accounting}_f{fraction}_s{seed}")
                totals[accounting].append(
                    sum(m.accepted_utility for m in res.metrics)
                )
                counts[accounting].append(
                    sum(m.accepted_requests for m in res.metrics)
                )
        sub, upc = np.mean(totals["subsampled"]), np.mean(totals["upc"])
        print(
            f"{fraction:>9.2f} {sub:>10.4f} {upc:>10.4f} {sub / upc:>7.2f} "
            f"{np.mean(counts['subsampled']):>8.1f} {np.mean(counts['upc']):>8.1f}"
        )


if __name__ == "__main__":
    main()
