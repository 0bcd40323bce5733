#!/usr/bin/env python3
"""Desk-scale experiment grid: accounting comparison and unlocking sweep.

Writes one run directory per configuration under --out and prints the two
headline comparisons (subsampled vs UPC utility ratio; unlocking slack
sweep).  Small enough to run on a laptop in a few minutes.
"""

import argparse
from pathlib import Path

import numpy as np

from dpplanner.harness import run_simulation
from dpplanner.io import write_run
from dpplanner.presets import desk_config


def accounting_comparison(out: Path, seeds: int) -> None:
    print("== subsampled vs UPC (fraction 0.25, DPK) ==")
    for family in ("W1", "W2"):
        ratios = []
        for seed in range(seeds):
            totals = {}
            for accounting in ("subsampled", "upc"):
                cfg = desk_config(
                    family, seed=seed, algorithm="dpk", accounting=accounting,
                    fraction_choices=((0.25, 1.0),), requests_per_round=150.0,
                )
                res = run_simulation(cfg)
                write_run(res, out / f"acct_{family}_{accounting}_s{seed}")
                totals[accounting] = sum(m.accepted_utility for m in res.metrics)
            ratios.append(totals["subsampled"] / totals["upc"])
        print(
            f"  {family}: utility ratio mean={np.mean(ratios):.2f} "
            f"min={min(ratios):.2f} max={max(ratios):.2f} over {seeds} seeds"
        )


def unlocking_sweep(out: Path, seeds: int) -> None:
    print("== unlocking slack sweep (W1, DPK, full-population sampling) ==")
    baseline = None
    for slack in (0.0, 0.4, 0.8):
        utils, variances = [], []
        for seed in range(seeds):
            cfg = desk_config(
                "W1", seed=seed, algorithm="dpk", delta_slack=slack,
                fraction_choices=((1.0, 1.0),),
            )
            res = run_simulation(cfg)
            write_run(res, out / f"unlock_{slack}_s{seed}")
            series = [m.accepted_utility for m in res.metrics]
            utils.append(sum(series))
            variances.append(float(np.var(series)))
        mean_util = float(np.mean(utils))
        if slack == 0.0:
            baseline = mean_util
        rel = mean_util / baseline if baseline else float("nan")
        print(
            f"  slack={slack}: utility={mean_util:.4f} (x{rel:.2f} vs 0.0), "
            f"per-round variance={np.mean(variances):.2e}"
        )


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="out/desk_suite")
    parser.add_argument("--seeds", type=int, default=5)
    args = parser.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    accounting_comparison(out, args.seeds)
    unlocking_sweep(out, args.seeds)
    print(f"run directories under {out}")


if __name__ == "__main__":
    main()
