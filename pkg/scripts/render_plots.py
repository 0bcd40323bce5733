#!/usr/bin/env python3
"""Optional renderer for run directories produced by simulate / the scripts.

The engine only emits CSV series; this script turns one or more runs into a
per-round utility plot.  Requires matplotlib (``pip install dpplanner[plots]``).
"""

import argparse
from pathlib import Path

from dpplanner.io import read_run


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("runs", nargs="+", help="run directories (with run.json)")
    parser.add_argument("--out", default="out/utility.png")
    parser.add_argument("--metric", default="accepted_utility")
    args = parser.parse_args()

    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(7, 4))
    for run_dir in args.runs:
        run = read_run(run_dir)
        series = [row[args.metric] for row in run["rows"]]
        cfg = run["meta"]["config"]
        label = (
            f"{cfg['workload']['name']} {cfg['algorithm']} "
            f"{cfg['accounting']} slack={cfg['unlock']['delta_slack']}"
        )
        ax.plot(range(len(series)), series, marker="o", label=label)
    ax.set_xlabel("round")
    ax.set_ylabel(args.metric)
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(out, dpi=150)
    print(f"wrote {out}")


if __name__ == "__main__":
    main()
