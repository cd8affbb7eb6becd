#!/usr/bin/env python3
"""Plot gradient norms from one or more metrics.csv files.

    python scripts/plot_metrics.py out/canonical_msobirl/seed_0/metrics.csv -o grad.png
"""
import argparse
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import pandas as pd


def main():
    parser = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("metrics", nargs="+", type=Path)
    parser.add_argument("-o", "--output", type=Path, default=Path("metrics.png"))
    parser.add_argument("--running-mean", action="store_true", help="plot (1/K) sum_k of each column")
    args = parser.parse_args()

    fig, ax = plt.subplots(figsize=(7, 4))
    for path in args.metrics:
        df = pd.read_csv(path)
        label = path.parent.name if path.parent.name.startswith("seed_") else path.stem
        for col, style in [("grad_true_norm2", "-"), ("grad_hat_norm2", ":")]:
            series = df[col].dropna()
            if series.empty:
                continue
            if args.running_mean:
                series = series.expanding().mean()
            ax.plot(df.loc[series.index, "k"], series, style, label=f"{label} {col}")
    ax.set_yscale("log")
    ax.set_xlabel("k")
    ax.set_ylabel("squared norm")
    ax.legend(fontsize="small")
    fig.tight_layout()
    fig.savefig(args.output, dpi=120)


if __name__ == "__main__":
    main()
