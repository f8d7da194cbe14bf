"""Reproduce the habit-sensitivity figure data for the two-point growth
economy: the one-period interest-rate curve and the long-run Lucas-equity
curve on a 101-point beta grid.

Run:
  python scripts/figure_curves.py --out-dir outputs
"""

import argparse
import os

from habitree.cli import emit_figure_data
from habitree.instances import example_iid_economy
from habitree.io import fmt17


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--out-dir", default="outputs")
    args = parser.parse_args()
    os.makedirs(args.out_dir, exist_ok=True)
    econ = example_iid_economy(horizon=1)
    for figure, name in ((1, "interest_rate_vs_beta.csv"),
                         (2, "lucas_equity_vs_beta.csv")):
        rows = emit_figure_data(econ, figure)
        path = os.path.join(args.out_dir, name)
        with open(path, "w") as fh:
            fh.write("beta,value\n")
            for b, v in rows:
                fh.write(f"{fmt17(b)},{fmt17(v)}\n")
        print(f"figure {figure}: {path}  endpoints {rows[0][1]:.6f} -> {rows[-1][1]:.6f}")


if __name__ == "__main__":
    main()
