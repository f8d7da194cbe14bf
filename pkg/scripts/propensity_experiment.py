"""Propensity-to-consume experiment: sweep the initial endowment over several
decades on a deterministic-rate market and on a general incomplete market,
print the error tables and the fitted decay rates.

Run:
  python scripts/propensity_experiment.py --seed 606
"""

import argparse

import numpy as np

import habitree.instances as gi
from habitree.asymptotics import propensity_sweep


def run_one(label, market, agent, grid):
    rep = propensity_sweep(market, agent, grid)
    print(f"== {label} (T={market.tree.horizon})")
    print("eps0        err_c        err_W")
    for e0, ec, ew in rep.sweep:
        print(f"{e0:<10.0e} {ec:<12.3e} {ew:<12.3e}")
    print(f"fitted log-log rate: {rep.fitted_rate:.4f}; "
          f"errors decreasing: {rep.errors_decreasing()}")
    print(f"habit-chain floors alpha_k: {np.round(rep.alpha_lower, 6)}")
    print()


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--seed", type=int, default=606)
    parser.add_argument("--grid", default="1e1,1e2,1e3,1e4,1e5")
    args = parser.parse_args()
    grid = [float(x) for x in args.grid.split(",")]
    rng = np.random.default_rng(args.seed)

    tree = gi.random_tree(rng, min_depth=2)
    run_one("deterministic-rate intermediate-partition market",
            gi.random_classC_market(rng, tree, deterministic_rate=True),
            gi.random_agent(rng, tree, static=True), grid)

    tree2 = gi.random_tree(rng, min_depth=2)
    run_one("general incomplete market",
            gi.random_general_market(rng, tree2),
            gi.random_agent(rng, tree2), grid)


if __name__ == "__main__":
    main()
