"""Learnable mesh-prior queries against fixed random queries, over several seeds.

Also reports the 60%-input discretization check for the first learnable run.
"""

import argparse
import json
import logging

from calmpde import experiments

if __name__ == "__main__":
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--config", default="rotating2d-lite")
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--fraction", type=float, default=0.6)
    p.add_argument("-v", "--verbose", action="store_true")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    res = experiments.ablation(args.config, args.seeds, keep_runs=True)
    for row in res["rows"]:
        print(f"seed {row['seed']} {row['variant']:<22} rel L2 {row['test_rel_l2']:.4f} "
              f"displacement {row['displacement']:.4f} ({row['seconds']:.0f}s)")
    wins, n = experiments.ablation_wins(res["rows"], "learnable+mesh_prior", "fixed_random")
    print(f"learnable+mesh_prior better on {wins}/{n} seeds")
    run = res["runs"][(args.seeds[0], "learnable+mesh_prior")]
    print(json.dumps(experiments.discretization(run, res["dataset"], args.fraction), indent=2))
