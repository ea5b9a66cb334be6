"""Run the benchmark experiments and write CSV files (and SVG plots) to ./results.

    python3 scripts/run_experiments.py [--quick] [--workers K] [--seed S]

``--quick`` cuts replicate counts by 10x for a fast smoke run.
"""

import argparse
import dataclasses
import os

import numpy as np

from coalsis import experiments as ex
from coalsis.experiments import ExperimentConfig


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--quick", action="store_true")
    ap.add_argument("--workers", type=int, default=1)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--output", default="results")
    args = ap.parse_args()
    scale = 10 if args.quick else 1
    base = ExperimentConfig(seed=args.seed, workers=args.workers)

    def out(name):
        return os.path.join(args.output, name)

    # likelihood surface on fa50 under all four schedules
    thetas = tuple(np.round(np.linspace(0.1, 1.5, 8), 3))
    cfg = dataclasses.replace(
        base, data="builtin:fa50", proposal="SD", thetas=thetas,
        schedules=("S1", "S2", "S3", "S4"), gamma=100 // scale, Gamma=10_000 // scale,
        mutation_cap=1000, output=out("surface_fa50"),
    )
    path = ex.cmd_likelihood_surface(cfg)
    ex.plot_surface(path, path[:-4] + ".svg")

    # variance by remaining lineages
    cfg = dataclasses.replace(base, data="builtin:fa50", replicates=10_000 // scale,
                              mutation_cap=1000, output=out("varcurve_fa50"))
    path = ex.cmd_variance_curve(cfg, ("GT", "SD"))
    ex.plot_varcurve(path, path[:-4] + ".svg")
    cfg = dataclasses.replace(base, model="ism", data="builtin:ism55",
                              replicates=2000 // scale, output=out("varcurve_ism55"))
    path = ex.cmd_variance_curve(cfg, ("SD", "HUW"))
    ex.plot_varcurve(path, path[:-4] + ".svg")

    # truncated cost against its large-n limit
    cfg = dataclasses.replace(base, n_values=(500, 5000), t=0.5, replicates=10_000 // scale,
                              output=out("costconv"))
    print(ex.cmd_cost_convergence(cfg, ("GT", "SD")))


if __name__ == "__main__":
    main()
