"""Regenerate the benchmark data shipped in src/coalsis/data.

Finite alleles: 20 binary sites, a mutation flips one uniform site, theta 0.5.
A 50-lineage sample, and a 5000-lineage sample with a nested 500 subsample.
Infinite sites: n = 55 at theta 3.93 and n = 550, 5500 at theta 5.0, each
conditioned on its number of segregating sites so that the Watterson
estimates are 3.93, 4.94 and 4.90.
"""

import os

from coalsis.experiments import cmd_make_data
from coalsis.ism import watterson_estimate
from coalsis.formats import read_ism

OUT = os.path.join(os.path.dirname(__file__), "..", "src", "coalsis", "data")


def main():
    cmd_make_data("fa", OUT, 50, 0.5, seed=50, sites=20)
    cmd_make_data("fa", OUT, 5000, 0.5, seed=5000, sites=20, nested=(500,))
    for n, theta, r, seed in ((55, 3.93, 18, 55), (550, 5.0, 34, 550), (5500, 5.0, 45, 5500)):
        (p,) = cmd_make_data("ism", OUT, n, theta, seed=seed, r_target=r)
        print(p, round(watterson_estimate(read_ism(p)), 2))


if __name__ == "__main__":
    main()
