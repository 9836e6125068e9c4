"""Write a seeded smooth perturbation direction for a run config as a VAF1 field.

    python3 demos/make_direction.py demos/demo32.json dir.vaf --seed 7
"""

import argparse

import numpy as np

from viscoadjoint.cli import RunConfig
from viscoadjoint.io import write_field
from viscoadjoint.scenario import smooth_direction


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("config")
    ap.add_argument("out")
    ap.add_argument("--seed", type=int, default=7)
    ap.add_argument("--fraction", type=float, default=0.3, help="amplitude as a fraction of each box width")
    args = ap.parse_args()
    cfg = RunConfig.load(args.config)
    grid = cfg.grid()
    d = smooth_direction(grid, np.random.default_rng(args.seed), cfg.bounds(), args.fraction)
    write_field(args.out, d.values, grid.h)


if __name__ == "__main__":
    main()
