"""
Grid and lattice convergence of the case-study optimum.

    python scripts/convergence_study.py [--grids 1200 2400 4800] [--csv out.csv]

Solves the case study for each grid size, with and without the refinement
lattices, and prints p*, the stage-0 allocation and the wall time. The largest
grids take minutes each.
"""

import argparse
import csv
import sys
import time

from odaa import casestudy
from odaa.reachability import SolverConfig, solve


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    ap.add_argument("--grids", type=int, nargs="+", default=[1200, 2400, 4800])
    ap.add_argument("--coarse-only", action="store_true", help="skip the refinement lattices")
    ap.add_argument("--csv", default=None)
    args = ap.parse_args()

    mm = casestudy.mixture_fixture()
    ts, cs = casestudy.targets(), casestudy.constraints()
    refine = [()] if args.coarse_only else [(), SolverConfig().refine_steps]
    rows = []
    for n in args.grids:
        for steps in refine:
            t0 = time.perf_counter()
            sol = solve(ts, cs, mm, 1.0, SolverConfig(grid_size=n, refine_steps=steps))
            u0 = sol.info["x0_allocation"]
            row = {"grid": n, "refine": "+".join(map(str, steps)) or "none", "p_star": round(sol.p_star, 6),
                   "u_C": u0[0], "u_B": u0[1], "u_E": u0[2], "seconds": round(time.perf_counter() - t0, 1)}
            rows.append(row)
            print(row, flush=True)
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]))
            w.writeheader()
            w.writerows(rows)
    return 0


if __name__ == "__main__":
    sys.exit(main())
