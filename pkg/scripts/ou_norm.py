"""Weighted norm of the OU forward leg against its closed form, over a ladder of particle counts.

    python3 scripts/ou_norm.py --N 10000 --M 1000 10000 100000
"""
import argparse
import json
import time

from mvfbsde.coeffs import builtin
from mvfbsde.core import make_grid
from mvfbsde.forward import SdeRunConfig, solve_sde
from mvfbsde.oracle import ou_moments


def run(N, Ms, T=10.0, K=-0.5, seed=1):
    coeffs, _ = builtin("decoupled_ou")
    grid = make_grid(T, N, K)
    ref = ou_moments(1.0, 1.0, 1.0, K, grid)
    rows = []
    for M in Ms:
        t0 = time.perf_counter()
        ens = solve_sde(coeffs, SdeRunConfig(grid, M, seed, keep_paths=False))
        value = ens.norm("X").value
        rows.append({"M": M, "norm": value, "closed_form": ref["norm_inf"], "discrete_ref": ref["norm_discrete"],
                     "rel_err": abs(value - ref["norm_inf"]) / ref["norm_inf"],
                     "tail_terminal": ens.tail("X").terminal, "seconds": time.perf_counter() - t0})
    return rows


if __name__ == "__main__":
    ap = argparse.ArgumentParser()
    ap.add_argument("--N", type=int, default=10000)
    ap.add_argument("--M", type=int, nargs="+", default=[1000, 10000, 100000])
    ap.add_argument("--seed", type=int, default=1)
    a = ap.parse_args()
    for row in run(a.N, a.M, seed=a.seed):
        print(json.dumps(row))
