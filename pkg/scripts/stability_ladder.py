"""Stability audit of the LQ solution under q -> q + bump across a ladder of time steps.

    python3 scripts/stability_ladder.py --dts 0.01 0.005 0.0025 --M 10000
"""
import argparse
import json
from dataclasses import replace

import numpy as np

from mvfbsde.coeffs import builtin, lq_constants
from mvfbsde.core import make_grid
from mvfbsde.homotopy import PicardConfig, audit_stability, solve_fbsde


def run(dts, M=10000, bump=0.05, T=10.0, seed=1):
    lq, constants = builtin("scalar_lq_meanfield")
    bumped = replace(lq, Q=lq.Q + bump * np.eye(lq.n), lam_conv=None)
    cfg = PicardConfig(delta=0.1, tol=1e-4, warm_start_coarsening=10)
    rows = []
    for dt in dts:
        grid = make_grid(T, int(round(T / dt)), lq.K)
        a, _ = solve_fbsde(lq, constants, grid, M, cfg, seed=seed)
        b, _ = solve_fbsde(bumped, lq_constants(bumped), grid, M, cfg, seed=seed)
        rep = audit_stability(a, b, lq, bumped)
        rows.append({"dt": dt, "lhs": rep.lhs, "rhs": rep.rhs, "ratio": rep.coef, "norms": rep.extra["norms"]})
    return rows


if __name__ == "__main__":
    ap = argparse.ArgumentParser()
    ap.add_argument("--dts", type=float, nargs="+", default=[0.01, 0.005, 0.0025])
    ap.add_argument("--M", type=int, default=10000)
    ap.add_argument("--bump", type=float, default=0.05)
    a = ap.parse_args()
    for row in run(a.dts, a.M, a.bump):
        print(json.dumps(row))
