"""Continuation solve of the scalar mean-field LQ problem against the Riccati reference.

    python3 scripts/lq_homotopy.py --N 10000 --M 100000 --coarsen 10
"""
import argparse
import json
import time

import numpy as np

from mvfbsde.coeffs import builtin
from mvfbsde.control import evaluate_cost, feedback_from_field
from mvfbsde.core import make_grid
from mvfbsde.homotopy import PicardConfig, solve_fbsde
from mvfbsde.oracle import riccati_lq


def run(N=10000, M=100000, T=10.0, delta=0.1, tol=1e-4, coarsen=10, mode="flattened", seed=1, cost=True):
    lq, constants = builtin("scalar_lq_meanfield")
    grid = make_grid(T, N, lq.K)
    t0 = time.time()
    cfg = PicardConfig(delta=delta, tol=tol, warm_start_coarsening=coarsen, mode=mode)
    sol, trace = solve_fbsde(lq, constants, grid, M, cfg, seed=seed)
    t_solve = time.time() - t0
    ric = riccati_lq(lq, grid)
    mean_x0 = float(sol.x0.mean())
    y0_ref = ric.P[0, 0, 0] * mean_x0 + ric.p_bar[0, 0, 0] * mean_x0
    out = {
        "solve_seconds": t_solve,
        "levels": trace.levels,
        "max_iterations": max(lv["iterations"] for lv in trace.levels),
        "all_converged": all(lv["converged"] for lv in trace.levels),
        "y0_mean": float(sol.y0.mean()),
        "y0_riccati": float(y0_ref),
        "y0_rel_err": abs(float(sol.y0.mean()) - y0_ref) / abs(y0_ref),
    }
    if cost:
        t1 = time.time()
        rep = evaluate_cost(feedback_from_field(lq, sol.field), lq, grid, M, seed=seed)
        value = ric.value(mean_x0, float(np.var(sol.x0)))
        out.update(J=rep.J, J_se=rep.std_error, J_riccati=value,
                   J_within=abs(rep.J - value) <= 0.02 * abs(value) + 3 * rep.std_error,
                   cost_seconds=time.time() - t1)
    out["total_seconds"] = time.time() - t0
    return out


if __name__ == "__main__":
    ap = argparse.ArgumentParser()
    ap.add_argument("--N", type=int, default=10000)
    ap.add_argument("--M", type=int, default=100000)
    ap.add_argument("--delta", type=float, default=0.1)
    ap.add_argument("--coarsen", type=int, default=10)
    ap.add_argument("--mode", default="flattened")
    ap.add_argument("--seed", type=int, default=1)
    a = ap.parse_args()
    res = run(a.N, a.M, delta=a.delta, coarsen=a.coarsen, mode=a.mode, seed=a.seed)
    res.pop("levels")
    print(json.dumps(res, indent=1))
