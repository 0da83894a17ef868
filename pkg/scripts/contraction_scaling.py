"""Per-level contraction ratios of the nested continuation map for several step sizes delta.

The measured ratio should shrink roughly like delta^2, so halving delta
divides it by about four.

    python3 scripts/contraction_scaling.py --deltas 0.2 0.1 0.05 --N 100 --M 2000
"""
import argparse
import json

import numpy as np

from mvfbsde.coeffs import builtin
from mvfbsde.core import make_grid
from mvfbsde.homotopy import PicardConfig, solve_fbsde


def level_ratios(delta, N=100, M=2000, T=10.0, tol=1e-12, seed=1):
    lq, constants = builtin("scalar_lq_meanfield")
    grid = make_grid(T, N, lq.K)
    _, trace = solve_fbsde(lq, constants, grid, M, PicardConfig(delta=delta, tol=tol, mode="nested"), seed=seed)
    lams = sorted({lv["lambda"] for lv in trace.levels if lv["lambda"] > 0})
    return {lam: trace.contraction_ratio(lam, skip=0) for lam in lams}


if __name__ == "__main__":
    ap = argparse.ArgumentParser()
    ap.add_argument("--deltas", type=float, nargs="+", default=[0.2, 0.1, 0.05])
    ap.add_argument("--N", type=int, default=100)
    ap.add_argument("--M", type=int, default=2000)
    a = ap.parse_args()
    summary = {}
    for d in a.deltas:
        ratios = level_ratios(d, a.N, a.M)
        summary[d] = float(np.exp(np.nanmean(np.log(list(ratios.values())))))
        print(json.dumps({"delta": d, "geometric_mean_ratio": summary[d],
                          "per_level": {f"{k:.3f}": v for k, v in ratios.items()}}))
    ds = sorted(summary)
    for lo, hi in zip(ds[:-1], ds[1:]):
        print(f"ratio({lo})/ratio({hi}) = {summary[lo] / summary[hi]:.3f}  (delta^2 law: {(lo / hi) ** 2:.3f})")
