"""Acceptance criteria at their stated settings; each test prints one PASS/FAIL line.

These runs are long (the LQ continuation alone takes about ten minutes on
one core). Select them with ``pytest tests/test_acceptance.py -s`` or skip
them with ``-m "not acceptance"``.
"""
import time
from dataclasses import replace

import numpy as np
import pytest

from mvfbsde.backward import BsdeAuditData, BsdeRunConfig, audit_bsde_apriori, solve_bsde
from mvfbsde.coeffs import BUILTINS, LQSpec, builtin, lq_constants, lq_gate_sides, scalar_lq
from mvfbsde.control import evaluate_cost, feedback_from_field, smooth_perturbation, verify_optimality
from mvfbsde.core import make_grid
from mvfbsde.forward import SdeAuditData, SdeRunConfig, audit_sde_apriori, solve_sde
from mvfbsde.homotopy import PicardConfig, audit_stability, solve_fbsde
from mvfbsde.oracle import riccati_lq
from mvfbsde.verify import check_h2_monotonicity, check_parameter_gate, gates_pass, replay

pytestmark = pytest.mark.acceptance


@pytest.fixture
def report(capsys):
    def emit(criterion, ok, detail):
        with capsys.disabled():
            print(f"\n[criterion {criterion}] {'PASS' if ok else 'FAIL'} {detail}")
    return emit


# ---------------------------------------------------------------- shared solves

@pytest.fixture(scope="module")
def ou_run():
    coeffs, _ = builtin("decoupled_ou")
    grid = make_grid(10.0, 10_000, -0.5)
    t0 = time.perf_counter()
    ens = solve_sde(coeffs, SdeRunConfig(grid, 100_000, seed=1, keep_paths=False))
    return grid, ens, time.perf_counter() - t0


@pytest.fixture(scope="module")
def bsde_run():
    coeffs, _ = builtin("constant_driver_bsde")
    grid = make_grid(10.0, 10_000, -0.5)
    M = 10_000
    return grid, M, solve_bsde(coeffs.driver, BsdeRunConfig(grid, M, seed=1))


@pytest.fixture(scope="module")
def lq_run():
    """The LQ continuation at dt = 1e-3, M = 1e5, delta = 0.1, tol = 1e-4, plus the cost of its feedback."""
    lq, constants = builtin("scalar_lq_meanfield")
    grid = make_grid(10.0, 10_000, lq.K)
    M = 100_000
    t0 = time.perf_counter()
    cfg = PicardConfig(delta=0.1, tol=1e-4, max_iter=50, warm_start_coarsening=10)
    sol, trace = solve_fbsde(lq, constants, grid, M, cfg, seed=1)
    cost = evaluate_cost(feedback_from_field(lq, sol.field), lq, grid, M, seed=1)
    return lq, grid, sol, trace, cost, time.perf_counter() - t0


# ---------------------------------------------------------------- 1

def test_c1_ou_weighted_norm(ou_run, report):
    grid, ens, seconds = ou_run
    value = ens.norm("X").value
    rel = abs(value - 2.0 / 3.0) / (2.0 / 3.0)
    ok = rel <= 0.03 and seconds < 120.0
    report(1, ok, f"norm={value:.5f} target=2/3 rel_err={rel:.2e} runtime={seconds:.1f}s")
    assert rel <= 0.03
    assert seconds < 120.0


# ---------------------------------------------------------------- 2

def test_c2_bsde_fixed_point(bsde_run, report):
    grid, M, ens = bsde_run
    y0_err = abs(float(ens.Y[0, :, 0].mean()) - 1.0)
    y_bound = 5.0 * (grid.dt + np.exp(-10.0))
    z_rms = float(np.sqrt(np.mean(ens.Z ** 2)))
    z_bound = 3.0 / np.sqrt(M) / np.sqrt(grid.dt)
    ok = y0_err <= y_bound and z_rms <= z_bound
    report(2, ok, f"|Y0-1|={y0_err:.2e}<={y_bound:.2e} Z_rms={z_rms:.2e}<={z_bound:.2e}")
    assert y0_err <= y_bound
    assert z_rms <= z_bound


# ---------------------------------------------------------------- 3

def test_c3_apriori_audits(report):
    ou, _ = builtin("decoupled_ou")
    bsde, _ = builtin("constant_driver_bsde")
    grid = make_grid(10.0, 10_000, -0.5)
    M = 10_000
    sde_data = SdeAuditData(kappa_x=1.0, K=-0.5, sigma_at_zero=lambda t: 1.0)
    bsde_data = BsdeAuditData(kappa_y=-1.0, K=-0.5, f_at_zero=lambda t: -1.0)
    rows = []
    for seed in range(1, 11):
        s = audit_sde_apriori(solve_sde(ou, SdeRunConfig(grid, M, seed, keep_paths=False)), sde_data, eps=0.1)
        b = audit_bsde_apriori(solve_bsde(bsde.driver, BsdeRunConfig(grid, M, seed)), bsde_data, eps=0.1)
        rows.append((s.lhs, s.rhs, s.flag, b.lhs, b.rhs, b.flag))
    rows = np.array(rows, dtype=float)
    sde_ok = bool(np.all(rows[:, 2] == 1.0))
    bsde_ok = bool(np.all(rows[:, 5] == 1.0))
    # hand-evaluated sides: 2.7 * 2/3 = 1.8 <= |x0|^2 + |sigma0|^2 = 2 and |Y0|^2 + 0.7 * 1 ~ 1.7 <= 1 / 0.1
    near_sde = np.allclose(rows[:, 0], 1.8, rtol=0.03) and np.allclose(rows[:, 1], 2.0, rtol=1e-3)
    near_bsde = np.allclose(rows[:, 3], 1.7, rtol=0.03) and np.allclose(rows[:, 4], 10.0, rtol=1e-2)
    ok = sde_ok and bsde_ok and near_sde and near_bsde
    report(3, ok, f"sde lhs in [{rows[:, 0].min():.4f},{rows[:, 0].max():.4f}] rhs={rows[0, 1]:.4f}; "
                  f"bsde lhs in [{rows[:, 3].min():.4f},{rows[:, 3].max():.4f}] rhs={rows[0, 4]:.4f}; "
                  f"flags {int(rows[:, 2].sum())}/10 {int(rows[:, 5].sum())}/10")
    assert sde_ok and bsde_ok
    assert near_sde and near_bsde


# ---------------------------------------------------------------- 4

def test_c4_homotopy_lq(lq_run, report):
    lq, grid, sol, trace, cost, seconds = lq_run
    levels_ok = all(lv["converged"] and lv["iterations"] <= 50 for lv in trace.levels)
    ric = riccati_lq(lq, grid)
    x0 = sol.x0[:, 0]
    # p0 x0 + pbar0 E[x0], averaged over the particles
    y0_ref = float(np.mean(ric.P[0, 0, 0] * x0 + ric.p_bar[0, 0, 0] * x0.mean()))
    y0 = float(sol.y0.mean())
    y0_rel = abs(y0 - y0_ref) / abs(y0_ref)
    value = ric.value(float(x0.mean()), float(np.var(x0)))
    J_ok = abs(cost.J - value) <= 0.02 * abs(value) + 3.0 * cost.std_error
    ok = levels_ok and y0_rel <= 0.05 and J_ok and seconds < 900.0
    report(4, ok, f"levels={len(trace.levels)} max_iter={max(lv['iterations'] for lv in trace.levels)} "
                  f"Y0={y0:.5f} ref={y0_ref:.5f} rel={y0_rel:.2e} J={cost.J:.5f}+-{cost.std_error:.5f} "
                  f"value={value:.5f} runtime={seconds:.0f}s")
    assert levels_ok
    assert y0_rel <= 0.05
    assert J_ok
    assert seconds < 900.0


# ---------------------------------------------------------------- 5

def test_c5_contraction_scaling(report):
    lq, constants = builtin("scalar_lq_meanfield")
    grid = make_grid(10.0, 100, lq.K)
    logs = {}
    for delta in (0.1, 0.05):
        cfg = PicardConfig(delta=delta, tol=1e-12, mode="nested", max_iter=50)
        _, trace = solve_fbsde(lq, constants, grid, 2000, cfg, seed=1)
        lams = sorted({lv["lambda"] for lv in trace.levels if lv["lambda"] > 0})
        ratios = [trace.contraction_ratio(lam, skip=0) for lam in lams]
        logs[delta] = float(np.nanmean(np.log(ratios)))
    quotient = float(np.exp(logs[0.05] - logs[0.1]))
    ok = 1.0 / 8.0 <= quotient <= 0.5
    report(5, ok, f"ratio(0.1)={np.exp(logs[0.1]):.3e} ratio(0.05)={np.exp(logs[0.05]):.3e} "
                  f"quotient={quotient:.3f} in [0.125, 0.5]")
    assert 1.0 / 8.0 <= quotient <= 0.5


# ---------------------------------------------------------------- 6

def test_c6_maximum_principle(report):
    lq, constants = builtin("scalar_lq_meanfield")
    grid = make_grid(10.0, 1000, lq.K)
    M = 20_000
    cfg = PicardConfig(delta=0.1, tol=1e-4, warm_start_coarsening=10)
    sol, _ = solve_fbsde(lq, constants, grid, M, cfg, seed=1)
    rng = np.random.default_rng(2024)
    etas = [smooth_perturbation(rng) for _ in range(20)]
    rep = verify_optimality(feedback_from_field(lq, sol.field), lq, etas, grid, M, seed=1, eps=(0.1, 0.3))
    ok = rep.all_flags and rep.strictly_greater >= 15
    worst = min(e["delta_J"] / e["std_error"] for e in rep.entries)
    report(6, ok, f"all_flags={rep.all_flags} strictly_greater={rep.strictly_greater}/20 "
                  f"min dJ/se={worst:.2f}")
    assert rep.all_flags
    assert rep.strictly_greater >= 15


# ---------------------------------------------------------------- 7

def _bundle(kx, ky, ls, lz):
    from mvfbsde.coeffs import ConstantsBundle
    return ConstantsBundle(K=0.5 * (kx + ky), kappa_x=kx, kappa_y=ky, l=1.0, l_sigma=ls, l_z=lz, l_phi=0.0,
                           gamma=0.5, beta1=1.0, beta2=0.0, G=[[1.0]])


def test_c7_gate_checker(report):
    worked = gates_pass(check_parameter_gate(_bundle(1.0, -2.0, 0.5, 0.5)))
    lq_bad, c_bad = builtin("scalar_lq_meanfield", K=0.9)
    bad = check_parameter_gate(c_bad, "lq_control", lq=lq_bad)
    bad_fails = not bad[0].passed and bad[0].name == "linear_convex_K"
    base = scalar_lq(-1.0, 0.2, 1.0, 0.5, 1.0, 1.0, -0.1)
    cross = scalar_lq(-1.0, 0.2, 1.0, 0.5, 1.0, 1.0, -0.1, s=0.5)
    # Q - S^2/R = 0.75 >= lambda
    convex = cross.state_convexity() > 0
    same_sides = lq_gate_sides(cross) == lq_gate_sides(base)
    cross_passes = gates_pass(check_parameter_gate(lq_constants(cross), "lq_control", lq=cross))
    ok = worked and bad_fails and convex and same_sides and cross_passes
    report(7, ok, f"worked={worked} K=0.9 fails ({bad[0].lhs:g} vs {bad[0].rhs:g})={bad_fails} "
                  f"S!=0 sides unchanged={same_sides} passes={cross_passes}")
    assert worked and bad_fails
    assert convex and same_sides and cross_passes


# ---------------------------------------------------------------- 8

def test_c8_monotonicity_transfer(report):
    lq, constants = builtin("scalar_lq_meanfield")
    assert constants.beta2 == pytest.approx(2.0 * lq.lam_conv)
    ok_rep = check_h2_monotonicity(lq, constants, pairs=10_000)
    loud = constants.with_(beta2=10.0 * constants.beta2)
    bad_rep = check_h2_monotonicity(lq, loud, pairs=10_000)
    replayed = replay(bad_rep, lq, loud) if bad_rep.violating_pair else float("nan")
    replay_ok = bad_rep.violating_pair is not None and replayed == pytest.approx(
        bad_rep.violating_pair["margin"], rel=1e-12) and replayed < -bad_rep.violating_pair["check_tol"]
    ok = ok_rep.verdict == "certified-by-sampling" and bad_rep.verdict == "falsified" and replay_ok
    report(8, ok, f"beta2={constants.beta2:g}: {ok_rep.verdict} (worst {ok_rep.worst_margin:.2e}); "
                  f"x10: {bad_rep.verdict}, replayed margin {replayed:.4f}")
    assert ok_rep.verdict == "certified-by-sampling"
    assert bad_rep.verdict == "falsified"
    assert replay_ok


# ---------------------------------------------------------------- 9

def test_c9_tail_vanishing(ou_run, bsde_run, lq_run, report):
    profiles = {}
    _, ens, _ = ou_run
    profiles["decoupled_ou"] = (ens.grid, {"X": ens.mean_sq["X"]})
    grid, _, ens = bsde_run
    profiles["constant_driver_bsde"] = (grid, {"Y": ens.mean_sq["Y"]})
    _, grid, sol, _, _, _ = lq_run
    profiles["scalar_lq_meanfield"] = (grid, {k: sol.ensemble.mean_sq[k] for k in ("X", "Y")})
    spec, constants = builtin("drift_control_constant_sigma")
    lq = spec.lq
    g = make_grid(10.0, 1000, lq.K)
    sol, _ = solve_fbsde(spec, constants, g, 10_000, PicardConfig(delta=0.1, tol=1e-4, warm_start_coarsening=10),
                         seed=1)
    profiles["drift_control_constant_sigma"] = (g, {k: sol.ensemble.mean_sq[k] for k in ("X", "Y")})
    from mvfbsde.core import tail_from_profile
    failures, lines = [], []
    for name in BUILTINS:
        problem, c = builtin(name)
        lq_ = problem if isinstance(problem, LQSpec) else getattr(problem, "lq", None)
        verdicts = check_parameter_gate(c, "lq_control" if lq_ is not None else "fbsde", lq=lq_)
        if not gates_pass(verdicts):
            lines.append(f"{name}: not gated, skipped")
            continue
        g_, profs = profiles[name]
        for comp, prof in profs.items():
            tail = tail_from_profile(prof, g_)
            lines.append(f"{name}.{comp}: terminal={tail.terminal:.3e} decreasing={tail.decreasing}")
            if not (tail.terminal < 1e-4 and tail.decreasing):
                failures.append(f"{name}.{comp}")
    report(9, not failures, "; ".join(lines))
    assert not failures, f"tail does not vanish for {failures}"


# ---------------------------------------------------------------- 10

def test_c10_stability_estimate(report):
    lq, constants = builtin("scalar_lq_meanfield")
    bumped = replace(lq, Q=lq.Q + 0.05 * np.eye(1), lam_conv=None)
    cfg = PicardConfig(delta=0.1, tol=1e-4, warm_start_coarsening=10)
    ratios = []
    for dt in (1e-2, 5e-3, 2.5e-3):
        grid = make_grid(10.0, int(round(10.0 / dt)), lq.K)
        a, _ = solve_fbsde(lq, constants, grid, 10_000, cfg, seed=1)
        b, _ = solve_fbsde(bumped, lq_constants(bumped), grid, 10_000, cfg, seed=1)
        ratios.append(audit_stability(a, b, lq, bumped).coef)
    ratios = np.array(ratios)
    finite = bool(np.all(np.isfinite(ratios)) and np.all(ratios > 0))
    stable = finite and ratios.max() / ratios.min() <= 2.0
    report(10, stable, "ratios " + ", ".join(f"{r:.4e}" for r in ratios))
    assert finite
    assert stable
