import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mvfbsde.coeffs import builtin
from mvfbsde.control import (argmin_bound, evaluate_cost, hamiltonian, linear_feedback, minimize_hamiltonian,
                             psi_term, smooth_perturbation, verify_optimality)
from mvfbsde.core import EmpiricalLaw, make_grid
from mvfbsde.errors import ArgminDiverged
from mvfbsde.oracle import riccati_lq


def _quartic_spec(r=1.0):
    """Same dynamics as the interaction builtin, running cost r a^2/2 + a^4/4 in the control."""
    spec, _ = builtin("drift_control_constant_sigma")
    base_f = spec.f

    def f(t, x, mu, a):
        return base_f(t, x, mu, np.zeros_like(a)) + np.sum(0.5 * r * a * a + 0.25 * a ** 4, axis=1)

    def dalpha_f(t, x, mu, a):
        return r * a + a ** 3

    return dataclasses.replace(spec, f=f, dalpha_f=dalpha_f, closed_form=None, lq=None, lam_conv=0.5 * r)


def _cubic_root(c):
    """Real root of a^3 + a + c = 0 via numpy's companion matrix."""
    roots = np.roots([1.0, 0.0, 1.0, c])
    return float(roots[np.argmin(np.abs(roots.imag))].real)


def test_numeric_argmin_matches_closed_form():
    spec, _ = builtin("drift_control_constant_sigma")
    rng = np.random.default_rng(0)
    x, y, z = rng.standard_normal((30, 1)), rng.standard_normal((30, 1)), rng.standard_normal((30, 1, 1))
    law = EmpiricalLaw(x)
    a_cf = minimize_hamiltonian(0.0, x, y, z, law, spec, method="closed_form")
    a_num = minimize_hamiltonian(0.0, x, y, z, law, spec, method="numeric")
    assert np.allclose(a_cf, a_num, atol=1e-8)
    assert np.allclose(a_cf, -y)


@settings(max_examples=25, deadline=None)
@given(y=st.floats(-5, 5))
def test_numeric_argmin_nonquadratic(y):
    spec = _quartic_spec()
    x = np.zeros((2, 1))
    ys = np.array([[y], [-y]])
    a = minimize_hamiltonian(0.0, x, ys, np.zeros((2, 1, 1)), EmpiricalLaw(x), spec)
    # stationarity: a + a^3 + b y = 0 with b = 1
    assert a[0, 0] == pytest.approx(_cubic_root(y), abs=1e-7)
    assert a[1, 0] == pytest.approx(-a[0, 0], abs=1e-7)
    bound = argmin_bound(0.0, x, EmpiricalLaw(x), ys, np.zeros((2, 1, 1)), spec)
    assert np.all(np.abs(a[:, 0]) <= bound + 1e-12)


def test_argmin_is_a_minimum():
    spec = _quartic_spec()
    rng = np.random.default_rng(1)
    x, y, z = rng.standard_normal((10, 1)), 3 * rng.standard_normal((10, 1)), np.zeros((10, 1, 1))
    law = EmpiricalLaw(x)
    a = minimize_hamiltonian(0.0, x, y, z, law, spec)
    h0 = hamiltonian(0.0, x, law, y, z, a, spec)
    for d in (-1e-3, 1e-3):
        assert np.all(hamiltonian(0.0, x, law, y, z, a + d, spec) >= h0)


def test_argmin_diverged_on_iteration_cap():
    spec = _quartic_spec()
    x = np.zeros((2, 1))
    with pytest.raises(ArgminDiverged):
        minimize_hamiltonian(0.0, x, np.full((2, 1), 1e6), np.zeros((2, 1, 1)), EmpiricalLaw(x), spec, max_iter=2)


def test_psi_term_matches_pairwise_sum():
    spec, _ = builtin("drift_control_constant_sigma")
    rng = np.random.default_rng(2)
    xs, al = rng.standard_normal((300, 1)), rng.standard_normal((300, 1))
    law = EmpiricalLaw(xs)
    fast = psi_term(spec, 0.0, xs, law, al)
    slow = psi_term(dataclasses.replace(spec, psi=None), 0.0, xs, law, al)
    brute = np.array([[np.mean(spec.dmu_f(0.0, xs, law, al, xe[None, :]))] for xe in xs])
    assert np.allclose(fast, slow, atol=1e-12)
    assert np.allclose(slow, brute, atol=1e-12)


@pytest.fixture(scope="module")
def riccati_policy():
    lq, _ = builtin("scalar_lq_meanfield")
    grid = make_grid(5.0, 250, lq.K)
    ric = riccati_lq(lq, grid)
    return lq, grid, ric, linear_feedback(lambda t: ric.at(t, "gain"), lambda t: ric.at(t, "gain_mean"))


def test_cost_is_reproducible_and_near_value(riccati_policy):
    lq, grid, ric, policy = riccati_policy
    a = evaluate_cost(policy, lq, grid, 4000, seed=5)
    b = evaluate_cost(policy, lq, grid, 4000, seed=5)
    assert a.J == b.J and a.std_error == b.std_error
    assert a.J != evaluate_cost(policy, lq, grid, 4000, seed=6).J
    # x0 ~ N(1, 0.25); left-point Euler bias O(dt) on top of sampling error
    value = ric.value(1.0, 0.25)
    assert abs(a.J - value) < 0.02 * value + 3 * a.std_error
    # tail bound e^{2KT} |mean f(T-)| / (-2K), and the running cost near T is below 1
    assert 0 < a.truncation_bound < np.exp(2 * lq.K * grid.T) / (-2 * lq.K)


def test_verify_optimality_small(riccati_policy):
    lq, grid, _, policy = riccati_policy
    rng = np.random.default_rng(3)
    etas = [smooth_perturbation(rng) for _ in range(6)]
    rep = verify_optimality(policy, lq, etas, grid, 2000, seed=1)
    assert rep.all_flags
    assert rep.strictly_greater >= 5
    assert len(rep.entries) == 12
    assert all(e["ray_convex"] for e in rep.entries)
