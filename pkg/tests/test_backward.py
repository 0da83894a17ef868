import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mvfbsde.backward import (Basis, BsdeAuditData, BsdeRunConfig, DecouplingField, StepRegression,
                              audit_bsde_apriori, solve_bsde)
from mvfbsde.coeffs import builtin
from mvfbsde.core import make_grid
from mvfbsde.errors import GateViolated, IllConditionedRegression
from mvfbsde.forward import SdeRunConfig, solve_sde
from mvfbsde.oracle import linear_ode_backward


def test_constant_driver_fixed_point():
    coeffs, _ = builtin("constant_driver_bsde")
    g = make_grid(10.0, 1000, -0.5)
    ens = solve_bsde(coeffs.driver, BsdeRunConfig(g, 500, seed=1))
    # Y_t = 1 - e^{t-T}: |Y0 - 1| is the truncation e^{-10} plus O(dt)
    assert abs(ens.Y[0, 0, 0] - 1.0) <= 5 * (g.dt + np.exp(-10.0))
    assert np.sqrt(np.mean(ens.Z ** 2)) < 1e-10


def test_mean_field_driver_against_ode():
    # f = -y + 0.5 E[Y] + cos(t): with no state dependence E[Y] solves mu' = -0.5 mu + cos(t)
    g = make_grid(4.0, 4000, 0.0)

    def driver(t, x, y, z, law):
        return -y + 0.5 * law.mean_y + np.cos(t)

    ens = solve_bsde(driver, BsdeRunConfig(g, 50, seed=0))
    ref = linear_ode_backward(-0.5, np.cos, 4.0, g.nodes)
    assert np.max(np.abs(ens.Y[:, 0, 0] - ref)) < 5 * g.dt * np.max(np.abs(ref)) + 1e-3


def test_ou_linear_driver_decoupling_field():
    # dX = -X dt + 0.5 dW, f = y - x, Y_T = 0: Y = a(t) X with a' = 2a - 1, Z = 0.5 a
    g = make_grid(3.0, 600, 0.0)
    kappa, sigma = 1.0, 0.5

    def drift(t, x, law):
        return -kappa * x

    def vol(t, x, law):
        return np.array([[sigma]])

    fwd = solve_sde((drift, vol, 1), SdeRunConfig(g, 20000, seed=3),
                    initial=lambda rng, M: 1.0 + 0.3 * rng.standard_normal((M, 1)))
    ens = solve_bsde(lambda t, x, y, z, law: y - x, BsdeRunConfig(g, 20000, seed=3), forward=fwd)
    a = linear_ode_backward(1.0 + kappa, lambda s: -1.0, 3.0, g.nodes)
    field = ens.meta["field"]
    xs = np.linspace(0.0, 2.0, 5)[:, None]
    assert np.allclose(field.y(0, xs)[:, 0], a[0] * xs[:, 0], atol=0.02)
    z0 = field.z(0, xs)[:, 0, 0]
    assert np.allclose(z0, sigma * a[0], atol=0.03)


def test_bsde_audit_worked_sides():
    coeffs, _ = builtin("constant_driver_bsde")
    g = make_grid(10.0, 1000, -0.5)
    ens = solve_bsde(coeffs.driver, BsdeRunConfig(g, 200, seed=2))
    rep = audit_bsde_apriori(ens, BsdeAuditData(kappa_y=-1.0, K=-0.5, f_at_zero=lambda t: -1.0), eps=0.1)
    # c_y = 2K - 2 kappa_y - 3 eps = 0.7; RHS = ||1||_K^2 / eps ~ 10
    assert rep.coef == pytest.approx(0.7)
    assert rep.rhs == pytest.approx(10.0 * g.dt * np.sum(np.exp(-g.nodes[:-1])), rel=1e-12)
    assert rep.lhs == pytest.approx(1.7, abs=0.05)
    assert rep.flag
    with pytest.raises(GateViolated):
        audit_bsde_apriori(ens, BsdeAuditData(kappa_y=-0.4, K=-0.5))


def test_basis_sizes():
    assert Basis(1, 0).size == 1
    assert Basis(1, 3).size == 4
    assert Basis(2, 2).size == 6
    assert Basis.parse("sample_mean", 2).degree == 0
    assert Basis.parse(("polynomial", 3), 1).degree == 3
    with pytest.raises(ValueError):
        Basis(1, 5)


@settings(max_examples=30, deadline=None)
@given(coef=st.lists(st.floats(-3, 3), min_size=3, max_size=3), seed=st.integers(0, 1000))
def test_regression_reproduces_quadratics(coef, seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((200, 1)) * 2 + 1
    vals = coef[0] + coef[1] * x[:, 0] + coef[2] * x[:, 0] ** 2
    reg = StepRegression(Basis(1, 2), x, 200)
    fit = reg.predict(reg.fit(vals[:, None]))[:, 0]
    assert np.allclose(fit, vals, atol=1e-8 * (1 + np.abs(vals).max()))


def test_degenerate_state_falls_back_to_mean():
    x = np.full((50, 1), 3.0)
    reg = StepRegression(Basis(1, 2), x, 50)
    assert reg.mask.tolist() == [True, False, False]
    v = np.arange(50.0)[:, None]
    assert np.allclose(reg.predict(reg.fit(v)), v.mean())


def test_ill_conditioned_regression():
    # three distinct states cannot identify a cubic
    x = np.tile([0.0, 1.0, 2.0], 300)[:, None]
    with pytest.raises(IllConditionedRegression):
        StepRegression(Basis(1, 3), x, 1000)


def test_field_resample_piecewise_constant():
    f = DecouplingField(Basis(1, 1), 4, 1, 1)
    f.y_coef[:, 0, 0] = np.arange(5.0)
    f.z_coef[:, 0, 0] = np.arange(4.0)
    r = f.resample(8)
    assert r.y_coef[:, 0, 0].tolist() == [0, 0, 1, 1, 2, 2, 3, 3, 4]
    assert r.z_coef[:, 0, 0].tolist() == [0, 0, 1, 1, 2, 2, 3, 3]
