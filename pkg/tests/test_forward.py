import numpy as np
import pytest

from mvfbsde.coeffs import builtin, constant_sampler
from mvfbsde.core import make_grid
from mvfbsde.errors import GateViolated, NonFiniteState
from mvfbsde.forward import SdeAuditData, SdeRunConfig, audit_sde_apriori, solve_sde
from mvfbsde.oracle import linear_ode_forward, ou_moments


def test_ou_profile_matches_oracle():
    coeffs, _ = builtin("decoupled_ou")
    g = make_grid(5.0, 500, -0.5)
    ens = solve_sde(coeffs, SdeRunConfig(g, 20000, seed=2, keep_paths=False))
    ref = ou_moments(1.0, 1.0, 1.0, -0.5, g)
    # Euler bias O(dt) plus Monte Carlo error of a few 1e-2
    assert np.max(np.abs(ens.mean_sq["X"] - ref["profile"])) < 0.05
    assert ens.norm("X").value == pytest.approx(ref["norm_discrete"], rel=0.03)


def test_streamed_and_stored_agree():
    coeffs, _ = builtin("decoupled_ou")
    g = make_grid(1.0, 50, -0.5)
    a = solve_sde(coeffs, SdeRunConfig(g, 300, seed=4, keep_paths=True))
    b = solve_sde(coeffs, SdeRunConfig(g, 300, seed=4, keep_paths=False))
    assert np.array_equal(a.mean_sq["X"], b.mean_sq["X"])
    assert np.array_equal(a.X[-1], b.meta["x_terminal"])
    c = solve_sde(coeffs, SdeRunConfig(g, 300, seed=5, keep_paths=False))
    assert not np.array_equal(a.mean_sq["X"], c.mean_sq["X"])


def test_mean_field_drift_mean_ode():
    # dX = (-X + 0.5 E[X]) dt + 0.3 dW: the mean solves m' = -0.5 m
    def drift(t, x, law):
        return -x + 0.5 * law.mean_x

    def vol(t, x, law):
        return np.array([[0.3]])

    g = make_grid(2.0, 200, 0.0)
    ens = solve_sde((drift, vol, 1), SdeRunConfig(g, 5000, seed=1), initial=constant_sampler(2.0))
    means = ens.X[:, :, 0].mean(axis=1)
    ref = linear_ode_forward(-0.5, lambda s: 0.0, 2.0, g.nodes, 2.0)
    # Euler bias O(dt) plus the averaged noise, 0.3 sqrt(T/M) ~ 6e-3
    assert np.max(np.abs(means - ref)) < 0.02


def test_blowup_raises():
    def drift(t, x, law):
        return x * x

    def vol(t, x, law):
        return np.zeros((1, 1))

    g = make_grid(5.0, 50, 0.0)
    with pytest.raises(NonFiniteState):
        solve_sde((drift, vol, 1), SdeRunConfig(g, 10, seed=0), initial=constant_sampler(10.0))


def test_sde_audit_sides_and_gate():
    coeffs, _ = builtin("decoupled_ou")
    g = make_grid(10.0, 1000, -0.5)
    ens = solve_sde(coeffs, SdeRunConfig(g, 5000, seed=3, keep_paths=False))
    data = SdeAuditData(kappa_x=1.0, K=-0.5, sigma_at_zero=lambda t: 1.0)
    rep = audit_sde_apriori(ens, data, eps=0.1)
    assert rep.coef == pytest.approx(2.7)
    # RHS = E|x0|^2 + left-point sum of e^{-t} |sigma0|^2 over [0, 10)
    assert rep.rhs == pytest.approx(1.0 + g.dt * np.sum(np.exp(-g.nodes[:-1])), rel=1e-12)
    assert rep.flag
    with pytest.raises(GateViolated):
        audit_sde_apriori(ens, SdeAuditData(kappa_x=-0.4, K=-0.5), eps=0.1)


def test_config_rejects_single_particle():
    with pytest.raises(ValueError):
        SdeRunConfig(make_grid(1.0, 10, 0.0), 1)
