import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mvfbsde.coeffs import (BUILTINS, CoefficientSet, LQSpec, PairSample, as_coefficients, builtin,
                            control_convexity, lq_constants, lq_gate_sides, lq_to_coefficients, scalar_lq,
                            validate_spec)
from mvfbsde.control import build_hamiltonian_system
from mvfbsde.core import EmpiricalLaw
from mvfbsde.errors import SingularR, UnknownProblem


def _random_state(rng, M, n, m, d):
    x = rng.standard_normal((M, n))
    y = rng.standard_normal((M, m))
    z = rng.standard_normal((M, m, d))
    return x, y, z, EmpiricalLaw(x, y, z)


def test_catalog_names_and_unknown():
    assert set(BUILTINS) == {"decoupled_ou", "constant_driver_bsde", "scalar_lq_meanfield",
                             "drift_control_constant_sigma"}
    with pytest.raises(UnknownProblem):
        builtin("nope")


def test_builtins_validate():
    for name in BUILTINS:
        problem, constants = builtin(name)
        rep = validate_spec(problem)
        assert rep.passed, (name, rep.failures)
        coeffs = as_coefficients(problem)
        assert isinstance(coeffs, CoefficientSet)


def test_singular_R():
    lq = scalar_lq(-1.0, 0.0, 1.0, 0.5, 1.0, 0.0, -0.1)
    with pytest.raises(SingularR):
        lq.R_inv()
    assert not validate_spec(lq).passed


def test_lq_closed_form_matches_generic_hamiltonian_system():
    """Closed-form LQ coefficients against the generic route with numeric argmin."""
    lq, _ = builtin("scalar_lq_meanfield", s=0.3)
    direct = lq_to_coefficients(lq)
    spec = dataclasses.replace(lq.control_spec(), closed_form=None)
    generic = build_hamiltonian_system(spec)
    rng = np.random.default_rng(3)
    x, y, z, law = _random_state(rng, 50, 1, 1, 1)
    for fn in ("drift", "driver", "vol"):
        a = getattr(direct, fn)(0.3, x, y, z, law)
        b = getattr(generic, fn)(0.3, x, y, z, law)
        assert np.allclose(a, b, atol=1e-7), fn


def test_interaction_cost_matches_its_lq_form():
    """The pairwise-interaction cost with its measure derivative equals the Q + Qbar rewriting."""
    spec, _ = builtin("drift_control_constant_sigma")
    generic = build_hamiltonian_system(spec)
    direct = lq_to_coefficients(spec.lq)
    rng = np.random.default_rng(5)
    x, y, z, law = _random_state(rng, 40, 1, 1, 1)
    for fn in ("drift", "driver", "vol"):
        assert np.allclose(getattr(direct, fn)(0.0, x, y, z, law), getattr(generic, fn)(0.0, x, y, z, law),
                           atol=1e-12), fn


def test_matrix_lq_coefficients_against_generic():
    lq = LQSpec(b0=[0.0, 0.0], b1=[[-1.0, 0.2], [0.0, -0.8]], b2=np.diag([0.1, 0.0]), b3=[[1.0], [0.5]],
                s0=[[0.3], [0.1]], s1=0.1 * np.eye(2)[:, None, :], s2=np.zeros((2, 1, 2)),
                s3=np.array([[[0.1]], [[0.0]]]), Q=np.eye(2), S=[[0.1, 0.0]], R=[[1.0]], K=-0.2,
                Qbar=0.1 * np.eye(2))
    direct = lq_to_coefficients(lq)
    generic = build_hamiltonian_system(dataclasses.replace(lq.control_spec(), closed_form=None))
    rng = np.random.default_rng(9)
    x, y, z, law = _random_state(rng, 30, 2, 2, 1)
    for fn in ("drift", "driver", "vol"):
        assert np.allclose(getattr(direct, fn)(0.1, x, y, z, law), getattr(generic, fn)(0.1, x, y, z, law),
                           atol=1e-6), fn


def test_control_convexity_values():
    assert control_convexity([[1.0]], [[0.0]], [[1.0]]) == pytest.approx(0.5)
    # [[1, s], [s, r - 2 lam]] psd  <=>  r - 2 lam >= s^2
    assert control_convexity([[1.0]], [[0.5]], [[1.0]]) == pytest.approx(0.375, abs=1e-12)
    assert control_convexity([[1.0]], [[2.0]], [[1.0]]) == 0.0


@settings(max_examples=40, deadline=None)
@given(a=st.floats(-2.0, -0.2), abar=st.floats(-0.3, 0.3), sig=st.floats(0.0, 1.0), frac=st.floats(0.05, 0.95))
def test_lq_constants_identities(a, abar, sig, frac):
    probe = scalar_lq(a, abar, 1.0, sig, 1.0, 1.0, 0.0)
    rhs = lq_gate_sides(probe)["rhs"]
    K = rhs - frac * (abs(rhs) + 0.5)
    lq = scalar_lq(a, abar, 1.0, sig, 1.0, 1.0, K)
    c = lq_constants(lq)
    assert c.K == pytest.approx(0.5 * (c.kappa_x + c.kappa_y), abs=1e-12)
    gap = rhs - K
    assert c.kappa_x - c.kappa_y == pytest.approx(gap, abs=1e-12)  # no multiplicative noise: s = 0
    assert 0.0 < c.gamma < 1.0
    assert c.beta2 == pytest.approx(2.0 * lq.lam_conv)


def test_lq_gate_sides_worked_example():
    lq, _ = builtin("scalar_lq_meanfield")
    sides = lq_gate_sides(lq)
    # -lam_max(2a)/2 - |abar| - 0 = 1 - 0.2
    assert sides["rhs"] == pytest.approx(0.8)
    assert sides["lhs"] == pytest.approx(-0.1)


def test_pair_sample_round_trip():
    rng = np.random.default_rng(0)
    x1, y1, x2, y2 = (rng.standard_normal((4, 1)) for _ in range(4))
    z1, z2 = rng.standard_normal((4, 1, 1)), rng.standard_normal((4, 1, 1))
    p = PairSample(0.2, x1, y1, z1, x2, y2, z2)
    q = PairSample.from_dict(p.to_dict())
    for f in ("x1", "y1", "z1", "x2", "y2", "z2"):
        assert np.array_equal(getattr(p, f), getattr(q, f))


def test_constants_reject_bad_gamma():
    _, c = builtin("decoupled_ou")
    with pytest.raises(ValueError):
        c.with_(gamma=1.0)
