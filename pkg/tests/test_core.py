import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from mvfbsde.core import (EmpiricalLaw, NoiseSource, PathEnsemble, audit_slack, make_grid, mean_square_profile,
                          norm_from_profile, tail_weight_profile, w2_distance, weighted_sq_norm)
from mvfbsde.errors import (DimensionMismatch, Exact1dOnMultiD, NonPositiveHorizon, ShapeMismatch,
                            WeightOverflow)


def test_grid_basics():
    g = make_grid(2.0, 4, -0.5)
    assert g.dt == 0.5
    assert np.allclose(g.nodes, [0, 0.5, 1, 1.5, 2])
    assert np.allclose(g.weights, np.exp(-g.nodes))
    assert g.refine(3).N == 12 and g.coarsen(2).N == 2
    with pytest.raises(ShapeMismatch):
        g.coarsen(3)


@pytest.mark.parametrize("T,N", [(0.0, 10), (-1.0, 10), (1.0, 0), (1.0, 2.5)])
def test_grid_rejects_bad_horizon(T, N):
    with pytest.raises(NonPositiveHorizon):
        make_grid(T, N, 0.0)


def test_grid_rejects_overflowing_weight():
    with pytest.raises(WeightOverflow):
        make_grid(1000.0, 10, 1.0)


def test_norm_of_constant_path():
    # |f| = 1 everywhere: left-point sum of dt e^{2K t_i}
    g = make_grid(1.0, 1000, -0.5)
    paths = np.ones((g.N + 1, 3, 1))
    rep = weighted_sq_norm(paths, g)
    assert rep.value == pytest.approx(g.dt * np.sum(np.exp(-g.nodes[:-1])))
    assert rep.value == pytest.approx(1 - np.exp(-1.0), rel=1e-3)


def test_norm_length_mismatch():
    g = make_grid(1.0, 10, 0.0)
    with pytest.raises(ShapeMismatch):
        norm_from_profile(np.ones(5), g)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (11, 4, 2), elements=st.floats(-5, 5)), st.floats(-1.0, 1.0))
def test_norm_nonnegative_and_homogeneous(paths, K):
    g = make_grid(1.0, 10, K)
    v = weighted_sq_norm(paths, g).value
    assert v >= 0
    assert weighted_sq_norm(3.0 * paths, g).value == pytest.approx(9.0 * v, rel=1e-12, abs=1e-300)


def test_tail_profile_flags():
    g = make_grid(10.0, 100, -0.5)
    flat = np.ones((g.N + 1, 2, 1))
    rep = tail_weight_profile(flat, g)
    assert rep.decreasing and rep.terminal == pytest.approx(np.exp(-10.0)) and rep.flag
    grow = tail_weight_profile(np.ones((g.N + 1, 2, 1)), make_grid(10.0, 100, 0.1))
    assert not grow.decreasing and not grow.flag


def test_empirical_law_views():
    x = np.arange(6.0).reshape(3, 2)
    y = np.ones((3, 1))
    law = EmpiricalLaw(x, y)
    assert law.dim == 3 and law.M == 3
    assert np.allclose(law.mean, [2, 3, 1])
    assert law.second_moment == pytest.approx(np.mean(np.sum(x * x, 1)) + 1.0)
    with pytest.raises(ShapeMismatch):
        EmpiricalLaw(np.ones((1, 1)))


def test_w2_exact_vs_coupling():
    a = np.array([3.0, 1.0, 2.0])
    b = np.array([1.0, 2.0, 3.0])
    assert w2_distance(a, b) == 0.0
    assert w2_distance(a, b, mode="coupling_bound") == pytest.approx(np.sqrt(2.0))
    with pytest.raises(Exact1dOnMultiD):
        w2_distance(np.ones((3, 2)), np.ones((3, 2)), mode="exact1d")
    with pytest.raises(DimensionMismatch):
        w2_distance(np.ones((3, 2)), np.ones((3, 1)))


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, 8, elements=st.floats(-10, 10)), arrays(np.float64, 8, elements=st.floats(-10, 10)),
       st.permutations(range(8)))
def test_w2_properties(a, b, perm):
    d = w2_distance(a, b)
    assert d >= 0
    assert d == pytest.approx(w2_distance(b, a))
    # sorted coupling is optimal: never above any index coupling
    assert d <= w2_distance(a[list(perm)], b, mode="coupling_bound") + 1e-12
    assert w2_distance(a, a[list(perm)]) == 0.0


def test_noise_counter_based():
    ns = NoiseSource(7, 5, 2, 0.01)
    a = ns.increments(3)
    b = NoiseSource(7, 5, 2, 0.01).increments(3)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, ns.increments(4))
    assert not np.array_equal(a, NoiseSource(8, 5, 2, 0.01).increments(3))
    # the first particles of a larger ensemble see the same draws
    big = NoiseSource(7, 50, 2, 0.01).increments(3)
    assert np.array_equal(big[:5], a)


def test_noise_variance():
    inc = NoiseSource(1, 200000, 1, 0.01).increments(0)
    assert inc.var() == pytest.approx(0.01, rel=0.02)


def test_ensemble_profiles_and_slack():
    g = make_grid(1.0, 4, 0.0)
    X = np.ones((5, 3, 1))
    ens = PathEnsemble(g, 3, (1, 0, 1), 0, X=X)
    assert np.allclose(ens.mean_sq["X"], mean_square_profile(X))
    assert ens.norm("X").value == pytest.approx(1.0)
    assert audit_slack(0.01, 10000) == pytest.approx(0.08)
