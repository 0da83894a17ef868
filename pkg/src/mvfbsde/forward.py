"""Euler-Maruyama for McKean-Vlasov SDEs and the forward a priori audit."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .coeffs import CoefficientSet
from .core import (
    AuditReport,
    EmpiricalLaw,
    NoiseSource,
    PathEnsemble,
    ProfileAccumulator,
    TimeGrid,
    audit_slack,
)
from .errors import GateViolated, NonFiniteState

BLOWUP = 1e12


@dataclass
class SdeRunConfig:
    """Run parameters for a forward solve.

    ``keep_paths=False`` streams the solution: only per-node mean squares
    are kept, which is what norms, tails and audits need.
    """

    grid: TimeGrid
    M: int
    seed: int = 0
    keep_paths: bool = True

    def __post_init__(self):
        if self.M < 2:
            raise ValueError("M must be at least 2")


def apply_vol(vol: np.ndarray, dw: np.ndarray) -> np.ndarray:
    """sigma . dW for vol of shape (M, n, d) (or broadcastable) and dW of shape (M, d)."""
    if vol.shape[-2:] == (1, 1):
        return vol[..., 0, 0][..., None] * dw if vol.ndim == 3 else vol[0, 0] * dw
    return np.einsum("mij,mj->mi", np.broadcast_to(vol, (dw.shape[0],) + vol.shape[-2:]), dw)


def check_finite(x: np.ndarray, i: int) -> None:
    peak = np.max(np.abs(x))
    if not peak <= BLOWUP:
        raise NonFiniteState(f"state left the finite range at step {i} (max |X| = {peak:g})")


def euler_march(x0: np.ndarray, grid: TimeGrid, noise: NoiseSource, coefficients: Callable,
                visit: Optional[Callable] = None, start: int = 0, stop: Optional[int] = None) -> np.ndarray:
    """Advance ``x0`` from node ``start`` to node ``stop``.

    ``coefficients(i, t, x)`` returns (drift, vol) for the current slice and
    ``visit(i, x)`` sees every node, including both endpoints.
    """
    stop = grid.N if stop is None else stop
    dt = grid.dt
    x = x0
    for i in range(start, stop):
        if visit is not None:
            visit(i, x)
        b, s = coefficients(i, grid.nodes[i], x)
        x = x + b * dt + apply_vol(np.asarray(s), noise.increments(i))
        check_finite(x, i + 1)
    if visit is not None:
        visit(stop, x)
    return x


def _law_coefficients(coeffs, n: int):
    """Adapt a CoefficientSet (with y = z = 0) or a (drift, vol) pair to the stepping interface."""
    if isinstance(coeffs, CoefficientSet):
        m, d = coeffs.m, coeffs.d

        def step(i, t, x):
            y = np.zeros((x.shape[0], m))
            z = np.zeros((x.shape[0], m, d))
            law = EmpiricalLaw(x, y, z)
            return coeffs.drift(t, x, y, z, law), coeffs.vol(t, x, y, z, law)
        return step, coeffs.d
    drift, vol, d = coeffs

    def step(i, t, x):
        law = EmpiricalLaw(x)
        return np.broadcast_to(drift(t, x, law), x.shape), np.asarray(vol(t, x, law))
    return step, d


def solve_sde(coeffs, cfg: SdeRunConfig, initial: Optional[Callable] = None,
              monitors: Sequence = ()) -> PathEnsemble:
    """Euler-Maruyama with the empirical law of the current slice.

    ``coeffs`` is a CoefficientSet (its forward leg, with y and z set to
    zero) or a triple ``(drift, vol, d)`` of callables ``(t, x, law)``.
    ``initial`` samples X_0; the coefficient set's own sampler is the default.
    """
    grid = cfg.grid
    if initial is None:
        initial = coeffs.xi if isinstance(coeffs, CoefficientSet) else None
    if initial is None:
        raise ValueError("an initial sampler is required")
    noise_d = coeffs.d if isinstance(coeffs, CoefficientSet) else coeffs[2]
    x0 = np.asarray(initial(NoiseSource(cfg.seed, cfg.M, noise_d, grid.dt).initial(), cfg.M), dtype=float)
    if x0.ndim == 1:
        x0 = x0[:, None]
    n = x0.shape[1]
    step, d = _law_coefficients(coeffs, n)
    noise = NoiseSource(cfg.seed, cfg.M, d, grid.dt)
    acc = ProfileAccumulator(grid.N + 1)
    paths = np.empty((grid.N + 1, cfg.M, n)) if cfg.keep_paths else None

    def visit(i, x):
        acc.update(i, x)
        if paths is not None:
            paths[i] = x
        for mon in monitors:
            mon(i, x)

    x_end = euler_march(x0, grid, noise, step, visit)
    ens = PathEnsemble(grid=grid, M=cfg.M, dims=(n, 0, d), seed=cfg.seed, X=paths, mean_sq={"X": acc.profile})
    ens.meta["x0_second_moment"] = float(np.mean(np.sum(x0 * x0, axis=1)))
    ens.meta["x_terminal"] = x_end
    return ens


@dataclass
class SdeAuditData:
    kappa_x: float
    K: float
    l_sigma_x: float = 0.0
    l_sigma_mu: float = 0.0
    l_b_mu: float = 0.0
    b_at_zero: Callable = lambda t: 0.0
    sigma_at_zero: Callable = lambda t: 0.0

    def gate_margin(self) -> float:
        return self.kappa_x - self.K - 0.5 * (self.l_sigma_x + self.l_sigma_mu) ** 2 - self.l_b_mu

    def default_eps(self) -> float:
        return self.gate_margin() / 6.0


def _sq(v) -> float:
    v = np.asarray(v, dtype=float)
    return float(np.sum(v * v))


def audit_sde_apriori(X: PathEnsemble, data: SdeAuditData, eps: Optional[float] = None,
                      slack: Optional[float] = None) -> AuditReport:
    """Check coef * ||X||_K^2 <= E|x0|^2 + int e^{2Ks}[|b(s,0)|^2/eps + (1 + (lsx^2+lsm^2)/eps)|sigma(s,0)|^2] ds

    with coef = 2 kappa_x - 2K - 2 l_b_mu - (l_sigma_x + l_sigma_mu)^2 - 3 eps.
    """
    eps = data.default_eps() if eps is None else eps
    coef = (2.0 * data.kappa_x - 2.0 * data.K - 2.0 * data.l_b_mu
            - (data.l_sigma_x + data.l_sigma_mu) ** 2 - 3.0 * eps)
    if eps <= 0 or coef <= 0:
        raise GateViolated(f"forward estimate coefficient {coef:g} is not positive (eps={eps:g})", module="forward")
    grid = X.grid
    lhs = coef * X.norm("X").value
    x0_sq = X.meta.get("x0_second_moment")
    if x0_sq is None:
        x0_sq = float(X.mean_sq["X"][0])
    t = grid.nodes[: grid.N]
    w = grid.weights[: grid.N]
    vol_factor = 1.0 + (data.l_sigma_x ** 2 + data.l_sigma_mu ** 2) / eps
    integrand = np.array([_sq(data.b_at_zero(s)) / eps + vol_factor * _sq(data.sigma_at_zero(s)) for s in t])
    rhs = x0_sq + grid.dt * float(np.sum(w * integrand))
    sl = audit_slack(grid.dt, X.M) if slack is None else slack
    return AuditReport(lhs=lhs, rhs=rhs, coef=coef, flag=bool(lhs <= rhs * (1.0 + sl)), slack=sl,
                       extra={"eps": eps})
