"""Regression-based backward induction for McKean-Vlasov BSDEs and the backward audit.

The solution is carried as a decoupling field: at every node the value Y_i
is a polynomial in the (standardised) forward state, and Z_i likewise on
every step interval. The scheme is explicit,

    Z_i = E[(Y_{i+1} - Yhat_i) dW_i^T | X_i] / dt,   Yhat_i = E[Y_{i+1} | X_i],
    Y_i = Yhat_i - dt * P_i[f(t_i, X_i, Yhat_i, Z_i, law_i)],

where P_i is the least-squares projection on the basis at step i. The
projection of the driver keeps Y_i inside the span, so the field is exact
for drivers that are affine in the basis.
"""
from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations_with_replacement
from typing import Callable, Optional, Union

import numpy as np

from .core import AuditReport, EmpiricalLaw, NoiseSource, PathEnsemble, TimeGrid, audit_slack
from .errors import GateViolated, IllConditionedRegression, ShapeMismatch

COND_LIMIT = 1e12
DEGENERATE = 1e-12


class Basis:
    """Total-degree polynomial basis in the standardised state; degree 0 is the sample mean."""

    def __init__(self, n: int, degree: int = 2):
        if degree not in (0, 1, 2, 3):
            raise ValueError("polynomial degree must be 0 (sample mean) or 1..3")
        self.n = n
        self.degree = degree
        self.monomials = [()]
        for p in range(1, degree + 1):
            self.monomials += list(combinations_with_replacement(range(n), p))
        self.size = len(self.monomials)

    @classmethod
    def parse(cls, spec: Union[str, tuple, int, "Basis", None], n: int) -> "Basis":
        if isinstance(spec, Basis):
            return spec
        if spec is None or spec == "sample_mean":
            return cls(n, 0)
        if isinstance(spec, int):
            return cls(n, spec)
        if isinstance(spec, tuple) and spec[0] == "polynomial":
            return cls(n, int(spec[1]))
        if isinstance(spec, str) and spec.startswith("polynomial"):
            return cls(n, int(spec.strip("polynomial()") or 2))
        raise ValueError(f"unknown basis {spec!r}")

    def features(self, x: np.ndarray, center: np.ndarray, scale: np.ndarray) -> np.ndarray:
        # built feature-major and returned transposed: contiguous column writes
        M = x.shape[0]
        At = np.empty((self.size, M))
        At[0] = 1.0
        if self.degree == 0:
            return At.T
        s = (x - center) / scale
        if self.n == 1:
            At[1] = s[:, 0]
            for p in range(2, self.degree + 1):
                np.multiply(At[p - 1], At[1], out=At[p])
            return At.T
        for j, mono in enumerate(self.monomials[1:], start=1):
            v = At[j]
            v[:] = s[:, mono[0]]
            for k in mono[1:]:
                v *= s[:, k]
        return At.T

    def active(self, degenerate: np.ndarray) -> np.ndarray:
        """Columns that do not involve a degenerate (zero-spread) coordinate."""
        return np.array([not any(degenerate[k] for k in mono) for mono in self.monomials])


class StepRegression:
    """Least squares on one time slice, factorised once for several right-hand sides."""

    def __init__(self, basis: Basis, x: Optional[np.ndarray], M: int):
        self.basis = basis
        n = basis.n
        if x is None or basis.degree == 0:
            self.center = np.zeros(n)
            self.scale = np.ones(n)
            self.mask = np.zeros(basis.size, dtype=bool)
            self.mask[0] = True
            self.A = np.ones((M, 1)) if basis.degree == 0 else basis.features(np.zeros((M, n)), self.center, self.scale)
        else:
            self.center = x.mean(axis=0)
            spread = x.std(axis=0)
            degenerate = spread <= DEGENERATE * (1.0 + np.abs(self.center))
            self.scale = np.where(degenerate, 1.0, spread)
            self.mask = basis.active(degenerate)
            self.A = basis.features(x, self.center, self.scale)
        self.Aa = self.A[:, self.mask] if not self.mask.all() else self.A
        self.M = M
        gram = self.Aa.T @ self.Aa / M
        if gram.shape[0] > 1:
            cond = np.linalg.cond(gram)
            if not cond <= COND_LIMIT:
                raise IllConditionedRegression(f"normal equations condition number {cond:.3g} exceeds {COND_LIMIT:g}")
        self.gram_inv = np.linalg.inv(gram)

    def fit(self, values: np.ndarray) -> np.ndarray:
        """Coefficients (basis.size, r) for values of shape (M, r); inactive rows are zero."""
        v = values.reshape(values.shape[0], -1)
        coef_a = self.gram_inv @ (self.Aa.T @ v / self.M)
        if self.Aa is self.A:
            return coef_a
        coef = np.zeros((self.basis.size, v.shape[1]))
        coef[self.mask] = coef_a
        return coef

    def predict(self, coef: np.ndarray) -> np.ndarray:
        return self.A @ coef


class DecouplingField:
    """(Y, Z) as per-step regression polynomials of the forward state."""

    def __init__(self, basis: Basis, N: int, m: int, d: int):
        self.basis = basis
        self.N, self.m, self.d = N, m, d
        k, n = basis.size, basis.n
        self.y_coef = np.zeros((N + 1, k, m))
        self.z_coef = np.zeros((N, k, m * d))
        self.center = np.zeros((N + 1, n))
        self.scale = np.ones((N + 1, n))

    @classmethod
    def zero(cls, basis: Basis, N: int, m: int, d: int) -> "DecouplingField":
        return cls(basis, N, m, d)

    def features(self, i: int, x: np.ndarray) -> np.ndarray:
        return self.basis.features(x, self.center[i], self.scale[i])

    def y(self, i: int, x: np.ndarray, A: Optional[np.ndarray] = None) -> np.ndarray:
        A = self.features(i, x) if A is None else A
        return A @ self.y_coef[i]

    def z(self, i: int, x: np.ndarray, A: Optional[np.ndarray] = None) -> np.ndarray:
        A = self.features(i, x) if A is None else A
        return (A @ self.z_coef[i]).reshape(x.shape[0], self.m, self.d)

    def values(self, i: int, x: np.ndarray):
        """(y, z) at node i; z is zero at the terminal node."""
        A = self.features(i, x)
        y = A @ self.y_coef[i]
        if i < self.N:
            z = (A @ self.z_coef[i]).reshape(x.shape[0], self.m, self.d)
        else:
            z = np.zeros((x.shape[0], self.m, self.d))
        return y, z

    def set_step(self, i: int, reg: StepRegression, y_coef: np.ndarray, z_coef: Optional[np.ndarray]) -> None:
        self.center[i] = reg.center
        self.scale[i] = reg.scale
        self.y_coef[i] = y_coef
        if z_coef is not None:
            self.z_coef[i] = z_coef

    def copy(self) -> "DecouplingField":
        out = DecouplingField(self.basis, self.N, self.m, self.d)
        out.y_coef[:] = self.y_coef
        out.z_coef[:] = self.z_coef
        out.center[:] = self.center
        out.scale[:] = self.scale
        return out

    def resample(self, N: int) -> "DecouplingField":
        """Piecewise-constant transfer in time to a grid with N steps on the same horizon."""
        out = DecouplingField(self.basis, N, self.m, self.d)
        src = np.minimum((np.arange(N + 1) * self.N) // N, self.N)
        out.y_coef[:] = self.y_coef[src]
        out.center[:] = self.center[src]
        out.scale[:] = self.scale[src]
        zsrc = np.minimum((np.arange(N) * self.N) // N, self.N - 1)
        out.z_coef[:] = self.z_coef[zsrc]
        return out


def backward_step(i: int, t: float, x: Optional[np.ndarray], y_next: np.ndarray, dw: np.ndarray, dt: float,
                  driver: Callable, basis: Basis, M: int, m: int, d: int):
    """One explicit step of the scheme. Returns (reg, y_coef, z_coef, y_i, z_i)."""
    reg = StepRegression(basis, x, M)
    c_hat = reg.fit(y_next)
    y_hat = reg.predict(c_hat)
    resid = y_next - y_hat
    prod = (resid[:, :, None] * dw[:, None, :]).reshape(M, m * d) / dt
    z_coef = reg.fit(prod)
    z = reg.predict(z_coef).reshape(M, m, d)
    xs = x if x is not None else np.zeros((M, basis.n))
    f = np.broadcast_to(driver(i, t, xs, y_hat, z, EmpiricalLaw(xs, y_hat, z)), (M, m))
    y_coef = c_hat - dt * reg.fit(f)
    return reg, y_coef, z_coef, reg.predict(y_coef), z


def steady_terminal(driver: Callable, t: float, x: np.ndarray, m: int, d: int, iters: int = 50, h: float = 1e-6):
    """Y with driver(t, x, Y, 0, law) = 0, by per-particle Newton with a difference Jacobian."""
    M = x.shape[0]
    y = np.zeros((M, m))
    z = np.zeros((M, m, d))
    for _ in range(iters):
        f = np.broadcast_to(driver(t, x, y, z, EmpiricalLaw(x, y, z)), (M, m))
        if np.max(np.abs(f)) < 1e-12:
            break
        J = np.empty((M, m, m))
        for k in range(m):
            yp = y.copy()
            yp[:, k] += h
            J[:, :, k] = (np.broadcast_to(driver(t, x, yp, z, EmpiricalLaw(x, yp, z)), (M, m)) - f) / h
        y = y - np.linalg.solve(J, f[:, :, None])[:, :, 0]
    return y


@dataclass
class BsdeRunConfig:
    """Backward solve settings.

    ``terminal`` is a constant, a callable of the terminal state, or
    ``"steady"`` (the root of the driver at z = 0). ``basis`` is
    ``"sample_mean"``, ``("polynomial", p)`` or ``"auto"`` (polynomial of
    degree 2 when a forward ensemble is supplied, else the sample mean).
    """

    grid: TimeGrid
    M: int
    seed: int = 0
    m: int = 1
    d: int = 1
    terminal: Union[float, Callable, str] = 0.0
    basis: Union[str, tuple] = "auto"

    def __post_init__(self):
        if self.M < 2:
            raise ValueError("M must be at least 2")


def terminal_values(cfg: BsdeRunConfig, driver: Callable, x_T: np.ndarray) -> np.ndarray:
    M = x_T.shape[0]
    if isinstance(cfg.terminal, str):
        if cfg.terminal != "steady":
            raise ValueError(f"unknown terminal rule {cfg.terminal!r}")
        return steady_terminal(lambda t, x, y, z, law: driver(cfg.grid.N, t, x, y, z, law),
                               cfg.grid.T, x_T, cfg.m, cfg.d)
    if callable(cfg.terminal):
        return np.broadcast_to(np.asarray(cfg.terminal(x_T), dtype=float).reshape(M, -1), (M, cfg.m)).copy()
    return np.broadcast_to(np.asarray(cfg.terminal, dtype=float), (M, cfg.m)).copy()


def solve_bsde(driver: Callable, cfg: BsdeRunConfig, forward: Optional[PathEnsemble] = None,
               noise: Optional[NoiseSource] = None) -> PathEnsemble:
    """Backward induction for dY = f(t, X, Y, Z, law) dt + Z dW.

    ``driver(t, x, y, z, law)`` follows the coefficient convention. The
    Brownian increments are regenerated from ``noise`` (default: the
    stream of ``cfg.seed``), which is what a forward solve with the same
    seed used.
    """
    grid = cfg.grid
    M, m, d = cfg.M, cfg.m, cfg.d
    X = None if forward is None else forward.X
    if X is not None and X.shape[:2] != (grid.N + 1, M):
        raise ShapeMismatch(f"forward paths have shape {X.shape[:2]}, expected {(grid.N + 1, M)}")
    n = 1 if X is None else X.shape[2]
    basis_spec = cfg.basis
    if basis_spec == "auto":
        basis_spec = ("polynomial", 2) if X is not None else "sample_mean"
    basis = Basis.parse(basis_spec, n)
    noise = NoiseSource(cfg.seed, M, d, grid.dt) if noise is None else noise
    step_driver = lambda i, t, x, y, z, law: driver(t, x, y, z, law)  # noqa: E731

    Y = np.empty((grid.N + 1, M, m))
    Z = np.empty((grid.N, M, m, d))
    field = DecouplingField(basis, grid.N, m, d)
    x_T = X[grid.N] if X is not None else np.zeros((M, n))
    Y[grid.N] = terminal_values(cfg, step_driver, x_T)
    reg_T = StepRegression(basis, X[grid.N] if X is not None else None, M)
    field.set_step(grid.N, reg_T, reg_T.fit(Y[grid.N]), None)
    residual_means = np.empty(grid.N)
    for i in range(grid.N - 1, -1, -1):
        x_i = X[i] if X is not None else None
        reg, yc, zc, y_i, z_i = backward_step(i, grid.nodes[i], x_i, Y[i + 1], noise.increments(i), grid.dt,
                                              step_driver, basis, M, m, d)
        residual_means[i] = float(np.abs(np.mean(Y[i + 1] - reg.predict(reg.fit(Y[i + 1])))))
        field.set_step(i, reg, yc, zc)
        Y[i] = y_i
        Z[i] = z_i
    ens = PathEnsemble(grid=grid, M=M, dims=(n, m, d), seed=cfg.seed, X=X, Y=Y, Z=Z)
    ens.meta["field"] = field
    ens.meta["regression_residual_means"] = residual_means
    return ens


@dataclass
class BsdeAuditData:
    kappa_y: float
    K: float
    l_z: float = 0.0
    l_mu_y: float = 0.0
    l_mu_z: float = 0.0
    f_at_zero: Callable = lambda t: 0.0

    def gate_margin(self) -> float:
        return self.K - self.kappa_y - self.l_mu_y - self.l_z ** 2 - self.l_mu_z ** 2


def audit_bsde_apriori(YZ: PathEnsemble, data: BsdeAuditData, eps: float = 0.1,
                       slack: Optional[float] = None) -> AuditReport:
    """Check E|Y0|^2 + int e^{2Ks}[c_y |Y|^2 + c_z |Z|^2] ds <= ||f(., 0, 0)||_K^2 / eps with

    c_y = 2K - 2 kappa_y - 2 l_z^2 - 2 l_mu_z^2 - 2 l_mu_y - 3 eps and c_z = eps / (l_z^2 + l_mu_z^2 + eps).
    """
    if data.gate_margin() <= 0:
        raise GateViolated(f"backward gate fails: K - kappa_y - ... = {data.gate_margin():g}", module="backward")
    if eps <= 0:
        raise GateViolated("eps must be positive", module="backward")
    grid = YZ.grid
    c_y = 2 * data.K - 2 * data.kappa_y - 2 * data.l_z ** 2 - 2 * data.l_mu_z ** 2 - 2 * data.l_mu_y - 3 * eps
    c_z = eps / (data.l_z ** 2 + data.l_mu_z ** 2 + eps)
    lhs = float(YZ.mean_sq["Y"][0]) + c_y * YZ.norm("Y").value + c_z * YZ.norm("Z").value
    t = grid.nodes[: grid.N]
    f0 = np.array([_sq(data.f_at_zero(s)) for s in t])
    rhs = grid.dt * float(np.sum(grid.weights[: grid.N] * f0)) / eps
    sl = audit_slack(grid.dt, YZ.M) if slack is None else slack
    return AuditReport(lhs=lhs, rhs=rhs, coef=c_y, flag=bool(lhs <= rhs * (1.0 + sl) + 1e-14), slack=sl,
                       extra={"eps": eps, "coef_z": c_z})


def _sq(v) -> float:
    v = np.asarray(v, dtype=float)
    return float(np.sum(v * v))
