"""Independent reference solutions: OU moments, linear ODE solutions and the mean-field LQ Riccati pair.

For the discounted mean-field LQ problem, substituting X~ = e^{Kt} X and
a~ = e^{Kt} a removes the discount and shifts the drift matrix to
A = b1 + K I. The optimal adjoint is then Y = P (X - E[X]) + Pi E[X] with

    -P'  = P A + A'P + sum_k C_k'P C_k + Q - L(P)' (R + sum_k D_k'P D_k)^{-1} L(P),
    L(P) = B'P + sum_k D_k'P C_k + S,

and Pi solving the same equation with A + b2, C_k + Cbar_k and Q + Qbar
in place of A, C_k and Q (the P-weighted noise terms keep P). Here
B = b3, C_k = s1[:, k, :], Cbar_k = s2[:, k, :], D_k = s3[:, k, :].
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.integrate import solve_ivp
from scipy.linalg import solve_continuous_are

from .coeffs import LQSpec, lq_gate_sides, lq_to_coefficients
from .core import EmpiricalLaw, TimeGrid
from .errors import GateViolated, RiccatiBlowup, UnsupportedLQ

BLOWUP = 1e12


# ---------------------------------------------------------------- OU

def ou_moments(kappa: float, sigma0: float, x0: float, K: float, grid: TimeGrid) -> dict:
    """Second-moment profile of dX = -kappa X dt + sigma0 dW, X_0 = x0, and its weighted norms.

    E|X_t|^2 = x0^2 e^{-2 kappa t} + sigma0^2 (1 - e^{-2 kappa t}) / (2 kappa). Integrating
    against e^{2Kt} term by term gives, on [0, T],

        x0^2 (1 - e^{-2(kappa-K)T}) / (2(kappa-K))
        + sigma0^2/(2 kappa) [ (e^{2KT} - 1)/(2K) - (1 - e^{-2(kappa-K)T})/(2(kappa-K)) ],

    whose T -> infinity limit (K < 0) is x0^2/(2(kappa-K)) + sigma0^2/(2 kappa) [1/(-2K) - 1/(2(kappa-K))].
    """
    if not kappa > K:
        raise GateViolated(f"OU oracle needs kappa > K, got kappa={kappa}, K={K}", module="oracle")
    t = grid.nodes
    T = grid.T
    decay = np.exp(-2.0 * kappa * t)
    if kappa != 0:
        stat = sigma0 ** 2 * (1.0 - decay) / (2.0 * kappa)
    else:
        stat = sigma0 ** 2 * t
    profile = x0 ** 2 * decay + stat
    r = 2.0 * (kappa - K)
    part_x = x0 ** 2 * (-np.expm1(-r * T)) / r
    wk = np.expm1(2.0 * K * T) / (2.0 * K) if K != 0 else T
    part_s = sigma0 ** 2 / (2.0 * kappa) * (wk - (-np.expm1(-r * T)) / r) if kappa != 0 else np.nan
    norm_T = part_x + part_s
    if sigma0 == 0:
        norm_inf = x0 ** 2 / r
    elif K < 0:
        norm_inf = x0 ** 2 / r + sigma0 ** 2 / (2.0 * kappa) * (1.0 / (-2.0 * K) - 1.0 / r)
    else:
        norm_inf = np.inf
    discrete = grid.dt * float(np.sum(grid.weights[:-1] * profile[:-1]))
    return {"profile": profile, "weighted_profile": grid.weights * profile, "norm_T": float(norm_T),
            "norm_inf": float(norm_inf), "norm_discrete": discrete}


# ---------------------------------------------------------------- linear ODE / BSDE references

def linear_ode_backward(a: float, g: Callable, T: float, t_eval: np.ndarray, terminal: float = 0.0) -> np.ndarray:
    """Solution of mu' = a mu + g(t) on [0, T] with mu(T) = terminal, sampled at ``t_eval``."""
    sol = solve_ivp(lambda s, u: -(a * u + g(T - s)), (0.0, T), [terminal], method="DOP853", rtol=1e-12,
                    atol=1e-14, dense_output=True)
    return sol.sol(T - np.asarray(t_eval))[0]


def linear_ode_forward(a: float, g: Callable, T: float, t_eval: np.ndarray, initial: float) -> np.ndarray:
    """Solution of mu' = a mu + g(t) on [0, T] with mu(0) = initial."""
    sol = solve_ivp(lambda t, u: a * u + g(t), (0.0, T), [initial], method="DOP853", rtol=1e-12, atol=1e-14,
                    dense_output=True)
    return sol.sol(np.asarray(t_eval))[0]


def bounded_fixed_point(a: float, c: float) -> float:
    """The constant solution of mu' = a mu + c (a != 0)."""
    return -c / a


# ---------------------------------------------------------------- Riccati

@dataclass
class RiccatiSolution:
    t: np.ndarray
    P: np.ndarray
    Pi: np.ndarray
    gain: np.ndarray
    gain_mean: np.ndarray
    T: float
    lq: LQSpec = field(repr=False)
    stationary_P: Optional[np.ndarray] = None
    stationary_Pi: Optional[np.ndarray] = None
    extensions: int = 0

    @property
    def p_bar(self) -> np.ndarray:
        return self.Pi - self.P

    def at(self, t: float, which: str = "P") -> np.ndarray:
        """Piecewise-constant lookup on the output grid (left node)."""
        arr = getattr(self, which)
        i = int(np.clip(np.searchsorted(self.t, t, side="right") - 1, 0, len(self.t) - 1))
        return arr[i]

    def adjoint(self, i: int, x: np.ndarray, mean_x: np.ndarray) -> np.ndarray:
        """Y = P (x - E[X]) + Pi E[X] at output node i."""
        return (x - mean_x) @ self.P[i].T + mean_x @ self.Pi[i].T

    def control(self, i: int, x: np.ndarray, mean_x: np.ndarray) -> np.ndarray:
        return x @ self.gain[i].T + mean_x @ self.gain_mean[i].T

    def value(self, mean0, cov0) -> float:
        """Optimal discounted cost on [0, T] for an initial law with the given mean and covariance."""
        lq = self.lq
        m0 = np.atleast_1d(np.asarray(mean0, dtype=float))
        cov0 = np.atleast_2d(np.asarray(cov0, dtype=float))
        v = 0.5 * (np.trace(self.P[0] @ cov0) + m0 @ self.Pi[0] @ m0)
        if np.any(lq.s0 != 0):
            w = np.exp(2.0 * lq.K * self.t)
            integrand = w * np.einsum("ik,lij,jk->l", lq.s0, self.P, lq.s0)
            v += 0.5 * _trapezoid(integrand, self.t)
        return float(v)


def _trapezoid(y, x):
    return float(np.sum(0.5 * (y[1:] + y[:-1]) * np.diff(x)))


def _matrices(lq: LQSpec):
    n, m, d = lq.dims
    A = lq.b1 + lq.K * np.eye(n)
    C = [lq.s1[:, k, :] for k in range(d)]
    Cb = [lq.s2[:, k, :] for k in range(d)]
    D = [lq.s3[:, k, :] for k in range(d)]
    return A, lq.b3, C, Cb, D


def riccati_rhs(P, A, B, C, D, Q, S, R, noise_P=None):
    """Right side of P' (time running forward) for the generic Riccati operator.

    ``noise_P`` is the matrix weighting the noise terms; it equals P for the
    state equation and the state solution for the mean equation.
    """
    W = P if noise_P is None else noise_P
    Rt = R + sum(Dk.T @ W @ Dk for Dk in D)
    L = B.T @ P + sum(Dk.T @ W @ Ck for Ck, Dk in zip(C, D)) + S
    return -(P @ A + A.T @ P + sum(Ck.T @ W @ Ck for Ck in C) + Q - L.T @ np.linalg.solve(Rt, L))


def _gains(P, Pi, lq, A, B, C, Cb, D):
    Rt = lq.R + sum(Dk.T @ P @ Dk for Dk in D)
    Ch = [c + cb for c, cb in zip(C, Cb)]
    k = -np.linalg.solve(Rt, B.T @ P + sum(Dk.T @ P @ Ck for Ck, Dk in zip(C, D)) + lq.S)
    k_hat = -np.linalg.solve(Rt, B.T @ Pi + sum(Dk.T @ P @ Ck for Ck, Dk in zip(Ch, D)) + lq.S)
    return k, k_hat - k


def _integrate(lq: LQSpec, T: float, t_eval: np.ndarray):
    n = lq.n
    A, B, C, Cb, D = _matrices(lq)
    Ah = A + lq.b2
    Ch = [c + cb for c, cb in zip(C, Cb)]
    Qh = lq.Q + lq.Qbar

    def rhs(s, u):
        P = u[: n * n].reshape(n, n)
        Pi = u[n * n:].reshape(n, n)
        if not np.all(np.isfinite(u)) or np.abs(u).max() > BLOWUP:
            raise RiccatiBlowup("Riccati solution left the finite range")
        dP = riccati_rhs(P, A, B, C, D, lq.Q, lq.S, lq.R)
        dPi = riccati_rhs(Pi, Ah, B, Ch, D, Qh, lq.S, lq.R, noise_P=P)
        # reversed time s = T - t flips the sign
        return -np.concatenate([dP.ravel(), dPi.ravel()])

    sol = solve_ivp(rhs, (0.0, T), np.zeros(2 * n * n), method="Radau", rtol=1e-12, atol=1e-14,
                    dense_output=True)
    if not sol.success:
        raise RiccatiBlowup(f"Riccati integration failed: {sol.message}")
    u = sol.sol(T - t_eval).T
    P = u[:, : n * n].reshape(-1, n, n)
    Pi = u[:, n * n:].reshape(-1, n, n)
    return 0.5 * (P + np.swapaxes(P, 1, 2)), 0.5 * (Pi + np.swapaxes(Pi, 1, 2)), (A, B, C, Cb, D)


def stationary_riccati(lq: LQSpec):
    """Algebraic solutions (P*, Pi*) when the volatility has no state or control part, else None."""
    if np.any(lq.s1 != 0) or np.any(lq.s2 != 0) or np.any(lq.s3 != 0):
        return None
    A = lq.b1 + lq.K * np.eye(lq.n)
    P = solve_continuous_are(A, lq.b3, lq.Q, lq.R, s=lq.S.T)
    Pi = solve_continuous_are(A + lq.b2, lq.b3, lq.Q + lq.Qbar, lq.R, s=lq.S.T)
    return P, Pi


def riccati_lq(lq: LQSpec, grid: TimeGrid, extend_to_stationary: bool = False, stationary_tol: float = 1e-8,
               max_doublings: int = 4) -> RiccatiSolution:
    """Backward Riccati pair from P(T) = Pi(T) = 0 on the nodes of ``grid``.

    With ``extend_to_stationary`` the horizon is doubled (up to
    ``max_doublings`` times) until |P(0) - P(dt)|/dt < ``stationary_tol``;
    the output is still sampled on the nodes of ``grid`` in [0, T].
    """
    sides = lq_gate_sides(lq)
    if not sides["lhs"] < sides["rhs"]:
        raise GateViolated(f"LQ gate fails: K = {sides['lhs']:g} is not below {sides['rhs']:g}", module="oracle")
    if lq.lam_conv <= 0:
        raise GateViolated("cost is not strongly convex in the control", module="oracle")
    lq.R_inv()
    T = grid.T
    ext = 0
    t = grid.nodes
    P, Pi, mats = _integrate(lq, T, t)
    if extend_to_stationary:
        while ext < max_doublings:
            drift = np.abs(P[0] - P[1]).max() / grid.dt
            if drift < stationary_tol:
                break
            ext += 1
            horizon = T * 2 ** ext
            P, Pi, mats = _integrate(lq, horizon, t)
    gains = [_gains(P[i], Pi[i], lq, *mats) for i in range(len(t))]
    k = np.stack([g[0] for g in gains])
    kb = np.stack([g[1] for g in gains])
    stat = stationary_riccati(lq)
    return RiccatiSolution(t=t, P=P, Pi=Pi, gain=k, gain_mean=kb, T=T, lq=lq,
                           stationary_P=None if stat is None else stat[0],
                           stationary_Pi=None if stat is None else stat[1], extensions=ext)


def scalar_stationary_root(a: float, b: float, q: float, r: float, K: float) -> float:
    """Positive root of (b^2/r) p^2 - 2(a+K) p - q = 0 in closed form."""
    c = b * b / r
    return float((2.0 * (a + K) + np.sqrt(4.0 * (a + K) ** 2 + 4.0 * c * q)) / (2.0 * c))


def value_supported(lq: LQSpec) -> None:
    """Raise UnsupportedLQ for data outside the closed-form value formula."""
    if np.any(lq.b0 != 0):
        raise UnsupportedLQ("the value formula needs b0 = 0 (no affine offset in the adjoint)")
    if np.any(lq.s0 != 0) and (np.any(lq.s1 != 0) or np.any(lq.s2 != 0) or np.any(lq.s3 != 0)):
        raise UnsupportedLQ("additive noise together with state or control dependent volatility is not covered")


def riccati_fbsde_residual(sol: RiccatiSolution, samples: int = 64, seed: int = 0, nodes: int = 5) -> float:
    """Largest gap between the drift of Y = P(X - EX) + Pi EX implied by the Riccati pair and the
    Hamiltonian-system driver from :func:`coeffs.lq_to_coefficients`, at random states and times.

    The state derivative is taken from the Riccati right-hand side, so the
    check is an algebraic identity up to rounding when the pair is right.
    """
    lq = sol.lq
    value_supported(lq)
    n, m, d = lq.dims
    coeffs = lq_to_coefficients(lq)
    A, B, C, Cb, D = _matrices(lq)
    Ah = A + lq.b2
    Ch = [c + cb for c, cb in zip(C, Cb)]
    rng = np.random.default_rng(seed)
    worst = 0.0
    for i in rng.choice(len(sol.t), size=min(nodes, len(sol.t)), replace=False):
        t = sol.t[i]
        P, Pi = sol.P[i], sol.Pi[i]
        dP = riccati_rhs(P, A, B, C, D, lq.Q, lq.S, lq.R)
        dPi = riccati_rhs(Pi, Ah, B, Ch, D, lq.Q + lq.Qbar, lq.S, lq.R, noise_P=P)
        x = rng.standard_normal((samples, n)) + rng.standard_normal(n)
        mx = x.mean(axis=0)
        alpha = x @ sol.gain[i].T + mx @ sol.gain_mean[i].T
        y = (x - mx) @ P.T + mx @ Pi.T
        vol = lq.dynamics().vol(t, x, mx, alpha)
        z = np.einsum("ab,mbk->mak", P, vol)
        b = lq.dynamics().drift(t, x, mx, alpha)
        mb = b.mean(axis=0)
        drift_y = ((x - mx) @ dP.T + mx @ dPi.T + (b - mb) @ P.T + mb @ Pi.T)
        F = coeffs.F(t, x, y, z, EmpiricalLaw(x, y, z))
        worst = max(worst, float(np.abs(drift_y - F).max()))
    return worst
