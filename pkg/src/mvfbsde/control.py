"""Mean-field control: Hamiltonian, its minimiser, the Hamiltonian-system FBSDE and cost evaluation.

The Hamiltonian of a discounted problem is

    H(t, x, mu, y, z, a) = b(t, x, mu, a).y + sigma(t, x, mu, a).z + f(t, x, mu, a) + 2K x.y

and the adjoint driver is minus its x-gradient, completed with the
measure-derivative terms of b, sigma (through E[Y], E[Z]) and of f
(the particle average Psi of the f-kernel).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .coeffs import CoefficientSet, ControlProblemSpec, LQSpec, _at
from .core import EmpiricalLaw, NoiseSource, TimeGrid
from .errors import ArgminDiverged, MissingDerivative
from .forward import apply_vol, check_finite

PSI_CHUNK = 2048


@dataclass
class ControlPolicy:
    """A feedback control ``evaluator(i, t, x, law) -> (M, m)``."""

    kind: str
    evaluator: Callable
    meta: dict = field(default_factory=dict)

    def __call__(self, i, t, x, law):
        return self.evaluator(i, t, x, law)

    def perturbed(self, eta: Callable, eps: float) -> "ControlPolicy":
        """alpha + eps * eta(t, x)."""
        base = self.evaluator

        def ev(i, t, x, law):
            return base(i, t, x, law) + eps * eta(t, x)
        return ControlPolicy("tabulated", ev, {"base": self.kind, "eps": eps})


@dataclass
class CostReport:
    J: float
    std_error: float
    truncation_bound: float
    per_particle: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.std_error < 0:
            raise ValueError("std_error must be nonnegative")

    def to_dict(self) -> dict:
        return {"J": self.J, "std_error": self.std_error, "truncation_bound": self.truncation_bound}


def _spec(problem) -> ControlProblemSpec:
    return problem.control_spec() if isinstance(problem, LQSpec) else problem


def _pair(v, x):
    """Contract sigma (M, n, d) with z (M, m=n, d) per particle."""
    return np.einsum("mij,mij->m", v, x)


def hamiltonian(t, x, mu: EmpiricalLaw, y, z, alpha, spec) -> np.ndarray:
    """Per-particle value of b.y + sigma.z + f + 2K x.y."""
    spec = _spec(spec)
    x, y, alpha = (np.atleast_2d(np.asarray(a, dtype=float)) for a in (x, y, alpha))
    z = np.asarray(z, dtype=float).reshape(x.shape[0], spec.n, spec.d)
    b = spec.b(t, x, mu, alpha)
    s = spec.sigma(t, x, mu, alpha)
    return (np.sum(b * y, axis=1) + _pair(s, z) + np.asarray(spec.f(t, x, mu, alpha))
            + 2.0 * spec.K * np.sum(x * y, axis=1))


def _control_linear_part(spec: ControlProblemSpec, t, y, z) -> np.ndarray:
    """b3'y + s3'z: the part of the alpha-gradient of H coming from the dynamics."""
    dyn = spec.dynamics
    return y @ _at(dyn.b3, t) + np.einsum("ijk,mij->mk", _at(dyn.s3, t), z)


def dalpha_hamiltonian(t, x, mu, y, z, alpha, spec) -> np.ndarray:
    spec = _spec(spec)
    if spec.dalpha_f is None:
        raise MissingDerivative("dalpha_f is required")
    return np.asarray(spec.dalpha_f(t, x, mu, alpha)) + _control_linear_part(spec, t, y, z)


def argmin_bound(t, x, mu, y, z, spec) -> np.ndarray:
    """Per-particle a priori bound on |alpha_hat| from strong convexity (reference point 0)."""
    spec = _spec(spec)
    dyn = spec.dynamics
    zero = np.zeros((x.shape[0], spec.m))
    g0 = np.linalg.norm(np.asarray(spec.dalpha_f(t, x, mu, zero)), axis=1)
    b3 = np.linalg.norm(_at(dyn.b3, t), 2)
    s3 = np.linalg.norm(_at(dyn.s3, t).reshape(-1, spec.m), 2)
    zn = np.linalg.norm(z.reshape(x.shape[0], -1), axis=1)
    return (g0 + b3 * np.linalg.norm(y, axis=1) + s3 * zn) / spec.lam_conv


def minimize_hamiltonian(t, x, y, z, mu, spec, method: str = "auto", max_iter: int = 100,
                         h: float = 1e-5) -> np.ndarray:
    """alpha_hat per particle.

    ``closed_form`` uses the LQ formula (or the spec's own closed form);
    ``numeric`` runs damped Newton with a finite-difference Hessian of
    dalpha_f and falls back to Armijo gradient steps where that Hessian is
    not numerically positive definite. Stops when |dH/dalpha| <= 1e-8 (1 + |dH/dalpha(0)|).
    """
    spec = _spec(spec)
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = np.atleast_2d(np.asarray(y, dtype=float))
    z = np.asarray(z, dtype=float).reshape(x.shape[0], spec.n, spec.d)
    if method == "auto":
        method = "closed_form" if spec.closed_form is not None else "numeric"
    if method == "closed_form":
        if spec.closed_form is None:
            raise ValueError("no closed form available for this spec")
        return np.asarray(spec.closed_form(t, x, mu, y, z), dtype=float)
    if spec.dalpha_f is None:
        raise MissingDerivative("numeric minimisation needs dalpha_f")
    M, m = x.shape[0], spec.m
    lin = _control_linear_part(spec, t, y, z)

    def grad(a):
        return np.asarray(spec.dalpha_f(t, x, mu, a)) + lin

    def H(a):
        return np.asarray(spec.f(t, x, mu, a)) + np.sum(a * lin, axis=1)

    a = np.zeros((M, m))
    g = grad(a)
    tol = 1e-8 * (1.0 + np.linalg.norm(g, axis=1))
    for _ in range(max_iter):
        gn = np.linalg.norm(g, axis=1)
        active = gn > tol
        if not active.any():
            return a
        hess = np.empty((M, m, m))
        for k in range(m):
            e = np.zeros(m)
            e[k] = h
            hess[:, :, k] = (grad(a + e) - grad(a - e)) / (2.0 * h)
        hess = 0.5 * (hess + np.swapaxes(hess, 1, 2))
        eig_min = np.linalg.eigvalsh(hess)[:, 0]
        step = -g
        good = eig_min > 1e-12
        if good.any():
            step[good] = -np.linalg.solve(hess[good], g[good][:, :, None])[:, :, 0]
        # Armijo backtracking, per particle
        t_step = np.ones(M)
        h0 = H(a)
        slope = np.sum(g * step, axis=1)
        for _ in range(40):
            trial = a + t_step[:, None] * step
            ok = H(trial) <= h0 + 1e-4 * t_step * slope + 1e-14 * (1.0 + np.abs(h0))
            if ok.all():
                break
            t_step = np.where(ok, t_step, 0.5 * t_step)
        a = np.where(active[:, None], a + t_step[:, None] * step, a)
        g = grad(a)
    if np.any(np.linalg.norm(g, axis=1) > tol):
        raise ArgminDiverged(f"Hamiltonian minimisation did not reach tolerance in {max_iter} iterations")
    return a


def psi_term(spec: ControlProblemSpec, t, xs: np.ndarray, law: EmpiricalLaw, alphas: np.ndarray,
             x_eval: Optional[np.ndarray] = None) -> np.ndarray:
    """Particle average (1/M) sum_j dmu_f(t, X^j, law, alpha^j)(x) at every evaluation point."""
    x_eval = xs if x_eval is None else x_eval
    if spec.dmu_f is None:
        return np.zeros_like(x_eval)
    if spec.psi is not None:
        return np.asarray(spec.psi(t, xs, law, alphas, x_eval), dtype=float)
    out = np.zeros_like(x_eval)
    for s in range(0, x_eval.shape[0], PSI_CHUNK):
        xe = x_eval[s:s + PSI_CHUNK]
        ker = np.asarray(spec.dmu_f(t, xs[None, :, :], law, alphas[None, :, :], xe[:, None, :]))
        out[s:s + PSI_CHUNK] = ker.mean(axis=1)
    return out


def build_hamiltonian_system(spec) -> CoefficientSet:
    """Forward and adjoint coefficients of the maximum-principle FBSDE with alpha = alpha_hat."""
    spec = _spec(spec)
    if spec.dx_f is None or spec.dalpha_f is None:
        raise MissingDerivative("the Hamiltonian system needs dx_f and dalpha_f")
    dyn = spec.dynamics
    n, d, K = spec.n, spec.d, spec.K

    def control(t, x, y, z, law):
        mu = law
        return minimize_hamiltonian(t, x, y, z, mu, spec)

    def B(t, x, y, z, law):
        return spec.b(t, x, law, control(t, x, y, z, law))

    def sigma(t, x, y, z, law):
        return spec.sigma(t, x, law, control(t, x, y, z, law))

    def F(t, x, y, z, law):
        a = control(t, x, y, z, law)
        b1, s1 = _at(dyn.b1, t), _at(dyn.s1, t)
        b2, s2 = _at(dyn.b2, t), _at(dyn.s2, t)
        grad_x = (np.asarray(spec.dx_f(t, x, law, a)) + y @ b1 + 2.0 * K * y
                  + np.einsum("ijk,mij->mk", s1, z))
        mean_part = law.mean_y @ b2 + np.einsum("ijk,ij->k", s2, law.mean_z)
        return -(grad_x + mean_part + psi_term(spec, t, x, law, a))

    return CoefficientSet(n, n, d, B, F, sigma, xi=spec.xi, name=spec.name,
                          meta={"control": control, "spec": spec})


# ---------------------------------------------------------------- policies and costs

def feedback_from_field(spec, field, method: str = "auto") -> ControlPolicy:
    """alpha_hat(t, x, u(t, x), v(t, x), law) from a decoupling field of the Hamiltonian system."""
    spec = _spec(spec)

    def ev(i, t, x, law):
        y, z = field.values(min(i, field.N), x)
        return minimize_hamiltonian(t, x, y, z, law, spec, method=method)
    return ControlPolicy("closed_form_lq" if spec.closed_form is not None else "numeric_argmin", ev,
                         {"field": field})


def linear_feedback(gain_x: Callable, gain_mean: Callable, offset: Optional[Callable] = None) -> ControlPolicy:
    """alpha = k(t) x + kbar(t) E[X] (+ r(t)) with matrix-valued gains of time."""
    def ev(i, t, x, law):
        a = x @ np.atleast_2d(gain_x(t)).T + law.mean_x @ np.atleast_2d(gain_mean(t)).T
        return a if offset is None else a + offset(t)
    return ControlPolicy("tabulated", ev)


def evaluate_cost(policy: ControlPolicy, spec, grid: TimeGrid, M: int, seed: int = 0) -> CostReport:
    """Discounted running cost dt sum_i e^{2K t_i} mean f(t_i, X_i, law_i, alpha_i) under the policy.

    Noise and initial samples come from ``seed`` exactly as in the solvers,
    so equal seeds give common random numbers across policies.
    """
    spec = _spec(spec)
    noise = NoiseSource(seed, M, spec.d, grid.dt)
    x = np.asarray(spec.xi(noise.initial(), M), dtype=float).reshape(M, spec.n)
    acc = np.zeros(M)
    last = 0.0
    w, dt = grid.weights, grid.dt
    for i in range(grid.N):
        t = grid.nodes[i]
        law = EmpiricalLaw(x)
        a = np.asarray(policy(i, t, x, law), dtype=float).reshape(M, spec.m)
        fv = np.asarray(spec.f(t, x, law, a), dtype=float)
        acc += dt * w[i] * fv
        last = float(fv.mean())
        x = x + spec.b(t, x, law, a) * dt + apply_vol(spec.sigma(t, x, law, a), noise.increments(i))
        check_finite(x, i + 1)
    J = float(acc.mean())
    se = float(acc.std(ddof=1) / np.sqrt(M))
    if grid.K < 0:
        bound = w[-1] * abs(last) / (-2.0 * grid.K)
    else:
        bound = float("inf")
    return CostReport(J, se, float(bound), per_particle=acc)


def smooth_perturbation(rng: np.random.Generator, m: int = 1, scale: float = 1.0) -> Callable:
    """A bounded smooth eta(t, x): a damped sinusoid in t plus a tanh profile in the state."""
    amp_t, amp_x = rng.uniform(-1, 1, m), rng.uniform(-1, 1, m)
    freq, phase = rng.uniform(0.2, 2.0, m), rng.uniform(0, 2 * np.pi, m)
    shift = rng.uniform(-1, 1)

    def eta(t, x):
        xs = x[:, :1] - shift
        return scale * (amp_t * np.sin(freq * t + phase) + amp_x * np.tanh(xs))
    return eta


@dataclass
class OptimalityReport:
    J_opt: CostReport
    entries: list
    all_flags: bool
    strictly_greater: int

    def to_dict(self) -> dict:
        return {"J_opt": self.J_opt.to_dict(), "entries": self.entries, "all_flags": self.all_flags,
                "strictly_greater": self.strictly_greater}


def verify_optimality(policy: ControlPolicy, spec, perturbations: Sequence[Callable], grid: TimeGrid, M: int,
                      seed: int = 0, eps: Sequence[float] = (0.1, 0.3)) -> OptimalityReport:
    """Check J(alpha + eps eta) >= J(alpha) - 3 se for every perturbation and step.

    ``se`` is the standard error of the particle-wise cost difference under
    common random numbers. ``strictly_greater`` counts perturbations whose
    smallest-step cost exceeds J(alpha) by more than one se.
    """
    base = evaluate_cost(policy, spec, grid, M, seed)
    entries = []
    strict = 0
    for k, eta in enumerate(perturbations):
        rows = []
        for e in eps:
            rep = evaluate_cost(policy.perturbed(eta, e), spec, grid, M, seed)
            diff = rep.per_particle - base.per_particle
            se = float(diff.std(ddof=1) / np.sqrt(M))
            gain = rep.J - base.J
            rows.append({"perturbation": k, "eps": e, "J": rep.J, "delta_J": gain, "std_error": se,
                         "flag": bool(gain >= -3.0 * se), "strict": bool(gain > se)})
        if len(rows) > 1:
            small, big = rows[0], rows[-1]
            sign_se = max(small["std_error"], big["std_error"])
            for r in rows:
                r["ray_convex"] = bool(big["delta_J"] >= small["delta_J"] - 3.0 * sign_se)
        strict += int(rows[0]["strict"])
        entries += rows
    all_flags = all(r["flag"] for r in entries)
    return OptimalityReport(base, entries, bool(all_flags), strict)
