"""Coefficient sets, constants bundles, control problem data and the builtin catalog.

All callables are vectorised over particles:

* ``x`` has shape ``(M, n)``, ``y`` ``(M, m)``, ``z`` ``(M, m, d)``;
* ``B`` returns ``(M, n)``, ``F`` ``(M, m)``, ``sigma`` ``(M, n, d)``
  (anything broadcastable to those shapes is accepted).
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .core import EmpiricalLaw
from .errors import SingularR, UnknownProblem

Array = np.ndarray


def zeros_sampler(n: int) -> Callable:
    def sample(rng: np.random.Generator, M: int) -> Array:
        return np.zeros((M, n))
    return sample


def constant_sampler(x0) -> Callable:
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))

    def sample(rng: np.random.Generator, M: int) -> Array:
        return np.broadcast_to(x0, (M, x0.size)).copy()
    return sample


def gaussian_sampler(mean, std) -> Callable:
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    std = np.broadcast_to(np.asarray(std, dtype=float), mean.shape)

    def sample(rng: np.random.Generator, M: int) -> Array:
        return mean + std * rng.standard_normal((M, mean.size))
    return sample


@dataclass
class CoefficientSet:
    """Evaluable (B, F, sigma) of a McKean-Vlasov FBSDE."""

    n: int
    m: int
    d: int
    B: Callable
    F: Callable
    sigma: Callable
    xi: Optional[Callable] = None
    name: str = "custom"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.xi is None:
            self.xi = zeros_sampler(self.n)

    @property
    def dims(self) -> tuple:
        return (self.n, self.m, self.d)

    def drift(self, t, x, y, z, law) -> Array:
        return np.broadcast_to(self.B(t, x, y, z, law), x.shape)

    def driver(self, t, x, y, z, law) -> Array:
        return np.broadcast_to(self.F(t, x, y, z, law), y.shape)

    def vol(self, t, x, y, z, law) -> Array:
        return np.broadcast_to(self.sigma(t, x, y, z, law), (x.shape[0], self.n, self.d))


@dataclass
class PairSample:
    """Two mini-ensembles standing in for a pair of square-integrable random variables."""

    t: float
    x1: Array
    y1: Array
    z1: Array
    x2: Array
    y2: Array
    z2: Array

    @property
    def law1(self) -> EmpiricalLaw:
        return EmpiricalLaw(self.x1, self.y1, self.z1)

    @property
    def law2(self) -> EmpiricalLaw:
        return EmpiricalLaw(self.x2, self.y2, self.z2)

    def to_dict(self) -> dict:
        return {k: np.asarray(v).tolist() if isinstance(v, np.ndarray) else v for k, v in self.__dict__.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "PairSample":
        return cls(**{k: (np.asarray(v, dtype=float) if k != "t" else float(v)) for k, v in d.items()})


def zero_phi(pair: PairSample) -> float:
    return 0.0


@dataclass
class ConstantsBundle:
    """Every scalar gate parameter of the monotonicity framework.

    The optional ``l_sigma_x`` .. ``l_mu_z`` entries feed the separate SDE and
    BSDE gates; ``bsde_lz`` is the Lipschitz constant of the driver in z,
    which is a different quantity from the monotonicity constant ``l_z``.
    """

    K: float
    kappa_x: float
    kappa_y: float
    l: float
    l_sigma: float
    l_z: float
    l_phi: float
    gamma: float
    beta1: float
    beta2: float
    G: Array
    phi1: Callable = zero_phi
    phi2: Callable = zero_phi
    case: str = "Case1"
    l_sigma_x: Optional[float] = None
    l_sigma_mu: Optional[float] = None
    l_b_mu: Optional[float] = None
    bsde_lz: Optional[float] = None
    l_mu_y: Optional[float] = None
    l_mu_z: Optional[float] = None

    def __post_init__(self):
        self.G = np.atleast_2d(np.asarray(self.G, dtype=float))
        if not 0.0 < self.gamma < 1.0:
            raise ValueError(f"gamma must lie in (0, 1), got {self.gamma}")
        if self.beta1 < 0 or self.beta2 < 0 or self.beta1 + self.beta2 <= 0:
            raise ValueError("need beta1, beta2 >= 0 with beta1 + beta2 > 0")
        if min(self.l, self.l_sigma, self.l_z, self.l_phi) < 0:
            raise ValueError("Lipschitz-type constants must be nonnegative")
        if self.case not in ("Case1", "Case2"):
            raise ValueError(f"case must be Case1 or Case2, got {self.case!r}")
        scalars = [self.K, self.kappa_x, self.kappa_y, self.l, self.l_sigma, self.l_z, self.l_phi]
        if not np.all(np.isfinite(scalars)) or not np.all(np.isfinite(self.G)):
            raise ValueError("constants must be finite")

    def with_(self, **changes) -> "ConstantsBundle":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        out = {}
        for k, v in self.__dict__.items():
            if callable(v):
                out[k] = getattr(v, "__name__", "callable")
            elif isinstance(v, np.ndarray):
                out[k] = v.tolist()
            else:
                out[k] = v
        return out


def _at(value, t):
    """Evaluate a constant or a callable of time."""
    return np.asarray(value(t) if callable(value) else value, dtype=float)


@dataclass
class LinearDynamics:
    """Linear state coefficients b0 + b1 x + b2 E[X] + b3 a and the same for sigma.

    Volatility tensors carry the noise axis in the middle: ``s1`` and ``s2``
    have shape (n, d, n) and ``s3`` (n, d, m), contracting their last axis.
    Every entry may be an array or a callable of time (piecewise constant
    schedules are the caller's business).
    """

    b0: object
    b1: object
    b2: object
    b3: object
    s0: object
    s1: object
    s2: object
    s3: object

    def drift(self, t, x, mean_x, alpha) -> Array:
        return (_at(self.b0, t) + x @ _at(self.b1, t).T + mean_x @ _at(self.b2, t).T
                + alpha @ _at(self.b3, t).T)

    def vol(self, t, x, mean_x, alpha) -> Array:
        s1, s2, s3 = _at(self.s1, t), _at(self.s2, t), _at(self.s3, t)
        return (_at(self.s0, t) + np.einsum("ijk,mk->mij", s1, x)
                + np.einsum("ijk,k->ij", s2, mean_x) + np.einsum("ijk,mk->mij", s3, alpha))


@dataclass
class ControlProblemSpec:
    """Mean-field control data: linear dynamics, running cost and its derivatives.

    ``f(t, x, mu, a)`` returns ``(M,)``; ``dx_f`` ``(M, n)``; ``dalpha_f``
    ``(M, m)``. ``dmu_f(t, xp, mu, a, x)`` is the measure-derivative kernel,
    broadcasting ``xp``/``a`` against ``x`` over leading axes and returning
    the ``n``-vector in the last axis. ``psi``, when given, returns the
    particle average of that kernel directly, avoiding the O(M^2) sum.
    """

    n: int
    m: int
    d: int
    dynamics: LinearDynamics
    f: Callable
    dx_f: Optional[Callable]
    dalpha_f: Optional[Callable]
    dmu_f: Optional[Callable]
    lam_conv: float
    K: float
    xi: Callable
    psi: Optional[Callable] = None
    name: str = "custom"
    closed_form: Optional[Callable] = None
    lq: Optional["LQSpec"] = None

    def b(self, t, x, mu: EmpiricalLaw, alpha) -> Array:
        return self.dynamics.drift(t, x, mu.mean_x, alpha)

    def sigma(self, t, x, mu: EmpiricalLaw, alpha) -> Array:
        return np.broadcast_to(self.dynamics.vol(t, x, mu.mean_x, alpha), (x.shape[0], self.n, self.d))


def _tensor(a, n: int, d: int, k: int) -> Array:
    a = np.asarray(a, dtype=float)
    if a.ndim == 2 and d == 1:
        a = a[:, None, :]
    return np.broadcast_to(a, (n, d, k)).copy()


@dataclass
class LQSpec:
    """Mean-field linear-quadratic data with running cost

    1/2 [x'Qx + 2 a'Sx + a'Ra + E[X]' Qbar E[X]]

    and linear dynamics. Matrices are constant; volatility tensors follow
    :class:`LinearDynamics`.
    """

    b0: Array
    b1: Array
    b2: Array
    b3: Array
    s0: Array
    s1: Array
    s2: Array
    s3: Array
    Q: Array
    S: Array
    R: Array
    K: float
    Qbar: Optional[Array] = None
    xi: Optional[Callable] = None
    lam_conv: Optional[float] = None
    name: str = "lq"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        self.b1 = np.atleast_2d(np.asarray(self.b1, dtype=float))
        n = self.b1.shape[0]
        self.R = np.atleast_2d(np.asarray(self.R, dtype=float))
        m = self.R.shape[0]
        self.b0 = np.broadcast_to(np.asarray(self.b0, dtype=float), (n,)).copy()
        self.b2 = np.broadcast_to(np.asarray(self.b2, dtype=float), (n, n)).copy()
        self.b3 = np.broadcast_to(np.asarray(self.b3, dtype=float), (n, m)).copy()
        self.s0 = np.asarray(self.s0, dtype=float).reshape(n, -1).copy()
        d = self.s0.shape[1]
        self.s1 = _tensor(self.s1, n, d, n)
        self.s2 = _tensor(self.s2, n, d, n)
        self.s3 = _tensor(self.s3, n, d, m)
        self.Q = np.broadcast_to(np.asarray(self.Q, dtype=float), (n, n)).copy()
        self.S = np.broadcast_to(np.asarray(self.S, dtype=float), (m, n)).copy()
        self.Qbar = np.zeros((n, n)) if self.Qbar is None else np.broadcast_to(
            np.asarray(self.Qbar, dtype=float), (n, n)).copy()
        if self.xi is None:
            self.xi = zeros_sampler(n)
        if self.lam_conv is None:
            self.lam_conv = control_convexity(self.Q, self.S, self.R)

    @property
    def n(self) -> int:
        return self.b1.shape[0]

    @property
    def m(self) -> int:
        return self.R.shape[0]

    @property
    def d(self) -> int:
        return self.s0.shape[1]

    @property
    def dims(self) -> tuple:
        return (self.n, self.m, self.d)

    def dynamics(self) -> LinearDynamics:
        return LinearDynamics(self.b0, self.b1, self.b2, self.b3, self.s0, self.s1, self.s2, self.s3)

    def R_inv(self) -> Array:
        if not np.allclose(self.R, self.R.T) or np.linalg.eigvalsh(self.R).min() <= 0:
            raise SingularR("R must be symmetric positive definite")
        return np.linalg.inv(self.R)

    def minimizer(self, x, y, z) -> Array:
        """Closed-form argmin of the Hamiltonian: -R^{-1}(S x + b3'y + s3'z)."""
        rhs = x @ self.S.T + y @ self.b3 + np.einsum("ijk,mij->mk", self.s3, z)
        return -rhs @ self.R_inv().T

    def cost(self, t, x, mean_x, alpha) -> Array:
        return 0.5 * (np.einsum("mi,ij,mj->m", x, self.Q, x) + 2.0 * np.einsum("mi,ij,mj->m", alpha, self.S, x)
                      + np.einsum("mi,ij,mj->m", alpha, self.R, alpha) + mean_x @ self.Qbar @ mean_x)

    def state_convexity(self) -> float:
        """lambda_min(Q - S'R^{-1}S)."""
        return float(np.linalg.eigvalsh(self.Q - self.S.T @ self.R_inv() @ self.S).min())

    def control_spec(self) -> ControlProblemSpec:
        """The same problem through the generic callable interface."""
        lq = self

        def f(t, x, mu, a):
            return lq.cost(t, x, mu.mean_x, a)

        def dx_f(t, x, mu, a):
            return x @ lq.Q.T + a @ lq.S

        def dalpha_f(t, x, mu, a):
            return x @ lq.S.T + a @ lq.R.T

        def dmu_f(t, xp, mu, a, x):
            # derivative of 1/2 m'Qbar m: constant kernel Qbar m
            v = lq.Qbar @ mu.mean_x
            return np.broadcast_to(v, np.broadcast_shapes(np.shape(xp), np.shape(x)))

        def psi(t, xp, mu, a, x):
            return np.broadcast_to(lq.Qbar @ mu.mean_x, x.shape)

        def closed_form(t, x, mu, y, z):
            return lq.minimizer(x, y, z)

        has_mf = bool(np.any(self.Qbar != 0))
        return ControlProblemSpec(
            n=self.n, m=self.m, d=self.d, dynamics=self.dynamics(), f=f, dx_f=dx_f, dalpha_f=dalpha_f,
            dmu_f=dmu_f if has_mf else None, psi=psi if has_mf else None, lam_conv=self.lam_conv, K=self.K,
            xi=self.xi, name=self.name, closed_form=closed_form, lq=self)


def control_convexity(Q, S, R) -> float:
    """Largest lam with [[Q, S'], [S, R - 2 lam I]] positive semidefinite.

    This is the modulus with which the quadratic running cost is strongly
    convex in the control, jointly with the state.
    """
    Q, S, R = (np.atleast_2d(np.asarray(a, dtype=float)) for a in (Q, S, R))
    m = R.shape[0]
    if np.linalg.eigvalsh(R).min() <= 0:
        return 0.0

    def psd(lam):
        big = np.block([[Q, S.T], [S, R - 2.0 * lam * np.eye(m)]])
        return np.linalg.eigvalsh(0.5 * (big + big.T)).min() >= -1e-13

    if not psd(0.0):
        return 0.0
    lo, hi = 0.0, 0.5 * np.linalg.eigvalsh(R).min()
    if psd(hi):
        return float(hi)
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        lo, hi = (mid, hi) if psd(mid) else (lo, mid)
    return float(lo)


def _rmul(v: Array, A: Array) -> Array:
    """v @ A.T for row vectors, as a plain product when A is 1x1."""
    if A.shape == (1, 1):
        return v * A[0, 0]
    return v @ A.T


def lq_to_coefficients(lq: LQSpec) -> CoefficientSet:
    """Hamiltonian-system coefficients of an LQ problem with the closed-form minimizer."""
    R_inv = lq.R_inv()
    n, m, d = lq.dims
    b1, b2, b3 = lq.b1, lq.b2, lq.b3
    s1, s2, s3 = lq.s1, lq.s2, lq.s3
    Q, S, Qbar, K = lq.Q, lq.S, lq.Qbar, lq.K
    gain_x = -R_inv @ S          # alpha = gain_x x + gain_y y + gain_z z
    gain_y = -R_inv @ b3.T
    gain_z = -np.einsum("ab,ijb->aij", R_inv, s3)
    # the sparsity pattern of the noise decides which terms are evaluated
    has_s1, has_s2, has_s3 = bool(np.any(s1)), bool(np.any(s2)), bool(np.any(s3))
    has_gx = bool(np.any(gain_x))
    drift_y = (gain_y.T @ b3.T)          # y -> b3 gain_y y, applied on the right
    s0 = lq.s0

    def alpha(x, y, z):
        a = _rmul(y, gain_y)
        if has_gx:
            a = a + _rmul(x, gain_x)
        if has_s3:
            a = a + np.einsum("aij,mij->ma", gain_z, z)
        return a

    def B(t, x, y, z, law):
        out = _rmul(x, b1) + _rmul(law.mean_x, b2) + lq.b0
        if has_gx or has_s3:
            return out + _rmul(alpha(x, y, z), b3)
        return out + _rmul(y, drift_y.T)

    def sigma(t, x, y, z, law):
        if not (has_s1 or has_s2 or has_s3):
            return s0
        out = s0 + np.einsum("ijk,k->ij", s2, law.mean_x) if has_s2 else s0
        if has_s1:
            out = out + np.einsum("ijk,mk->mij", s1, x)
        if has_s3:
            out = out + np.einsum("ijk,mk->mij", s3, alpha(x, y, z))
        return out

    def F(t, x, y, z, law):
        dx_f = _rmul(x, Q)
        if bool(np.any(S)):
            dx_f = dx_f + _rmul(alpha(x, y, z), S.T)
        adj = _rmul(y, b1.T + 2.0 * K * np.eye(n))
        if has_s1:
            adj = adj + np.einsum("ijk,mij->mk", s1, z)
        mf = _rmul(law.mean_x, Qbar) + _rmul(law.mean_y, b2.T)
        if has_s2:
            mf = mf + np.einsum("ijk,ij->k", s2, law.mean_z)
        return -(dx_f + adj + mf)

    return CoefficientSet(n, n, d, B, F, sigma, xi=lq.xi, name=lq.name,
                          meta={"alpha": alpha, "lq": lq})


def _opnorm(a: Array) -> float:
    a = np.asarray(a, dtype=float)
    if a.ndim == 3:
        a = a.reshape(-1, a.shape[-1])
    return float(np.linalg.norm(a, 2)) if a.size else 0.0


def lq_gate_sides(lq: LQSpec) -> dict:
    """Both sides of the linear-convex gate: K < -lam_max(b1+b1')/2 - |b2| - (|s1|+|s2|)^2/2."""
    lam_max = float(np.linalg.eigvalsh(lq.b1 + lq.b1.T).max())
    s = _opnorm(lq.s1) + _opnorm(lq.s2)
    rhs = -0.5 * lam_max - _opnorm(lq.b2) - 0.5 * s * s
    return {"lhs": float(lq.K), "rhs": float(rhs), "lam_max_b1": lam_max, "b2_norm": _opnorm(lq.b2), "sigma_sum": s}


def lq_lipschitz(lq: LQSpec) -> float:
    """An operator-norm bound for the Hamiltonian-system coefficients.

    Each of B, F, sigma is bounded by c(|dx| + |dy| + |dz| + W2), so the sum
    of the three per-coefficient constants bounds |(dB, dF, dsigma)|.
    """
    R_inv = lq.R_inv()
    gx = R_inv @ lq.S
    gy = R_inv @ lq.b3.T
    gz = np.einsum("ab,ijb->aij", R_inv, lq.s3).reshape(lq.m, -1)
    s3 = lq.s3.reshape(-1, lq.m)
    b3, S = lq.b3, lq.S
    cB = max(_opnorm(lq.b1) + _opnorm(b3 @ gx), _opnorm(b3 @ gy), _opnorm(b3 @ gz), _opnorm(lq.b2))
    cs = max(_opnorm(lq.s1) + _opnorm(s3 @ gx), _opnorm(s3 @ gy), _opnorm(s3 @ gz), _opnorm(lq.s2))
    cF = max(_opnorm(lq.Q) + _opnorm(S.T @ gx),
             _opnorm(lq.b1) + 2 * abs(lq.K) + _opnorm(S.T @ gy),
             _opnorm(lq.s1) + _opnorm(S.T @ gz),
             _opnorm(lq.Qbar) + _opnorm(lq.b2) + _opnorm(lq.s2))
    return float(cB + cs + cF)


def lq_constants(lq: LQSpec, delta0_fraction: float = 0.5, gamma_floor: float = 0.5) -> ConstantsBundle:
    """Constants of the linear-convex well-posedness argument.

    With gap = gate - K, the rates are
    kappa_x = -lam_max/2 - |b2| - gap/2 and kappa_y = lam_max/2 + |b2| + 2K + gap/2,
    so K = (kappa_x + kappa_y)/2 and kappa_x - kappa_y = s^2 + gap. The volatility
    constants are l_sigma = l_z = s^2 + delta0 with delta0 = delta0_fraction * gap.
    The ratio s^2/(s^2 + delta0) is raised to ``gamma_floor`` when smaller,
    which only weakens the Z term of the F inequality. l_phi collects the
    Young-inequality remainders of the three Case 1 inequalities.
    """
    sides = lq_gate_sides(lq)
    gap = sides["rhs"] - lq.K
    lam_max, b2n, s = sides["lam_max_b1"], sides["b2_norm"], sides["sigma_sum"]
    kx = -0.5 * lam_max - b2n - 0.5 * gap
    ky = 0.5 * lam_max + b2n + 2.0 * lq.K + 0.5 * gap
    pos_gap = gap if gap > 0 else 1.0
    delta0 = delta0_fraction * pos_gap
    l_sig = s * s + delta0
    gamma = max(s * s / (s * s + delta0), gamma_floor)
    # sigma inequality: |a + s3 da|^2 <= (1+eta)|a|^2 + (1+1/eta)|s3|^2 |da|^2
    s3n = _opnorm(lq.s3)
    eta = delta0 / (s * s) if s > 0 else 1.0
    lphi_sigma = (1.0 + 1.0 / eta) * s3n ** 2
    lphi_B = _opnorm(lq.b3) ** 2 / (2.0 * pos_gap)
    lphi_F = 2.0 * max((_opnorm(lq.Q) + _opnorm(lq.Qbar)) ** 2, _opnorm(lq.S) ** 2) / (2.0 * pos_gap)
    lphi = max(lphi_sigma, lphi_B, lphi_F, 1e-12)
    alpha_of = lq_to_coefficients(lq).meta["alpha"]

    def control_gap(pair: PairSample) -> float:
        da = alpha_of(pair.x1, pair.y1, pair.z1) - alpha_of(pair.x2, pair.y2, pair.z2)
        return float(np.mean(np.sum(da * da, axis=1)))

    return ConstantsBundle(
        K=float(lq.K), kappa_x=float(kx), kappa_y=float(ky), l=lq_lipschitz(lq), l_sigma=l_sig, l_z=l_sig,
        l_phi=float(lphi), gamma=float(gamma), beta1=0.0, beta2=2.0 * float(lq.lam_conv), G=np.eye(lq.n),
        phi2=control_gap, case="Case1")


# ---------------------------------------------------------------- catalog

def _decoupled_ou(kappa_x=1.0, kappa_y=-2.0, sigma0=1.0, K=-0.5, x0=1.0):
    def B(t, x, y, z, law):
        return -kappa_x * x

    def F(t, x, y, z, law):
        return -kappa_y * y

    def sigma(t, x, y, z, law):
        return np.full((1, 1, 1), sigma0)

    coeffs = CoefficientSet(1, 1, 1, B, F, sigma, xi=constant_sampler(x0), name="decoupled_ou",
                            meta={"kappa": kappa_x, "sigma0": sigma0, "x0": x0,
                                  "b_at_zero": lambda t: 0.0, "sigma_at_zero": lambda t: sigma0})
    constants = ConstantsBundle(
        K=K, kappa_x=kappa_x, kappa_y=kappa_y, l=abs(kappa_x) + abs(kappa_y), l_sigma=0.5, l_z=0.5,
        l_phi=0.1, gamma=0.5, beta1=0.0, beta2=1.0, G=[[1.0]], case="Case1",
        l_sigma_x=0.0, l_sigma_mu=0.0, l_b_mu=0.0, bsde_lz=0.0, l_mu_y=0.0, l_mu_z=0.0)
    return coeffs, constants


def _constant_driver_bsde(K=-0.5):
    def B(t, x, y, z, law):
        return np.zeros((1, 1))

    def F(t, x, y, z, law):
        return y - 1.0

    def sigma(t, x, y, z, law):
        return np.zeros((1, 1, 1))

    coeffs = CoefficientSet(1, 1, 1, B, F, sigma, xi=zeros_sampler(1), name="constant_driver_bsde",
                            meta={"f_at_zero": lambda t: -1.0, "b_at_zero": lambda t: 0.0,
                                  "sigma_at_zero": lambda t: 0.0})
    constants = ConstantsBundle(
        K=K, kappa_x=0.0, kappa_y=-1.0, l=1.0, l_sigma=0.5, l_z=0.5, l_phi=0.1, gamma=0.5,
        beta1=0.0, beta2=1.0, G=[[1.0]], case="Case1",
        l_sigma_x=0.0, l_sigma_mu=0.0, l_b_mu=0.0, bsde_lz=0.0, l_mu_y=0.0, l_mu_z=0.0)
    return coeffs, constants


def scalar_lq(a, abar, b, sigma0, q, r, K, x0_mean=1.0, x0_std=0.5, s=0.0, qbar=0.0, name="scalar_lq") -> LQSpec:
    """Scalar mean-field LQ: dX = (aX + abar E[X] + b alpha)dt + sigma0 dW, cost 1/2(qx^2 + 2s a x + r a^2)."""
    return LQSpec(b0=[0.0], b1=[[a]], b2=[[abar]], b3=[[b]], s0=[[sigma0]], s1=[[0.0]], s2=[[0.0]], s3=[[0.0]],
                  Q=[[q]], S=[[s]], R=[[r]], Qbar=[[qbar]], K=K, xi=gaussian_sampler(x0_mean, x0_std), name=name,
                  params=dict(a=a, abar=abar, b=b, sigma0=sigma0, q=q, r=r, K=K, s=s, qbar=qbar,
                              x0_mean=x0_mean, x0_std=x0_std))


def _scalar_lq_meanfield(a=-1.0, abar=0.2, b=1.0, sigma0=0.5, q=1.0, r=1.0, K=-0.1, x0_mean=1.0, x0_std=0.5, s=0.0):
    lq = scalar_lq(a, abar, b, sigma0, q, r, K, x0_mean, x0_std, s=s, name="scalar_lq_meanfield")
    return lq, lq_constants(lq)


def _drift_control_constant_sigma(a=-0.5, abar=0.25, b=1.0, sigma0=0.3, q=1.0, r=1.0, c=0.5, K=-0.4,
                                  x0_mean=0.5, x0_std=0.3):
    """Linear drift with control, constant volatility and a pairwise-interaction cost

    f(x, mu, alpha) = q x^2/2 + r alpha^2/2 + (c/2) int (x - x')^2 mu(dx'),

    whose measure derivative is the genuinely state-dependent kernel
    dmu f(x, mu)(v) = c (v - x).
    """
    dyn = LinearDynamics(b0=np.zeros(1), b1=np.array([[a]]), b2=np.array([[abar]]), b3=np.array([[b]]),
                         s0=np.array([[sigma0]]), s1=np.zeros((1, 1, 1)), s2=np.zeros((1, 1, 1)),
                         s3=np.zeros((1, 1, 1)))

    def f(t, x, mu, al):
        m1 = mu.mean_x
        m2 = np.mean(mu.x * mu.x, axis=0)
        inter = np.sum(x * x - 2.0 * x * m1 + m2, axis=1)
        return 0.5 * (q * np.sum(x * x, axis=1) + r * np.sum(al * al, axis=1) + c * inter)

    def dx_f(t, x, mu, al):
        return q * x + c * (x - mu.mean_x)

    def dalpha_f(t, x, mu, al):
        return r * al

    def dmu_f(t, xp, mu, al, x):
        return c * (x - xp)

    def psi(t, xp, mu, al, x):
        return c * (x - xp.mean(axis=0))

    # the same expected cost in standard mean-field LQ form: Q = q + 2c, Qbar = -2c
    lq = LQSpec(b0=[0.0], b1=[[a]], b2=[[abar]], b3=[[b]], s0=[[sigma0]], s1=[[0.0]], s2=[[0.0]], s3=[[0.0]],
                Q=[[q + 2 * c]], S=[[0.0]], R=[[r]], Qbar=[[-2 * c]], K=K, xi=gaussian_sampler(x0_mean, x0_std),
                lam_conv=0.5 * r, name="drift_control_constant_sigma",
                params=dict(a=a, abar=abar, b=b, sigma0=sigma0, q=q, r=r, c=c, K=K))

    def closed_form(t, x, mu, y, z):
        return -(b / r) * y

    spec = ControlProblemSpec(n=1, m=1, d=1, dynamics=dyn, f=f, dx_f=dx_f, dalpha_f=dalpha_f, dmu_f=dmu_f,
                              lam_conv=0.5 * r, K=K, xi=gaussian_sampler(x0_mean, x0_std), psi=psi,
                              name="drift_control_constant_sigma", closed_form=closed_form, lq=lq)
    return spec, lq_constants(lq)


BUILTINS = {
    "decoupled_ou": _decoupled_ou,
    "constant_driver_bsde": _constant_driver_bsde,
    "scalar_lq_meanfield": _scalar_lq_meanfield,
    "drift_control_constant_sigma": _drift_control_constant_sigma,
}


def builtin(name: str, **params):
    """Return ``(problem, constants)`` for a catalog entry; keyword overrides change parameters."""
    try:
        factory = BUILTINS[name]
    except KeyError:
        raise UnknownProblem(f"unknown problem {name!r}; choose from {sorted(BUILTINS)}") from None
    return factory(**params)


def as_coefficients(problem) -> CoefficientSet:
    """Coefficient set of a catalog problem, building the Hamiltonian system for control specs."""
    if isinstance(problem, CoefficientSet):
        return problem
    if isinstance(problem, LQSpec):
        return lq_to_coefficients(problem)
    if isinstance(problem, ControlProblemSpec):
        from .control import build_hamiltonian_system
        return build_hamiltonian_system(problem)
    raise TypeError(f"cannot build coefficients from {type(problem).__name__}")


# ---------------------------------------------------------------- validation

@dataclass
class ValidationReport:
    passed: bool
    failures: list
    details: dict

    def to_dict(self) -> dict:
        return {"passed": self.passed, "failures": list(self.failures), "details": self.details}


def _rel_err(a, b) -> float:
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float(np.max(np.abs(a - b)) / max(1.0, np.max(np.abs(b))))


def validate_spec(spec, samples: int = 16, seed: int = 0, h: float = 1e-4, fd_tol: float = 1e-3) -> ValidationReport:
    """Dimension and finiteness checks plus central-difference derivative checks."""
    rng = np.random.default_rng(seed)
    failures, details = [], {}
    if isinstance(spec, LQSpec):
        try:
            spec.R_inv()
        except SingularR as exc:
            return ValidationReport(False, [f"R: {exc}"], details)
        details["state_convexity"] = spec.state_convexity()
        details["lam_conv"] = spec.lam_conv
        if spec.lam_conv <= 0:
            failures.append("cost is not strongly convex in the control")
        sub = validate_spec(spec.control_spec(), samples, seed, h, fd_tol)
        failures += sub.failures
        details.update(sub.details)
        return ValidationReport(not failures, failures, details)

    if isinstance(spec, CoefficientSet):
        n, m, d = spec.dims
        x = rng.standard_normal((samples, n))
        y = rng.standard_normal((samples, m))
        z = rng.standard_normal((samples, m, d))
        law = EmpiricalLaw(x, y, z)
        for label, fn, shape in (("B", spec.drift, (samples, n)), ("F", spec.driver, (samples, m)),
                                 ("sigma", spec.vol, (samples, n, d))):
            try:
                out = np.asarray(fn(0.5, x, y, z, law))
            except ValueError as exc:
                failures.append(f"{label}: wrong output shape ({exc})")
                continue
            if out.shape != shape:
                failures.append(f"{label}: shape {out.shape} != {shape}")
            if not np.all(np.isfinite(out)):
                failures.append(f"{label}: non-finite output")
        return ValidationReport(not failures, failures, details)

    if not isinstance(spec, ControlProblemSpec):
        raise TypeError(f"cannot validate {type(spec).__name__}")

    n, m, d = spec.n, spec.m, spec.d
    if spec.lam_conv <= 0:
        failures.append("lam_conv must be positive")
    x = rng.standard_normal((samples, n))
    a = rng.standard_normal((samples, m))
    mu = EmpiricalLaw(rng.standard_normal((samples, n)))
    t = 0.5
    try:
        bv = np.asarray(spec.b(t, x, mu, a))
        sv = np.asarray(spec.sigma(t, x, mu, a))
        fv = np.asarray(spec.f(t, x, mu, a))
    except Exception as exc:  # user callables may fail arbitrarily
        return ValidationReport(False, [f"evaluation failed: {exc}"], details)
    for label, out, shape in (("b", bv, (samples, n)), ("sigma", sv, (samples, n, d)), ("f", fv, (samples,))):
        if out.shape != shape:
            failures.append(f"{label}: shape {out.shape} != {shape}")
        if not np.all(np.isfinite(out)):
            failures.append(f"{label}: non-finite output")

    def fd_grad(fun, base, k):
        e = np.zeros_like(base)
        e[:, k] = h
        return (fun(base + e) - fun(base - e)) / (2.0 * h)

    if spec.dx_f is None or spec.dalpha_f is None:
        failures.append("missing derivative callables")
    else:
        gx = np.asarray(spec.dx_f(t, x, mu, a))
        fdx = np.stack([fd_grad(lambda v: spec.f(t, v, mu, a), x, k) for k in range(n)], axis=1)
        ga = np.asarray(spec.dalpha_f(t, x, mu, a))
        fda = np.stack([fd_grad(lambda v: spec.f(t, x, mu, v), a, k) for k in range(m)], axis=1)
        details["dx_f_rel_err"] = _rel_err(gx, fdx)
        details["dalpha_f_rel_err"] = _rel_err(ga, fda)
        if details["dx_f_rel_err"] > fd_tol:
            failures.append(f"dx_f inconsistent with f (rel err {details['dx_f_rel_err']:.2e})")
        if details["dalpha_f_rel_err"] > fd_tol:
            failures.append(f"dalpha_f inconsistent with f (rel err {details['dalpha_f_rel_err']:.2e})")
    if spec.dmu_f is not None:
        # moving one atom x'_j of mu by h e_k changes f by h/M * dmu f(x'_j)_k
        j = 0
        errs = []
        for k in range(n):
            xs_p, xs_m = mu.x.copy(), mu.x.copy()
            xs_p[j, k] += h
            xs_m[j, k] -= h
            fd = (spec.f(t, x, EmpiricalLaw(xs_p), a) - spec.f(t, x, EmpiricalLaw(xs_m), a)) / (2.0 * h)
            kern = np.asarray(spec.dmu_f(t, x, mu, a, mu.x[j][None, :]))[:, k] / mu.M
            errs.append(_rel_err(kern * mu.M, fd * mu.M))
        details["dmu_f_rel_err"] = max(errs)
        if details["dmu_f_rel_err"] > fd_tol:
            failures.append(f"dmu_f inconsistent with f (rel err {details['dmu_f_rel_err']:.2e})")
        if spec.psi is not None:
            fast = np.asarray(spec.psi(t, mu.x, mu, a, x))
            slow = np.asarray(spec.dmu_f(t, mu.x[None, :, :], mu, a[None, :, :], x[:, None, :])).mean(axis=1)
            details["psi_rel_err"] = _rel_err(fast, slow)
            if details["psi_rel_err"] > 1e-10:
                failures.append("psi does not match the particle average of dmu_f")
    return ValidationReport(not failures, failures, details)
