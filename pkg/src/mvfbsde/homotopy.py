"""Continuation solver for coupled McKean-Vlasov FBSDEs.

The family at level ``lam`` is

    dX = [lam B - (1 - lam) kappa_x X + I^B] dt + [lam sigma + I^sigma] dW,
    dY = [lam F - (1 - lam) kappa_y Y + I^F] dt + Z dW,

which at ``lam = 0`` is decoupled and at ``lam = 1`` (zero injections) is
the target system. Iterates are decoupling fields (see
:mod:`mvfbsde.backward`): the forward sweep feeds ``y = u(t, X)``,
``z = v(t, X)`` of the current field into B and sigma, and the backward
sweep regresses a new field on the fresh forward paths.

Two schedules are available. ``flattened`` iterates that sweep directly
at each level, warm started from the previous level. ``nested`` runs the
two-level scheme: the step lam0 -> lam0 + delta iterates a map whose
evaluation is a full solve at lam0 with the injections

    I~^B = delta (B + kappa_x x) + I^B,  I~^F = delta (F + kappa_y y) + I^F,
    I~^sigma = delta sigma + I^sigma,

computed from the outer iterate. Its contraction factor shrinks with
delta, which is what the scaling diagnostics measure.

Large runs keep only every ``stride``-th forward slice and replay blocks
from those checkpoints with the regenerated noise during the backward
sweep; the replay is bit-identical to the original forward pass.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Union

import numpy as np

from .backward import Basis, DecouplingField, StepRegression, backward_step
from .coeffs import CoefficientSet, ConstantsBundle, as_coefficients
from .core import (
    AuditReport,
    EmpiricalLaw,
    NoiseSource,
    PathEnsemble,
    TimeGrid,
    norm_from_profile,
)
from .errors import GateViolated, NoConvergence, ShapeMismatch
from .forward import apply_vol, check_finite

DENSE_LIMIT = 25_000_000  # stored floats below which paths are kept in memory


# ---------------------------------------------------------------- configuration

@dataclass
class PicardConfig:
    """Continuation and inner-iteration settings.

    ``warm_start_coarsening = c > 1`` solves the levels below 1 on a grid
    with N/c steps and M/c particles and only the last level at full
    resolution. ``storage`` is ``dense``, ``checkpoint`` or ``auto``.
    """

    delta: float = 0.1
    max_iter: int = 50
    tol: float = 1e-4
    rho: float = 1.0
    mode: str = "flattened"
    max_halvings: int = 6
    warm_start_coarsening: int = 1
    storage: str = "auto"
    checkpoint_stride: Optional[int] = None
    basis: Union[str, tuple] = ("polynomial", 2)
    inner_tol_factor: float = 1e-2
    inner_max_iter: int = 100
    terminal: Union[float, Callable] = 0.0
    override_gates: bool = False

    def __post_init__(self):
        if not 0.0 < self.delta <= 1.0:
            raise ValueError(f"delta must lie in (0, 1], got {self.delta}")
        if not 0.0 < self.rho <= 1.0:
            raise ValueError(f"rho must lie in (0, 1], got {self.rho}")
        if self.mode not in ("flattened", "nested"):
            raise ValueError(f"mode must be flattened or nested, got {self.mode!r}")
        if self.max_iter < 1 or self.tol <= 0:
            raise ValueError("max_iter must be >= 1 and tol > 0")
        if self.warm_start_coarsening < 1:
            raise ValueError("warm_start_coarsening must be >= 1")


def as_injection(value) -> Optional[Callable]:
    """Normalise an injection to a callable (i, t, x) or None.

    Accepts None/0, a constant (scalar or array broadcast per particle),
    a callable ``(i, t, x)``, or a time-major path array.
    """
    if value is None:
        return None
    if callable(value):
        return value
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 0 and arr == 0.0:
        return None
    if arr.ndim >= 3:
        return lambda i, t, x: arr[i]
    return lambda i, t, x: arr


@dataclass
class Injections:
    B: Optional[Callable] = None
    F: Optional[Callable] = None
    sigma: Optional[Callable] = None

    @classmethod
    def of(cls, B=None, F=None, sigma=None) -> "Injections":
        return cls(as_injection(B), as_injection(F), as_injection(sigma))


# ---------------------------------------------------------------- level systems

class LevelSystem:
    """The coefficients of the family at one level, with the field used by the forward sweep."""

    def __init__(self, coeffs: Optional[CoefficientSet], kappa_x: float, kappa_y: float, lam: float,
                 injections: Injections, field: Optional[DecouplingField], dims: tuple, dt: float):
        self.coeffs = coeffs
        self.kappa_x, self.kappa_y = float(kappa_x), float(kappa_y)
        self.lam = float(lam)
        self.inj = injections
        self.field = field
        self.n, self.m, self.d = dims
        self.dt = dt

    def forward_step(self, i: int, t: float, x: np.ndarray, dw: np.ndarray) -> np.ndarray:
        lam = self.lam
        drift = None
        vol = None
        if lam > 0.0:
            M = x.shape[0]
            if self.field is None:
                y = np.zeros((M, self.m))
                z = np.zeros((M, self.m, self.d))
            else:
                y, z = self.field.values(i, x)
            law = EmpiricalLaw(x, y, z)
            drift = lam * self.coeffs.drift(t, x, y, z, law)
            vol = lam * self.coeffs.vol(t, x, y, z, law)
        if lam < 1.0 and self.kappa_x != 0.0:
            damp = -(1.0 - lam) * self.kappa_x * x
            drift = damp if drift is None else drift + damp
        if self.inj.B is not None:
            ib = self.inj.B(i, t, x)
            drift = ib if drift is None else drift + ib
        if self.inj.sigma is not None:
            iv = np.asarray(self.inj.sigma(i, t, x), dtype=float)
            vol = iv if vol is None else vol + iv
        out = x
        if drift is not None:
            out = out + np.broadcast_to(drift, x.shape) * self.dt
        if vol is not None:
            if vol.ndim < 2:
                vol = vol.reshape((1,) * (2 - vol.ndim) + vol.shape)
            if vol.ndim == 2 and vol.shape != (self.n, self.d):
                vol = vol.reshape(self.n, self.d)
            out = out + apply_vol(vol, dw)
        check_finite(out, i + 1)
        return out

    def driver(self, i: int, t: float, x, y, z, law) -> np.ndarray:
        lam = self.lam
        out = None
        if lam > 0.0:
            out = lam * self.coeffs.driver(t, x, y, z, law)
        if lam < 1.0 and self.kappa_y != 0.0:
            damp = -(1.0 - lam) * self.kappa_y * y
            out = damp if out is None else out + damp
        if self.inj.F is not None:
            fi = self.inj.F(i, t, x)
            out = fi if out is None else out + fi
        return np.zeros_like(y) if out is None else out

    def replay(self, s: int, e: int, x_s: np.ndarray, nodes: np.ndarray, dws: np.ndarray) -> np.ndarray:
        """Forward slices s..e from the slice at s with the block's increments."""
        out = np.empty((e - s + 1,) + x_s.shape)
        out[0] = x_s
        x = x_s
        for k in range(e - s):
            x = self.forward_step(s + k, nodes[s + k], x, dws[k])
            out[k + 1] = x
        return out


def nested_injections(coeffs: CoefficientSet, constants_kx: float, constants_ky: float, delta: float,
                      outer: DecouplingField, base: Injections) -> Injections:
    """Injected drivers of the two-level scheme, evaluated through the outer field at the current state."""
    cache = {}

    def evaluate(i, t, x):
        key = (i, id(x))
        hit = cache.get("last")
        if hit is not None and hit[0] == key:
            return hit[1]
        y, z = outer.values(i, x)
        law = EmpiricalLaw(x, y, z)
        val = (x, y, z, law)
        cache["last"] = (key, val)
        return val

    def inj_B(i, t, x):
        x_, y, z, law = evaluate(i, t, x)
        out = delta * (coeffs.drift(t, x, y, z, law) + constants_kx * x)
        return out if base.B is None else out + base.B(i, t, x)

    def inj_F(i, t, x):
        x_, y, z, law = evaluate(i, t, x)
        out = delta * (coeffs.driver(t, x, y, z, law) + constants_ky * y)
        return out if base.F is None else out + base.F(i, t, x)

    def inj_sigma(i, t, x):
        x_, y, z, law = evaluate(i, t, x)
        out = delta * coeffs.vol(t, x, y, z, law)
        return out if base.sigma is None else out + np.asarray(base.sigma(i, t, x))

    return Injections(inj_B, inj_F, inj_sigma)


# ---------------------------------------------------------------- path storage

class DenseStore:
    def __init__(self, N: int, M: int, n: int):
        self.X = np.empty((N + 1, M, n))

    def put(self, i: int, x: np.ndarray) -> None:
        self.X[i] = x

    def block(self, s, e, system, nodes, dws) -> np.ndarray:
        return self.X[s:e + 1]

    def slice(self, i: int) -> np.ndarray:
        return self.X[i]


class CheckpointStore:
    def __init__(self, N: int, stride: int):
        self.N = N
        self.stride = stride
        self.points = {}

    def put(self, i: int, x: np.ndarray) -> None:
        if i % self.stride == 0 or i == self.N:
            self.points[i] = x

    def block(self, s, e, system, nodes, dws) -> np.ndarray:
        return system.replay(s, e, self.points[s], nodes, dws)

    def slice(self, i: int) -> np.ndarray:
        return self.points[i]


def block_bounds(N: int, stride: int):
    return [(s, min(s + stride, N)) for s in range(0, N, stride)]


@dataclass
class Record:
    """One iterate: stored forward paths, the system that generated them, and the field giving (Y, Z) on them."""

    store: object
    system: LevelSystem
    field: DecouplingField
    y0: Optional[np.ndarray] = None


@dataclass
class SweepStats:
    residual: float
    parts: dict
    mean_sq: dict
    residual_profiles: dict


class Engine:
    """Shared machinery of one (grid, M, seed) resolution."""

    def __init__(self, coeffs: CoefficientSet, grid: TimeGrid, M: int, seed: int, cfg: PicardConfig,
                 x0: Optional[np.ndarray] = None, xi: Optional[Callable] = None):
        self.coeffs = coeffs
        self.grid = grid
        self.M = M
        self.seed = seed
        self.cfg = cfg
        self.n, self.m, self.d = coeffs.dims
        self.noise = NoiseSource(seed, M, self.d, grid.dt)
        if x0 is None:
            sampler = xi if xi is not None else coeffs.xi
            x0 = np.asarray(sampler(self.noise.initial(), M), dtype=float).reshape(M, -1)
        self.x0 = x0
        self.basis = Basis.parse(cfg.basis, self.n)
        floats = (grid.N + 1) * M * (2 * self.n + self.m * (1 + self.d))
        storage = cfg.storage
        if storage == "auto":
            storage = "dense" if floats <= DENSE_LIMIT else "checkpoint"
        self.storage = storage
        self.stride = cfg.checkpoint_stride or max(1, int(round(math.sqrt(grid.N))))
        if storage == "dense":
            self.stride = grid.N
        self.blocks = block_bounds(grid.N, self.stride)

    def new_store(self):
        if self.storage == "dense":
            return DenseStore(self.grid.N, self.M, self.n)
        return CheckpointStore(self.grid.N, self.stride)

    def system(self, lam: float, kappa_x: float, kappa_y: float, injections: Injections,
               field: Optional[DecouplingField]) -> LevelSystem:
        return LevelSystem(self.coeffs, kappa_x, kappa_y, lam, injections, field, (self.n, self.m, self.d),
                           self.grid.dt)

    def block_noise(self, s: int, e: int) -> np.ndarray:
        return np.stack([self.noise.increments(i) for i in range(s, e)])

    def terminal(self, x_T: np.ndarray) -> np.ndarray:
        term = self.cfg.terminal
        if callable(term):
            return np.broadcast_to(np.asarray(term(x_T), dtype=float).reshape(self.M, -1), (self.M, self.m)).copy()
        return np.broadcast_to(np.asarray(term, dtype=float), (self.M, self.m)).copy()

    # -- sweeps

    def forward(self, system: LevelSystem):
        store = self.new_store()
        x = self.x0
        nodes = self.grid.nodes
        for i in range(self.grid.N):
            store.put(i, x)
            x = system.forward_step(i, nodes[i], x, self.noise.increments(i))
        store.put(self.grid.N, x)
        return store

    def sweep(self, system: LevelSystem, prev: Optional[Record], keep_paths: bool = False):
        """Forward with ``system``, then a backward regression sweep on the new paths.

        Returns the new record and the squared-norm distance to ``prev``
        (to the zero iterate when ``prev`` is None).
        """
        grid, M, m, d = self.grid, self.M, self.m, self.d
        N, dt, nodes = grid.N, grid.dt, grid.nodes
        store = self.forward(system)
        new_field = DecouplingField(self.basis, N, m, d)
        rho = self.cfg.rho
        relax_to = system.field if rho < 1.0 else None

        prof = {k: np.zeros(N + 1) for k in ("X", "Y")}
        prof["Z"] = np.zeros(N)
        res = {k: np.zeros(N + 1) for k in ("X", "Y")}
        res["Z"] = np.zeros(N)
        paths = None
        if keep_paths:
            paths = {"Y": np.empty((N + 1, M, m)), "Z": np.empty((N, M, m, d))}
        y_next = None
        for s, e in reversed(self.blocks):
            dws = self.block_noise(s, e)
            xb = store.block(s, e, system, nodes, dws)
            xp = prev.store.block(s, e, prev.system, nodes, dws) if prev is not None else None
            if e == N:
                x_T = xb[-1]
                y_T = self.terminal(x_T)
                reg = StepRegression(self.basis, x_T, M)
                yc = reg.fit(y_T)
                if relax_to is not None:
                    yc = rho * yc + (1.0 - rho) * reg.fit(relax_to.y(N, x_T))
                new_field.set_step(N, reg, yc, None)
                y_rel = reg.predict(yc)
                y_next = y_T
                self._accumulate(N, x_T, y_rel, None, xp[-1] if xp is not None else None, prev, prof, res)
                if paths is not None:
                    paths["Y"][N] = y_rel
            for i in range(e - 1, s - 1, -1):
                x_i = xb[i - s]
                reg, yc, zc, y_i, z_i = backward_step(i, nodes[i], x_i, y_next, dws[i - s], dt, system.driver,
                                                      self.basis, M, m, d)
                y_next = y_i
                if relax_to is not None:
                    oy, oz = relax_to.values(i, x_i)
                    yc = rho * yc + (1.0 - rho) * reg.fit(oy)
                    zc = rho * zc + (1.0 - rho) * reg.fit(oz.reshape(M, m * d))
                    y_i = reg.predict(yc)
                    z_i = reg.predict(zc).reshape(M, m, d)
                new_field.set_step(i, reg, yc, zc)
                self._accumulate(i, x_i, y_i, z_i, xp[i - s] if xp is not None else None, prev, prof, res)
                if paths is not None:
                    paths["Y"][i] = y_i
                    paths["Z"][i] = z_i
        record = Record(store, system, new_field, y0=paths["Y"][0].copy() if paths is not None else None)
        if record.y0 is None:
            record.y0 = new_field.y(0, self.x0)
        parts = {k: norm_from_profile(v, grid).value for k, v in res.items()}
        stats = SweepStats(residual=float(sum(parts.values())), parts=parts, mean_sq=prof, residual_profiles=res)
        if paths is not None:
            stats.paths = paths
        return record, stats

    @staticmethod
    def _accumulate(i, x, y, z, xp, prev, prof, res):
        M = x.shape[0]
        prof["X"][i] = np.einsum("mk,mk->", x, x) / M
        prof["Y"][i] = np.einsum("mk,mk->", y, y) / M
        if z is not None:
            zf = z.reshape(M, -1)
            prof["Z"][i] = np.einsum("mk,mk->", zf, zf) / M
        if prev is None:
            res["X"][i] = prof["X"][i]
            res["Y"][i] = prof["Y"][i]
            if z is not None:
                res["Z"][i] = prof["Z"][i]
            return
        dx = x - xp
        res["X"][i] = np.einsum("mk,mk->", dx, dx) / M
        py, pz = prev.field.values(i, xp)
        dy = y - py
        res["Y"][i] = np.einsum("mk,mk->", dy, dy) / M
        if z is not None:
            dz = (z - pz).reshape(M, -1)
            res["Z"][i] = np.einsum("mk,mk->", dz, dz) / M

    def walk(self, records):
        """Yield (i, [(x, y, z) per record]) in forward order; z is None at the terminal node."""
        N, nodes = self.grid.N, self.grid.nodes
        for s, e in self.blocks:
            dws = self.block_noise(s, e)
            blocks = [r.store.block(s, e, r.system, nodes, dws) for r in records]
            last = e == N
            for i in range(s, e + 1 if last else e):
                out = []
                for r, b in zip(records, blocks):
                    x = b[i - s]
                    y, z = r.field.values(i, x)
                    out.append((x, y, None if i == N else z))
                yield i, out

    def distance(self, a: Record, b: Record) -> float:
        """Sum of squared weighted norms of the pathwise differences of two iterates."""
        N = self.grid.N
        res = {"X": np.zeros(N + 1), "Y": np.zeros(N + 1), "Z": np.zeros(N)}
        for i, ((xa, ya, za), (xb, yb, zb)) in self.walk([a, b]):
            res["X"][i] = _msq(xa - xb)
            res["Y"][i] = _msq(ya - yb)
            if za is not None:
                res["Z"][i] = _msq(za - zb)
        return float(sum(norm_from_profile(v, self.grid).value for v in res.values()))


def _msq(a: np.ndarray) -> float:
    a = a.reshape(a.shape[0], -1)
    return float(np.einsum("mk,mk->", a, a) / a.shape[0])


# ---------------------------------------------------------------- state and trace

@dataclass
class ConvergenceTrace:
    rows: list = field(default_factory=list)
    levels: list = field(default_factory=list)
    halvings: int = 0

    def add(self, lam: float, it: int, residual: float, phase: str = "level") -> None:
        self.rows.append({"lambda": float(lam), "iter": int(it), "residual": float(residual), "phase": phase})

    def level_residuals(self, lam: float, phase: Optional[str] = None) -> list:
        return [r["residual"] for r in self.rows
                if abs(r["lambda"] - lam) < 1e-12 and (phase is None or r["phase"] == phase)]

    @staticmethod
    def ratios(residuals, floor: float = 1e-26) -> list:
        out = []
        for a, b in zip(residuals[:-1], residuals[1:]):
            if a > floor and b > floor:
                out.append(b / a)
        return out

    def contraction_ratio(self, lam: float, phase: str = "level", skip: int = 1) -> float:
        """Geometric mean of successive residual ratios at a level, ignoring the first ``skip`` residuals."""
        r = self.ratios(self.level_residuals(lam, phase)[skip:])
        return float(np.exp(np.mean(np.log(r)))) if r else float("nan")

    def to_csv(self) -> str:
        lines = ["lambda,iter,residual"]
        lines += [f"{r['lambda']:.12g},{r['iter']},{r['residual']:.12e}" for r in self.rows]
        return "\n".join(lines) + "\n"


@dataclass
class ContinuationState:
    homotopy_lambda: float
    record: Optional[Record]
    injections: Injections = field(default_factory=Injections)
    iteration: int = 0
    residuals: list = field(default_factory=list)
    engine: Optional[Engine] = None

    def __post_init__(self):
        if not 0.0 <= self.homotopy_lambda <= 1.0 + 1e-12:
            raise ValueError("homotopy_lambda must lie in [0, 1]")


@dataclass
class FbsdeSolution:
    """A converged iterate with the means to stream its paths."""

    engine: Engine
    record: Record
    ensemble: PathEnsemble
    constants: Optional[ConstantsBundle] = None

    @property
    def grid(self) -> TimeGrid:
        return self.engine.grid

    @property
    def field(self) -> DecouplingField:
        return self.record.field

    @property
    def x0(self) -> np.ndarray:
        return self.engine.x0

    @property
    def y0(self) -> np.ndarray:
        return self.record.y0

    def paths(self):
        for i, ((x, y, z),) in self.engine.walk([self.record]):
            yield i, x, y, z


# ---------------------------------------------------------------- operations

def _check_base_gate(kappa_x: float, kappa_y: float, K: float) -> None:
    if not kappa_y < K < kappa_x:
        raise GateViolated(f"base system needs kappa_y < K < kappa_x, got {kappa_y} < {K} < {kappa_x}",
                           module="homotopy")


def solve_base(kappa_x: float, kappa_y: float, xi, grid: TimeGrid, M: int, seed: int = 0,
               injections: Optional[Injections] = None, dims: tuple = (1, 1, 1),
               cfg: Optional[PicardConfig] = None) -> FbsdeSolution:
    """The decoupled system dX = (-kappa_x X + I^B)dt + I^sigma dW, dY = (-kappa_y Y + I^F)dt + Z dW."""
    _check_base_gate(kappa_x, kappa_y, grid.K)
    n, m, d = dims
    zero = CoefficientSet(n, m, d, lambda *a: 0.0, lambda *a: 0.0, lambda *a: 0.0, xi=_sampler(xi, n))
    cfg = cfg or PicardConfig()
    eng = Engine(zero, grid, M, seed, cfg)
    system = eng.system(0.0, kappa_x, kappa_y, injections or Injections(), None)
    record, stats = eng.sweep(system, None, keep_paths=eng.storage == "dense")
    return FbsdeSolution(eng, record, _ensemble(eng, record, stats))


def _sampler(xi, n: int):
    if callable(xi):
        return xi
    x0 = np.broadcast_to(np.asarray(xi, dtype=float), (n,)).copy()
    return lambda rng, M: np.broadcast_to(x0, (M, n)).copy()


def _ensemble(eng: Engine, record: Record, stats: SweepStats) -> PathEnsemble:
    paths = getattr(stats, "paths", None)
    X = record.store.X if isinstance(record.store, DenseStore) else None
    ens = PathEnsemble(grid=eng.grid, M=eng.M, dims=(eng.n, eng.m, eng.d), seed=eng.seed, X=X,
                       Y=paths["Y"] if paths else None, Z=paths["Z"] if paths else None,
                       mean_sq=dict(stats.mean_sq))
    ens.meta["y0"] = record.y0
    ens.meta["x0"] = eng.x0
    return ens


def picard_step(state: ContinuationState, coeffs: CoefficientSet, constants: ConstantsBundle,
                delta: float, keep_paths: bool = False) -> ContinuationState:
    """One application of the two-level map from level lam0 to lam0 + delta.

    The outer iterate is ``state.record``. The level-lam0 system with the
    injections built from it is solved to the inner tolerance (a single
    sweep when lam0 = 0, where that system is decoupled), and the result
    is relaxed toward the outer iterate with ``cfg.rho``.
    """
    eng = state.engine
    cfg = eng.cfg
    lam0 = state.homotopy_lambda
    outer = state.record
    inj = nested_injections(coeffs, constants.kappa_x, constants.kappa_y, delta, outer.field, state.injections)
    inner_tol = cfg.tol * cfg.inner_tol_factor
    rec = outer
    if lam0 == 0.0:
        rec, stats = eng.sweep(eng.system(0.0, constants.kappa_x, constants.kappa_y, inj, outer.field), outer,
                               keep_paths=keep_paths)
    else:
        for _ in range(cfg.inner_max_iter):
            rec, stats = eng.sweep(eng.system(lam0, constants.kappa_x, constants.kappa_y, inj, rec.field), rec,
                                   keep_paths=keep_paths)
            if stats.residual < inner_tol:
                break
    residual = eng.distance(rec, outer)
    nxt = ContinuationState(lam0, rec, state.injections, state.iteration + 1, state.residuals + [residual], eng)
    nxt.stats = stats
    return nxt


def _gate_ok(constants: ConstantsBundle) -> tuple:
    from .verify import check_parameter_gate
    verdicts = check_parameter_gate(constants, "fbsde")
    failed = [v for v in verdicts if not v.passed]
    return not failed, failed


def _run_levels(eng: Engine, constants: ConstantsBundle, cfg: PicardConfig, trace: ConvergenceTrace,
                start: float, stop: float, record: Optional[Record], delta: float, injections: Injections,
                phase: str):
    """Advance from level ``start`` (with its converged record) to ``stop``.

    Returns (record, stats, delta, lam0) where lam0 is the level the last step started from.
    """
    kx, ky = constants.kappa_x, constants.kappa_y
    stats = None
    lam = start
    if record is None:
        system = eng.system(0.0, kx, ky, injections, None)
        record, stats = eng.sweep(system, None)
        trace.add(0.0, 1, stats.residual, phase)
        trace.levels.append({"lambda": 0.0, "iterations": 1, "converged": True, "phase": phase, "delta": delta})
        lam = 0.0
    halvings = 0
    last_start = lam
    while lam < stop - 1e-12:
        target = min(round(lam + delta, 12), stop)
        if stop - target < 1e-9:
            target = stop
        converged, rec, it = False, record, 0
        if cfg.mode == "flattened":
            for it in range(1, cfg.max_iter + 1):
                system = eng.system(target, kx, ky, injections, rec.field)
                rec, stats = eng.sweep(system, rec)
                trace.add(target, it, stats.residual, phase)
                if stats.residual < cfg.tol:
                    converged = True
                    break
        else:
            state = ContinuationState(lam, record, injections, 0, [], eng)
            for it in range(1, cfg.max_iter + 1):
                state = picard_step(state, eng.coeffs, constants, target - lam)
                trace.add(target, it, state.residuals[-1], phase)
                if state.residuals[-1] < cfg.tol:
                    converged = True
                    break
            rec = state.record
        trace.levels.append({"lambda": target, "iterations": it, "converged": converged, "phase": phase,
                             "delta": target - lam})
        if converged:
            record, last_start, lam = rec, lam, target
            continue
        halvings += 1
        trace.halvings += 1
        if halvings > cfg.max_halvings:
            raise NoConvergence(f"no convergence at lambda={target:g} after {cfg.max_halvings} halvings of delta",
                                trace=trace)
        delta *= 0.5
    return record, stats, delta, last_start


def solve_fbsde(coeffs, constants: ConstantsBundle, grid: TimeGrid, M: int, cfg: Optional[PicardConfig] = None,
                seed: int = 0, xi: Optional[Callable] = None, injections: Optional[Injections] = None):
    """Continuation from the decoupled system to the target; returns (solution, trace).

    The final iterate passes one extra sweep at lam = 1 that moves it by
    less than 2 tol, otherwise NoConvergence is raised.
    """
    cfg = cfg or PicardConfig()
    coeffs = as_coefficients(coeffs)
    ok, failed = _gate_ok(constants)
    if not ok and not cfg.override_gates:
        raise GateViolated("; ".join(f"{v.name}: {v.lhs:g} vs {v.rhs:g}" for v in failed), module="homotopy")
    injections = injections or Injections()
    trace = ConvergenceTrace()
    c = cfg.warm_start_coarsening
    if c > 1:
        coarse = Engine(coeffs, grid.coarsen(c), max(2, M // c), seed, cfg, xi=xi)
        last_below = 1.0 - cfg.delta
        rec_c, _, delta, _ = _run_levels(coarse, constants, cfg, trace, 0.0, max(last_below, 0.0), None, cfg.delta,
                                      injections, "coarse")
        eng = Engine(coeffs, grid, M, seed, cfg, xi=xi)
        field = rec_c.field.resample(grid.N)
        kx, ky = constants.kappa_x, constants.kappa_y
        rec, stats, converged, it = None, None, False, 0
        for it in range(1, cfg.max_iter + 1):
            system = eng.system(1.0, kx, ky, injections, field if rec is None else rec.field)
            rec, stats = eng.sweep(system, rec)
            trace.add(1.0, it, stats.residual, "level")
            if it > 1 and stats.residual < cfg.tol:
                converged = True
                break
        trace.levels.append({"lambda": 1.0, "iterations": it, "converged": converged, "phase": "level",
                             "delta": 1.0 - last_below})
        if not converged:
            raise NoConvergence("no convergence at lambda=1 on the full grid", trace=trace)
        record = rec
    else:
        eng = Engine(coeffs, grid, M, seed, cfg, xi=xi)
        record, stats, delta, last_start = _run_levels(eng, constants, cfg, trace, 0.0, 1.0, None, cfg.delta,
                                                       injections, "level")
    keep = eng.storage == "dense"
    if cfg.mode == "nested" and c == 1:
        # the check must apply the same map whose fixed point was found
        state = picard_step(ContinuationState(last_start, record, injections, 0, [], eng), eng.coeffs, constants,
                            1.0 - last_start, keep_paths=keep)
        final, stats, moved = state.record, state.stats, state.residuals[-1]
    else:
        final_system = eng.system(1.0, constants.kappa_x, constants.kappa_y, injections, record.field)
        final, stats = eng.sweep(final_system, record, keep_paths=keep)
        moved = stats.residual
    trace.add(1.0, 0, moved, "final")
    if not moved < 2.0 * cfg.tol:
        raise NoConvergence(f"final fixed-point check moved the iterate by {moved:.3g} >= 2 tol", trace=trace)
    ens = _ensemble(eng, final, stats)
    ens.meta["final_residual"] = moved
    return FbsdeSolution(eng, final, ens, constants), trace


# ---------------------------------------------------------------- stability audit

def audit_stability(sol: FbsdeSolution, sol_bar: FbsdeSolution, coeffs, coeffs_bar,
                    refined: Optional[tuple] = None) -> AuditReport:
    """Compare both sides of the stability estimate for two solutions on the same grid and noise.

    LHS = |X - Xb|_K^2 + |Y - Yb|_K^2 + |Z - Zb|_K^2 and
    RHS = E|xi - xib|^2 + |(B - Bb)(Theta_b)|_K^2 + |(F - Fb)(Theta_b)|_K^2 + |(sigma - sigmab)(Theta_b)|_K^2.
    The flag requires a finite ratio; with ``refined`` (the same pair on a
    grid with dt/2) it also requires the two ratios to agree within a factor 2.
    """
    coeffs, coeffs_bar = as_coefficients(coeffs), as_coefficients(coeffs_bar)
    if sol.grid != sol_bar.grid or sol.engine.M != sol_bar.engine.M or sol.engine.seed != sol_bar.engine.seed:
        raise ShapeMismatch("stability audit needs both solutions on the same grid, particle count and seed")
    lhs, rhs, parts = _stability_sides(sol, sol_bar, coeffs, coeffs_bar)
    ratio = lhs / rhs if rhs > 0 else (0.0 if lhs == 0 else math.inf)
    flag = bool(np.isfinite(ratio))
    extra = {"ratio": ratio, **parts}
    if refined is not None:
        fine = audit_stability(refined[0], refined[1], coeffs, coeffs_bar)
        r2 = fine.extra["ratio"]
        extra["ratio_refined"] = r2
        stable = np.isfinite(r2) and (ratio == r2 == 0 or (ratio > 0 and r2 > 0 and 0.5 <= r2 / ratio <= 2.0))
        flag = flag and bool(stable)
    return AuditReport(lhs=lhs, rhs=rhs, coef=ratio, flag=flag, extra=extra)


def _stability_sides(sol, sol_bar, coeffs, coeffs_bar):
    eng = sol.engine
    grid = eng.grid
    N = grid.N
    acc = {k: np.zeros(N + 1) for k in ("X", "Y", "B", "F", "sigma")}
    acc["Z"] = np.zeros(N)
    xi_sq = 0.0
    # same seed and grid, so both replays see identical increments
    gen_a = sol.paths()
    gen_b = sol_bar.paths()
    for (i, x, y, z), (_, xb, yb, zb) in zip(gen_a, gen_b):
        acc["X"][i] = _msq(x - xb)
        acc["Y"][i] = _msq(y - yb)
        if i == 0:
            xi_sq = _msq(x - xb)
        if i < N:
            acc["Z"][i] = _msq(z - zb)
            t = grid.nodes[i]
            law = EmpiricalLaw(xb, yb, zb)
            acc["B"][i] = _msq(coeffs.drift(t, xb, yb, zb, law) - coeffs_bar.drift(t, xb, yb, zb, law))
            acc["F"][i] = _msq(coeffs.driver(t, xb, yb, zb, law) - coeffs_bar.driver(t, xb, yb, zb, law))
            acc["sigma"][i] = _msq(np.asarray(coeffs.vol(t, xb, yb, zb, law) - coeffs_bar.vol(t, xb, yb, zb, law)))
    norms = {k: norm_from_profile(v, grid).value for k, v in acc.items()}
    lhs = norms["X"] + norms["Y"] + norms["Z"]
    rhs = xi_sq + norms["B"] + norms["F"] + norms["sigma"]
    return lhs, rhs, {"norms": norms, "xi_sq": xi_sq}
