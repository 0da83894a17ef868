"""Time grids, particle ensembles, empirical laws and discounted norms.

Paths are stored time-major: a path array has shape ``(L, M, ...)`` where
``L`` is ``N + 1`` for node-valued processes (X, Y) and ``N`` for
interval-valued ones (Z).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional

import numpy as np

from .errors import (
    DimensionMismatch,
    Exact1dOnMultiD,
    NonPositiveHorizon,
    ShapeMismatch,
    WeightOverflow,
)

MAX_EXPONENT = 300.0
DEFAULT_TAIL_TOL = 1e-4


@dataclass(frozen=True)
class TimeGrid:
    T: float
    N: int
    K: float

    @property
    def dt(self) -> float:
        return self.T / self.N

    @cached_property
    def nodes(self) -> np.ndarray:
        t = np.arange(self.N + 1, dtype=float) * self.dt
        t[-1] = self.T
        return t

    @cached_property
    def weights(self) -> np.ndarray:
        """Discount weights exp(2 K t_i) at every node."""
        return np.exp(2.0 * self.K * self.nodes)

    def refine(self, factor: int) -> "TimeGrid":
        return TimeGrid(self.T, self.N * factor, self.K)

    def coarsen(self, factor: int) -> "TimeGrid":
        if self.N % factor:
            raise ShapeMismatch(f"N={self.N} is not divisible by {factor}")
        return TimeGrid(self.T, self.N // factor, self.K)


def make_grid(T: float, N: int, K: float) -> TimeGrid:
    """Uniform grid on [0, T] carrying the discount rate K."""
    if not np.isfinite(T) or T <= 0:
        raise NonPositiveHorizon(f"horizon must be positive, got T={T}")
    if int(N) != N or N < 1:
        raise NonPositiveHorizon(f"step count must be a positive integer, got N={N}")
    if not np.isfinite(K):
        raise WeightOverflow(f"non-finite rate K={K}")
    if 2.0 * K * T > MAX_EXPONENT:
        raise WeightOverflow(f"2KT = {2.0 * K * T:g} exceeds {MAX_EXPONENT:g}")
    return TimeGrid(float(T), int(N), float(K))


class EmpiricalLaw:
    """Non-owning view of an ensemble slice, split into (x, y, z) blocks.

    ``samples`` concatenates the blocks into an ``(M, k)`` array on demand;
    coefficient code usually only needs the block means.
    """

    def __init__(self, x: np.ndarray, y: Optional[np.ndarray] = None, z: Optional[np.ndarray] = None):
        self.x = _as_2d(x)
        self.y = None if y is None else _as_2d(y)
        self.z = None if z is None else np.asarray(z)
        if self.x.shape[0] < 2:
            raise ShapeMismatch("an empirical law needs at least two samples")

    @classmethod
    def from_samples(cls, samples: np.ndarray) -> "EmpiricalLaw":
        return cls(np.asarray(samples, dtype=float))

    @property
    def M(self) -> int:
        return self.x.shape[0]

    def _blocks(self):
        out = [self.x]
        if self.y is not None:
            out.append(self.y)
        if self.z is not None:
            out.append(self.z.reshape(self.M, -1))
        return out

    @property
    def dim(self) -> int:
        return sum(b.shape[1] for b in self._blocks())

    @cached_property
    def samples(self) -> np.ndarray:
        blocks = self._blocks()
        return blocks[0] if len(blocks) == 1 else np.concatenate(blocks, axis=1)

    @cached_property
    def mean_x(self) -> np.ndarray:
        return self.x.mean(axis=0)

    @cached_property
    def mean_y(self) -> np.ndarray:
        return self.y.mean(axis=0)

    @cached_property
    def mean_z(self) -> np.ndarray:
        return self.z.mean(axis=0)

    @cached_property
    def mean(self) -> np.ndarray:
        return np.concatenate([b.mean(axis=0) for b in self._blocks()])

    @cached_property
    def second_moment(self) -> float:
        return float(sum(np.mean(np.sum(b * b, axis=1)) for b in self._blocks()))


def _as_2d(a) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    if a.ndim == 1:
        return a[:, None]
    return a


@dataclass
class WeightedNormReport:
    value: float
    contributions: np.ndarray

    def __post_init__(self):
        self.value = float(self.value)


@dataclass
class TailReport:
    profile: np.ndarray
    terminal: float
    decreasing: bool
    flag: bool


@dataclass
class PathEnsemble:
    """Particle trajectories of (X, Y, Z) on a grid.

    Any of X, Y, Z may be ``None`` when that component was not requested or
    was only streamed; ``mean_sq`` then still carries the per-node particle
    average of |.|^2 for every component that was computed.
    """

    grid: TimeGrid
    M: int
    dims: tuple
    seed: int
    X: Optional[np.ndarray] = None
    Y: Optional[np.ndarray] = None
    Z: Optional[np.ndarray] = None
    mean_sq: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.M < 2:
            raise ShapeMismatch("an ensemble needs M >= 2 particles")
        for name in ("X", "Y", "Z"):
            arr = getattr(self, name)
            if arr is not None and name not in self.mean_sq:
                self.mean_sq[name] = mean_square_profile(arr)

    def norm(self, name: str) -> WeightedNormReport:
        return norm_from_profile(self.mean_sq[name], self.grid)

    def tail(self, name: str, tail_tol: float = DEFAULT_TAIL_TOL) -> TailReport:
        return tail_from_profile(self.mean_sq[name], self.grid, tail_tol)


def mean_square_profile(paths: np.ndarray) -> np.ndarray:
    """Particle average of |f_i|^2 for each time slice of a time-major array."""
    a = np.asarray(paths, dtype=float)
    if a.ndim < 2:
        raise ShapeMismatch("paths must have shape (L, M, ...)")
    flat = a.reshape(a.shape[0], a.shape[1], -1)
    return np.einsum("lmk,lmk->l", flat, flat) / a.shape[1]


def _check_length(length: int, grid: TimeGrid) -> None:
    if length not in (grid.N, grid.N + 1):
        raise ShapeMismatch(f"path length {length} does not match grid with N={grid.N}")


def norm_from_profile(profile: np.ndarray, grid: TimeGrid) -> WeightedNormReport:
    profile = np.asarray(profile, dtype=float)
    _check_length(profile.shape[0], grid)
    contrib = grid.dt * grid.weights[: grid.N] * profile[: grid.N]
    return WeightedNormReport(value=float(contrib.sum()), contributions=contrib)


def weighted_sq_norm(paths: np.ndarray, grid: TimeGrid) -> WeightedNormReport:
    """Left-rectangle value of E int_0^T exp(2Ks)|f(s)|^2 ds with E the particle mean."""
    paths = np.asarray(paths)
    _check_length(paths.shape[0], grid)
    return norm_from_profile(mean_square_profile(paths), grid)


def _final_quarter_decreasing(profile: np.ndarray) -> bool:
    tail = profile[len(profile) - max(len(profile) // 4, 2):]
    nblocks = min(4, len(tail))
    blocks = np.array([b.mean() for b in np.array_split(tail, nblocks)])
    if blocks[0] == 0.0:
        return bool(np.all(blocks == 0.0))
    return bool(np.all(np.diff(blocks) <= 0.0) and blocks[-1] < blocks[0])


def tail_from_profile(profile: np.ndarray, grid: TimeGrid, tail_tol: float = DEFAULT_TAIL_TOL) -> TailReport:
    profile = np.asarray(profile, dtype=float)
    _check_length(profile.shape[0], grid)
    weighted = grid.weights[: profile.shape[0]] * profile
    terminal = float(weighted[-1])
    decreasing = _final_quarter_decreasing(weighted)
    return TailReport(weighted, terminal, decreasing, bool(decreasing and terminal < tail_tol))


def tail_weight_profile(paths: np.ndarray, grid: TimeGrid, tail_tol: float = DEFAULT_TAIL_TOL) -> TailReport:
    """Profile exp(2K t_i) E|f_i|^2 with the vanishing-tail flag.

    The decrease test compares four block means over the final quarter of
    the grid, so Monte Carlo jitter between neighbouring nodes is ignored.
    """
    paths = np.asarray(paths)
    _check_length(paths.shape[0], grid)
    return tail_from_profile(mean_square_profile(paths), grid, tail_tol)


def w2_distance(a, b, mode: Optional[str] = None) -> float:
    """W2 between two equal-size empirical laws.

    ``exact1d`` uses the sorted coupling, ``coupling_bound`` pairs samples by
    index. The default is exact1d in dimension one and the bound otherwise.
    """
    sa = a.samples if isinstance(a, EmpiricalLaw) else _as_2d(a)
    sb = b.samples if isinstance(b, EmpiricalLaw) else _as_2d(b)
    if sa.shape[1] != sb.shape[1]:
        raise DimensionMismatch(f"dimensions differ: {sa.shape[1]} vs {sb.shape[1]}")
    if sa.shape[0] != sb.shape[0]:
        raise ShapeMismatch(f"sample counts differ: {sa.shape[0]} vs {sb.shape[0]}")
    if mode is None:
        mode = "exact1d" if sa.shape[1] == 1 else "coupling_bound"
    if mode == "exact1d":
        if sa.shape[1] != 1:
            raise Exact1dOnMultiD("exact1d needs one-dimensional samples")
        diff = np.sort(sa[:, 0]) - np.sort(sb[:, 0])
        return float(np.sqrt(np.mean(diff * diff)))
    if mode == "coupling_bound":
        diff = sa - sb
        return float(np.sqrt(np.mean(np.sum(diff * diff, axis=1))))
    raise ValueError(f"unknown mode {mode!r}")


class ProfileAccumulator:
    """Streams per-node mean squares so norms and tails need no stored paths."""

    def __init__(self, length: int):
        self.profile = np.zeros(length)

    def update(self, i: int, values: np.ndarray) -> None:
        v = values.reshape(values.shape[0], -1)
        self.profile[i] = np.einsum("mk,mk->", v, v) / v.shape[0]


class NoiseSource:
    """Counter-based Brownian increments.

    Step ``i`` draws from a Philox stream keyed by ``(seed, i)``, so any
    step can be regenerated on its own without storing the noise.
    Particle j always receives the j-th draw of that stream.
    """

    INITIAL_STREAM = 2**64 - 1

    def __init__(self, seed: int, M: int, d: int, dt: float):
        self.seed = int(seed) % 2**64
        self.M = int(M)
        self.d = int(d)
        self.sqrt_dt = float(np.sqrt(dt))

    def generator(self, stream: int) -> np.random.Generator:
        key = np.array([self.seed, int(stream) % 2**64], dtype=np.uint64)
        return np.random.Generator(np.random.Philox(key=key))

    def increments(self, i: int) -> np.ndarray:
        return self.sqrt_dt * self.generator(i).standard_normal((self.M, self.d))

    def initial(self) -> np.random.Generator:
        return self.generator(self.INITIAL_STREAM)


@dataclass
class AuditReport:
    """Both sides of an estimate with the slack used for the verdict."""

    lhs: float
    rhs: float
    coef: float
    flag: bool
    slack: float = 0.0
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"lhs": float(self.lhs), "rhs": float(self.rhs), "coef": float(self.coef), "flag": bool(self.flag)}


def audit_slack(dt: float, M: int) -> float:
    """Default tolerance for inequalities proved in continuum: 5 dt + 3 / sqrt(M)."""
    return 5.0 * dt + 3.0 / np.sqrt(M)
