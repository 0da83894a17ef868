"""Sampling checks of the Lipschitz and monotonicity assumptions and of the scalar parameter gates.

Square-integrable random variables are represented by mini-ensembles:
a pair (Theta_1, Theta_2) is two arrays of ``size`` equally likely
outcomes on a common probability space, so every expectation below is an
exact average over that space. A "certified" verdict only means that no
sampled pair violated the inequality.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .coeffs import CoefficientSet, ConstantsBundle, LQSpec, PairSample, as_coefficients, lq_gate_sides
from .core import EmpiricalLaw
from .errors import MissingConstant

DISCLAIMER = "certified-by-sampling is evidence from finitely many sampled pairs, not a proof"


# ---------------------------------------------------------------- sampling

@dataclass
class PairSampler:
    """Random mini-ensemble pairs with structured differences.

    Each pair j is drawn from its own counter-based stream, so the first k
    pairs are the same whatever the total count. Differences switch the x,
    y and z blocks on and off independently and use log-uniform scales, so
    both generic and degenerate directions get explored.
    """

    n: int
    m: int
    d: int
    box: float = 1.0
    size: int = 64
    horizon: float = 10.0
    seed: int = 0

    def rng(self, j: int) -> np.random.Generator:
        return np.random.Generator(np.random.Philox(key=np.array([self.seed, j], dtype=np.uint64)))

    def __call__(self, j: int) -> PairSample:
        rng = self.rng(j)
        S, n, m, d, box = self.size, self.n, self.m, self.d, self.box
        shapes = {"x": (S, n), "y": (S, m), "z": (S, m, d)}
        first, second = {}, {}
        mask = rng.integers(0, 2, 3)
        if not mask.any():
            mask[rng.integers(0, 3)] = 1
        for k, (name, shape) in enumerate(shapes.items()):
            spread = box * 10 ** rng.uniform(-1, 0)
            shift = box * rng.uniform(-0.5, 0.5, shape[1:])
            a = shift + spread * rng.standard_normal(shape)
            diff_scale = box * 10 ** rng.uniform(-2, 0)
            mean_shift = diff_scale * rng.uniform(-1, 1, shape[1:])
            b = a + mask[k] * (mean_shift + diff_scale * rng.standard_normal(shape))
            first[name] = np.clip(a, -box, box)
            second[name] = np.clip(b, -box, box)
        t = float(rng.uniform(0.0, self.horizon))
        return PairSample(t, first["x"], first["y"], first["z"], second["x"], second["y"], second["z"])


def sampler_for(coeffs: CoefficientSet, **kw) -> PairSampler:
    n, m, d = coeffs.dims
    return PairSampler(n, m, d, **kw)


def _evaluate(coeffs: CoefficientSet, t, x, y, z):
    law = EmpiricalLaw(x, y, z)
    return coeffs.drift(t, x, y, z, law), coeffs.driver(t, x, y, z, law), coeffs.vol(t, x, y, z, law)


def _e_inner(a, b) -> float:
    a = np.asarray(a).reshape(a.shape[0], -1)
    b = np.asarray(b).reshape(b.shape[0], -1)
    return float(np.mean(np.sum(a * b, axis=1)))


# ---------------------------------------------------------------- Lipschitz sampling

@dataclass
class LipschitzReport:
    l_hat: float
    declared: Optional[float]
    samples: int
    worst_pair: Optional[dict]
    verdict: str

    def to_dict(self) -> dict:
        return {"l_hat": self.l_hat, "declared": self.declared, "samples": self.samples, "verdict": self.verdict,
                "note": DISCLAIMER}


def check_h1(coeffs, sampler: Optional[Callable] = None, pairs: int = 1000, declared: Optional[float] = None,
             tol: float = 1e-9) -> LipschitzReport:
    """Largest sampled quotient |d(B, F, sigma)| / (|dx| + |dy| + |dz| + W2 bound) over particles and pairs."""
    coeffs = as_coefficients(coeffs)
    sampler = sampler or sampler_for(coeffs)
    best, worst = 0.0, None
    for j in range(pairs):
        p = sampler(j)
        b1, f1, s1 = _evaluate(coeffs, p.t, p.x1, p.y1, p.z1)
        b2, f2, s2 = _evaluate(coeffs, p.t, p.x2, p.y2, p.z2)
        S = p.x1.shape[0]
        num = np.sqrt(np.sum((b1 - b2) ** 2, axis=1) + np.sum((f1 - f2) ** 2, axis=1)
                      + np.sum((s1 - s2).reshape(S, -1) ** 2, axis=1))
        dx = np.linalg.norm(p.x1 - p.x2, axis=1)
        dy = np.linalg.norm(p.y1 - p.y2, axis=1)
        dz = np.linalg.norm((p.z1 - p.z2).reshape(S, -1), axis=1)
        w2 = np.sqrt(np.mean(dx ** 2 + dy ** 2 + dz ** 2))
        den = dx + dy + dz + w2
        ok = den > 1e-14
        if not ok.any():
            continue
        q = num[ok] / den[ok]
        k = int(np.argmax(q))
        if q[k] > best:
            best, worst = float(q[k]), p.to_dict()
    if declared is None:
        verdict = "estimated"
    else:
        verdict = "certified-by-sampling" if best <= declared * (1 + tol) + tol else "falsified"
    return LipschitzReport(best, declared, pairs, worst, verdict)


# ---------------------------------------------------------------- monotonicity sampling

@dataclass
class MonotonicityReport:
    condition: str
    samples: int
    worst_margin: float
    violating_pair: Optional[dict]
    verdict: str
    check_tol_rule: dict = field(default_factory=dict)
    margins: dict = field(default_factory=dict)
    sign: Optional[str] = None

    def __post_init__(self):
        if self.verdict not in ("certified-by-sampling", "falsified"):
            raise ValueError(f"unknown verdict {self.verdict!r}")
        if (self.verdict == "falsified") != (self.violating_pair is not None):
            raise ValueError("a falsified verdict must carry its violating pair, and only then")

    def to_dict(self) -> dict:
        return {"condition": self.condition, "samples": self.samples, "worst_margin": self.worst_margin,
                "violating_pair": self.violating_pair, "verdict": self.verdict, "sign": self.sign,
                "margins": self.margins, "check_tol": self.check_tol_rule, "note": DISCLAIMER}


def default_check_tol(size: int, scale: float, abs_tol: float = 1e-9) -> float:
    """1e-9 + 3 size^{-1/2} scale, with scale the pair's squared distance."""
    return abs_tol + 3.0 * scale / np.sqrt(size)


def _pair_scale(p: PairSample) -> float:
    S = p.x1.shape[0]
    return float(np.mean(np.sum((p.x1 - p.x2) ** 2, axis=1) + np.sum((p.y1 - p.y2) ** 2, axis=1)
                         + np.sum((p.z1 - p.z2).reshape(S, -1) ** 2, axis=1)))


def monotonicity_terms(coeffs: CoefficientSet, constants: ConstantsBundle, p: PairSample) -> dict:
    """The expectations entering the monotonicity and Case inequalities for one pair."""
    G = constants.G
    b1, f1, s1 = _evaluate(coeffs, p.t, p.x1, p.y1, p.z1)
    b2, f2, s2 = _evaluate(coeffs, p.t, p.x2, p.y2, p.z2)
    dX, dY, dZ = p.x1 - p.x2, p.y1 - p.y2, p.z1 - p.z2
    dB, dF, dS = b1 - b2, f1 - f2, s1 - s2
    GtY = dY @ G                      # G' dY as rows
    GtZ = np.einsum("ab,mad->mbd", G, dZ)
    GX = dX @ G.T
    lhs = (_e_inner(dB, GtY) + _e_inner(dS, GtZ) + _e_inner(dF, GX)
           + (constants.kappa_x + constants.kappa_y) * _e_inner(dX, GtY))
    return {
        "lhs": lhs,
        "phi1": float(constants.phi1(p)),
        "phi2": float(constants.phi2(p)),
        "ex2": _e_inner(dX, dX), "ey2": _e_inner(dY, dY), "ez2": _e_inner(dZ, dZ),
        "esig2": _e_inner(dS, dS), "eBx": _e_inner(dB, dX), "eFy": _e_inner(dF, dY),
    }


def _monotonicity_margins(terms: dict, c: ConstantsBundle) -> dict:
    rhs = c.beta1 * terms["phi1"] + c.beta2 * terms["phi2"]
    return {"le": -rhs - terms["lhs"], "ge": terms["lhs"] - rhs}


def _case_margins(terms: dict, c: ConstantsBundle) -> dict:
    t = terms
    if c.case == "Case1":
        return {
            "sigma": c.l_sigma * t["ex2"] + c.l_phi * t["phi2"] - t["esig2"],
            "B": -c.kappa_x * t["ex2"] + c.l_phi * t["phi2"] - t["eBx"],
            "F": t["eFy"] + (c.kappa_y + 0.5 * c.l_z) * t["ey2"] + 0.5 * c.gamma * t["ez2"]
                 + c.l_phi * (t["ex2"] + t["phi2"]),
        }
    yz = t["ey2"] + t["ez2"]
    return {
        "sigma": c.l_sigma * t["ex2"] + c.l_phi * yz - t["esig2"],
        "B": -c.kappa_x * t["ex2"] + c.l_phi * yz - t["eBx"],
        "F": t["eFy"] + (c.kappa_y + 0.5 * c.l_z) * t["ey2"] + 0.5 * c.gamma * t["ez2"] + c.l_phi * t["phi1"],
    }


def _scan(coeffs, constants, sampler, pairs, margin_fn, check_tol):
    worst = {}
    worst_pair = {}
    worst_slack = {}
    for j in range(pairs):
        p = sampler(j)
        margins = margin_fn(monotonicity_terms(coeffs, constants, p))
        tol = check_tol if check_tol is not None else default_check_tol(p.x1.shape[0], _pair_scale(p))
        for k, v in margins.items():
            # rank by margin relative to this pair's tolerance so the stored pair is the most violating one
            slack = v + tol
            if k not in worst or v < worst[k]:
                worst[k] = v
            if k not in worst_slack or slack < worst_slack[k]:
                worst_slack[k] = slack
                worst_pair[k] = (p, tol, v)
    return worst, worst_slack, worst_pair


def check_h2_monotonicity(coeffs, constants: ConstantsBundle, sampler: Optional[Callable] = None,
                          pairs: int = 1000, check_tol: Optional[float] = None) -> MonotonicityReport:
    """Test both signs of the monotonicity inequality; report the satisfied one (or the better one if neither)."""
    coeffs = as_coefficients(coeffs)
    sampler = sampler or sampler_for(coeffs)
    worst, slack, wpair = _scan(coeffs, constants, sampler, pairs,
                                lambda t: _monotonicity_margins(t, constants), check_tol)
    ok = {k: slack[k] >= 0 for k in ("le", "ge")}
    sign = "le" if ok["le"] or not ok["ge"] and slack["le"] >= slack["ge"] else "ge"
    certified = ok[sign]
    p, tol, v = wpair[sign]
    return MonotonicityReport(
        condition=f"monotonicity[{sign}]", samples=pairs, worst_margin=float(worst[sign]),
        violating_pair=None if certified else {**p.to_dict(), "margin": v, "check_tol": tol},
        verdict="certified-by-sampling" if certified else "falsified",
        check_tol_rule={"fixed": check_tol} if check_tol is not None else {"rule": "1e-9 + 3 size^-1/2 scale"},
        margins={k: float(w) for k, w in worst.items()}, sign=sign)


def check_h2_case(coeffs, constants: ConstantsBundle, sampler: Optional[Callable] = None, pairs: int = 1000,
                  check_tol: Optional[float] = None) -> MonotonicityReport:
    """The three Case inequalities (sigma, B, F) of the declared case, margins reported separately."""
    coeffs = as_coefficients(coeffs)
    sampler = sampler or sampler_for(coeffs)
    worst, slack, wpair = _scan(coeffs, constants, sampler, pairs, lambda t: _case_margins(t, constants), check_tol)
    failing = [k for k in ("sigma", "B", "F") if slack[k] < 0]
    key = min(slack, key=slack.get)
    violating = None
    if failing:
        p, tol, v = wpair[failing[0]]
        violating = {**p.to_dict(), "inequality": failing[0], "margin": v, "check_tol": tol}
    return MonotonicityReport(
        condition=constants.case, samples=pairs, worst_margin=float(worst[key]), violating_pair=violating,
        verdict="falsified" if failing else "certified-by-sampling",
        check_tol_rule={"fixed": check_tol} if check_tol is not None else {"rule": "1e-9 + 3 size^-1/2 scale"},
        margins={k: float(w) for k, w in worst.items()}, sign=None)


def replay(report: MonotonicityReport, coeffs, constants: ConstantsBundle) -> float:
    """Recompute the margin of a stored violating pair."""
    if report.violating_pair is None:
        raise ValueError("report has no violating pair")
    coeffs = as_coefficients(coeffs)
    data = {k: v for k, v in report.violating_pair.items() if k in ("t", "x1", "y1", "z1", "x2", "y2", "z2")}
    terms = monotonicity_terms(coeffs, constants, PairSample.from_dict(data))
    if report.condition.startswith("monotonicity"):
        return float(_monotonicity_margins(terms, constants)[report.sign])
    return float(_case_margins(terms, constants)[report.violating_pair["inequality"]])


# ---------------------------------------------------------------- gates

@dataclass
class GateVerdict:
    name: str
    passed: bool
    lhs: float
    rhs: float
    relation: str

    def to_dict(self) -> dict:
        return {"name": self.name, "passed": self.passed, "lhs": self.lhs, "rhs": self.rhs, "relation": self.relation}


def _need(constants: ConstantsBundle, *names):
    vals = []
    for nm in names:
        v = getattr(constants, nm)
        if v is None:
            raise MissingConstant(f"constant {nm!r} is required for this gate")
        vals.append(float(v))
    return vals


def _lt(name, a, b) -> GateVerdict:
    return GateVerdict(name, bool(a < b), float(a), float(b), "<")


def check_parameter_gate(constants: ConstantsBundle, problem_class: str = "fbsde",
                         lq: Optional[LQSpec] = None, k_tol: float = 1e-12) -> list:
    """Every scalar gate of the requested class, with both sides.

    Classes: ``fbsde`` (separation and K at the midpoint, plus the
    equivalent two-sided form), ``sde``, ``bsde``, ``lq_control``
    (the linear-convex K bound on top of the fbsde gates).
    """
    out = []
    if problem_class in ("fbsde", "lq_control"):
        kx, ky, ls, lz, K = constants.kappa_x, constants.kappa_y, constants.l_sigma, constants.l_z, constants.K
        out.append(GateVerdict("separation", bool(kx - ky > max(ls, lz)), kx - ky, max(ls, lz), ">"))
        mid = 0.5 * (kx + ky)
        out.append(GateVerdict("K_midpoint", bool(abs(K - mid) <= k_tol * (1 + abs(mid))), K, mid, "=="))
        out.append(_lt("equivalent_lower", ky + 0.5 * lz, K))
        out.append(_lt("equivalent_upper", K, kx - 0.5 * ls))
    if problem_class == "lq_control":
        if lq is None:
            raise MissingConstant("lq_control gates need the LQ data")
        sides = lq_gate_sides(lq)
        out.insert(0, _lt("linear_convex_K", sides["lhs"], sides["rhs"]))
        out.append(GateVerdict("control_convexity", bool(lq.lam_conv > 0), float(lq.lam_conv), 0.0, ">"))
    elif problem_class == "sde":
        kx = constants.kappa_x
        lsx, lsm, lbm = _need(constants, "l_sigma_x", "l_sigma_mu", "l_b_mu")
        out.append(_lt("sde_K", constants.K, kx - 0.5 * (lsx + lsm) ** 2 - lbm))
    elif problem_class == "bsde":
        lz, lmy, lmz = _need(constants, "bsde_lz", "l_mu_y", "l_mu_z")
        rhs = constants.kappa_y + lmy + lz ** 2 + lmz ** 2
        out.append(GateVerdict("bsde_K", bool(constants.K > rhs), float(constants.K), float(rhs), ">"))
    elif problem_class != "fbsde":
        raise ValueError(f"unknown problem class {problem_class!r}")
    return out


def gates_pass(verdicts) -> bool:
    return all(v.passed for v in verdicts)
