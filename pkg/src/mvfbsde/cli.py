"""Command-line entry point: one subcommand per pipeline, deterministic write-once outputs.

Every run writes ``manifest.json`` (the resolved configuration, library
versions and seed) plus its result files into ``--out`` and prints a single
summary line ``<subcommand> ok|fail <metric>``. Exit status: 0 ok, 2 when an
audit or verification fails, 1 on error.
"""
from __future__ import annotations

import os

_THREADS = os.environ.get("MVFBSDE_THREADS")
if _THREADS:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _THREADS)

import argparse  # noqa: E402
import json  # noqa: E402
import platform  # noqa: E402
import sys  # noqa: E402
from dataclasses import asdict, dataclass, field, fields, replace  # noqa: E402
from pathlib import Path  # noqa: E402
from typing import Optional  # noqa: E402

import numpy as np  # noqa: E402
import scipy  # noqa: E402
import yaml  # noqa: E402

from . import __version__  # noqa: E402
from .coeffs import (BUILTINS, CoefficientSet, ControlProblemSpec, LQSpec, as_coefficients, builtin,  # noqa: E402
                     gaussian_sampler, lq_constants)
from .core import make_grid  # noqa: E402
from .errors import ConfigParse, SolverError  # noqa: E402

SCHEMA = "1"
SUBCOMMANDS = ("solve-sde", "solve-bsde", "solve-fbsde", "control-solve", "verify-optimality",
               "check-assumptions", "oracle-lq", "audit")
EXIT_OK, EXIT_ERROR, EXIT_FAIL = 0, 1, 2


@dataclass
class RunConfig:
    subcommand: str
    problem: str = "scalar_lq_meanfield"
    T: float = 10.0
    N: int = 1000
    K: Optional[float] = None
    M: int = 10000
    seed: int = 0
    delta: float = 0.1
    tol: float = 1e-4
    rho: float = 1.0
    max_iter: int = 50
    mode: str = "flattened"
    coarsen: int = 1
    audits: bool = True
    out: str = "run"
    format: str = "csv"
    override_gates: bool = False
    params: dict = field(default_factory=dict)
    perturbations: int = 20
    pairs: int = 1000

    def validate(self) -> None:
        if self.subcommand not in SUBCOMMANDS:
            raise ConfigParse(f"unknown subcommand {self.subcommand!r}")
        if self.format not in ("csv", "jsonl"):
            raise ConfigParse(f"format must be csv or jsonl, got {self.format!r}")
        if self.M < 2:
            raise ConfigParse("M must be at least 2")
        if self.problem not in BUILTINS and not Path(self.problem).is_file():
            raise ConfigParse(f"problem {self.problem!r} is neither a builtin nor an existing file")
        make_grid(self.T, self.N, 0.0 if self.K is None else self.K)

    def echo(self) -> dict:
        return asdict(self)


CONFIG_KEYS = {f.name for f in fields(RunConfig)} - {"subcommand"}


def load_config_file(path: str) -> dict:
    """Keys of a YAML/JSON config, or the ``config`` block of a manifest written by a previous run."""
    p = Path(path)
    if not p.is_file():
        raise ConfigParse(f"config file {path!r} does not exist")
    try:
        data = yaml.safe_load(p.read_text())
    except yaml.YAMLError as exc:
        raise ConfigParse(f"cannot parse {path!r}: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigParse(f"{path!r} does not hold a mapping")
    if "config" in data and "versions" in data:
        data = data["config"]
    data = {k.replace("-", "_"): v for k, v in data.items()}
    unknown = set(data) - CONFIG_KEYS - {"subcommand"}
    if unknown:
        raise ConfigParse(f"unknown config keys: {sorted(unknown)}")
    return data


# ---------------------------------------------------------------- problems

def load_problem(cfg: RunConfig):
    """(problem, constants) from a builtin name or an LQ data file."""
    if cfg.problem in BUILTINS:
        params = dict(cfg.params)
        if cfg.K is not None:
            params["K"] = cfg.K
        try:
            return builtin(cfg.problem, **params)
        except TypeError as exc:
            raise ConfigParse(f"bad parameters for {cfg.problem}: {exc}") from None
    try:
        data = yaml.safe_load(Path(cfg.problem).read_text())
    except yaml.YAMLError as exc:
        raise ConfigParse(f"cannot parse {cfg.problem!r}: {exc}") from None
    lq_data = data.get("lq") if isinstance(data, dict) else None
    if lq_data is None:
        raise ConfigParse(f"{cfg.problem!r} must contain an 'lq' mapping")
    lq_data = dict(lq_data)
    if cfg.K is not None:
        lq_data["K"] = cfg.K
    x0 = lq_data.pop("x0", {"mean": 0.0, "std": 0.0})
    try:
        lq = LQSpec(xi=gaussian_sampler(x0.get("mean", 0.0), x0.get("std", 0.0)),
                    name=Path(cfg.problem).stem, **lq_data)
    except TypeError as exc:
        raise ConfigParse(f"bad LQ data: {exc}") from None
    return lq, lq_constants(lq)


def _lq_of(problem) -> Optional[LQSpec]:
    if isinstance(problem, LQSpec):
        return problem
    if isinstance(problem, ControlProblemSpec):
        return problem.lq
    return None


# ---------------------------------------------------------------- output

class Output:
    """Write-once files in the run directory."""

    def __init__(self, root: str, fmt: str):
        self.root = Path(root)
        self.fmt = fmt
        self.root.mkdir(parents=True, exist_ok=True)
        self.written = []

    def _path(self, name: str) -> Path:
        p = self.root / name
        if p.exists():
            raise ConfigParse(f"{p} already exists; outputs are write-once, choose a fresh --out")
        self.written.append(name)
        return p

    def table(self, stem: str, columns: list, rows) -> None:
        if self.fmt == "csv":
            lines = [",".join(columns)]
            lines += [",".join(_fmt(v) for v in row) for row in rows]
            self._path(stem + ".csv").write_text("\n".join(lines) + "\n")
        else:
            lines = [json.dumps({"schema": SCHEMA, **dict(zip(columns, map(_plain, row)))}, sort_keys=True)
                     for row in rows]
            self._path(stem + ".jsonl").write_text("\n".join(lines) + ("\n" if lines else ""))

    def json(self, name: str, obj: dict) -> None:
        self._path(name).write_text(json.dumps({"schema": SCHEMA, **_plain(obj)}, indent=1, sort_keys=True) + "\n")


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.12e}"
    return str(v)


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, float) and not np.isfinite(obj):
        return str(obj)
    if callable(obj):
        return getattr(obj, "__name__", "callable")
    return obj


def _profile_rows(grid, profile):
    n = len(profile)
    return [(grid.nodes[i], grid.weights[i] * profile[i]) for i in range(n)]


# ---------------------------------------------------------------- subcommands

def _grid(cfg: RunConfig, K: float):
    return make_grid(cfg.T, cfg.N, K)


def _picard(cfg: RunConfig):
    from .homotopy import PicardConfig
    return PicardConfig(delta=cfg.delta, tol=cfg.tol, rho=cfg.rho, max_iter=cfg.max_iter, mode=cfg.mode,
                        warm_start_coarsening=cfg.coarsen, override_gates=cfg.override_gates)


def cmd_solve_sde(cfg, problem, constants, out):
    from .forward import SdeAuditData, SdeRunConfig, audit_sde_apriori, solve_sde
    coeffs = as_coefficients(problem)
    grid = _grid(cfg, constants.K)
    ens = solve_sde(coeffs, SdeRunConfig(grid, cfg.M, cfg.seed, keep_paths=False))
    norm = ens.norm("X")
    out.table("profile_X", ["t", "weighted_mean_sq"], _profile_rows(grid, ens.mean_sq["X"]))
    result = {"norm_X": norm.value, "tail": asdict(ens.tail("X"))}
    ok = True
    if cfg.audits and constants.l_sigma_x is not None:
        data = SdeAuditData(kappa_x=constants.kappa_x, K=constants.K, l_sigma_x=constants.l_sigma_x,
                            l_sigma_mu=constants.l_sigma_mu, l_b_mu=constants.l_b_mu,
                            b_at_zero=coeffs.meta.get("b_at_zero", lambda t: 0.0),
                            sigma_at_zero=coeffs.meta.get("sigma_at_zero", lambda t: 0.0))
        rep = audit_sde_apriori(ens, data)
        result["audit"] = rep.to_dict()
        ok = rep.flag
    out.json("result.json", result)
    return ok, f"norm_X={norm.value:.6g}"


def _forward_paths(cfg, coeffs, grid):
    from .forward import SdeRunConfig, solve_sde
    return solve_sde(coeffs, SdeRunConfig(grid, cfg.M, cfg.seed, keep_paths=True))


def cmd_solve_bsde(cfg, problem, constants, out):
    from .backward import BsdeAuditData, BsdeRunConfig, audit_bsde_apriori, solve_bsde
    coeffs = as_coefficients(problem)
    grid = _grid(cfg, constants.K)
    fwd = _forward_paths(cfg, coeffs, grid)
    bcfg = BsdeRunConfig(grid, cfg.M, cfg.seed, m=coeffs.m, d=coeffs.d)
    ens = solve_bsde(coeffs.driver, bcfg, forward=fwd)
    for name in ("Y", "Z"):
        out.table(f"profile_{name}", ["t", "weighted_mean_sq"], _profile_rows(grid, ens.mean_sq[name]))
    y0 = float(np.mean(ens.Y[0]))
    result = {"y0_mean": y0, "norm_Y": ens.norm("Y").value, "norm_Z": ens.norm("Z").value}
    ok = True
    if cfg.audits and constants.bsde_lz is not None:
        data = BsdeAuditData(kappa_y=constants.kappa_y, K=constants.K, l_z=constants.bsde_lz,
                             l_mu_y=constants.l_mu_y, l_mu_z=constants.l_mu_z,
                             f_at_zero=coeffs.meta.get("f_at_zero", lambda t: 0.0))
        rep = audit_bsde_apriori(ens, data)
        result["audit"] = rep.to_dict()
        ok = rep.flag
    out.json("result.json", result)
    return ok, f"y0={y0:.6g}"


def _solve_fbsde(cfg, problem, constants, out):
    from .homotopy import solve_fbsde
    grid = _grid(cfg, constants.K)
    sol, trace = solve_fbsde(problem, constants, grid, cfg.M, _picard(cfg), seed=cfg.seed)
    out.table("trace", ["lambda", "iter", "residual"],
              [(r["lambda"], r["iter"], r["residual"]) for r in trace.rows])
    for name in ("X", "Y", "Z"):
        out.table(f"profile_{name}", ["t", "weighted_mean_sq"], _profile_rows(grid, sol.ensemble.mean_sq[name]))
    return sol, trace, grid


def cmd_solve_fbsde(cfg, problem, constants, out):
    sol, trace, grid = _solve_fbsde(cfg, problem, constants, out)
    y0 = float(np.mean(sol.y0))
    out.json("result.json", {"y0_mean": y0, "levels": trace.levels, "halvings": trace.halvings,
                             "final_residual": sol.ensemble.meta["final_residual"]})
    return True, f"y0={y0:.6g}"


def cmd_control_solve(cfg, problem, constants, out):
    from .control import evaluate_cost, feedback_from_field
    if isinstance(problem, CoefficientSet):
        raise ConfigParse(f"{cfg.problem} is not a control problem")
    sol, trace, grid = _solve_fbsde(cfg, problem, constants, out)
    rep = evaluate_cost(feedback_from_field(problem, sol.field), problem, grid, cfg.M, seed=cfg.seed)
    out.json("result.json", {"y0_mean": float(np.mean(sol.y0)), "cost": rep.to_dict(), "levels": trace.levels})
    return True, f"J={rep.J:.6g}"


def cmd_verify_optimality(cfg, problem, constants, out):
    from .control import feedback_from_field, smooth_perturbation, verify_optimality
    if isinstance(problem, CoefficientSet):
        raise ConfigParse(f"{cfg.problem} is not a control problem")
    sol, trace, grid = _solve_fbsde(cfg, problem, constants, out)
    rng = np.random.default_rng(cfg.seed)
    m = _lq_of(problem).m if _lq_of(problem) is not None else problem.m
    etas = [smooth_perturbation(rng, m) for _ in range(cfg.perturbations)]
    rep = verify_optimality(feedback_from_field(problem, sol.field), problem, etas, grid, cfg.M, seed=cfg.seed)
    out.json("result.json", rep.to_dict())
    return rep.all_flags, f"strictly_greater={rep.strictly_greater}/{cfg.perturbations}"


def cmd_check_assumptions(cfg, problem, constants, out):
    from .verify import check_h1, check_h2_monotonicity, check_parameter_gate
    coeffs = as_coefficients(problem)
    lq = _lq_of(problem)
    verdicts = check_parameter_gate(constants, "lq_control" if lq is not None else "fbsde", lq=lq)
    h2 = check_h2_monotonicity(coeffs, constants, pairs=cfg.pairs)
    h1 = check_h1(coeffs, pairs=min(cfg.pairs, 1000), declared=constants.l)
    gates = {v.name: v.to_dict() for v in verdicts}
    ok = all(v.passed for v in verdicts) and h2.verdict == "certified-by-sampling" and h1.verdict != "falsified"
    out.json("report.json", {"gates": gates, "all_gates": all(v.passed for v in verdicts), "h2": asdict(h2),
                             "h1": h1.to_dict(), "constants": constants.to_dict()})
    return ok, f"gates={sum(v.passed for v in verdicts)}/{len(verdicts)} h2={h2.verdict}"


def cmd_oracle_lq(cfg, problem, constants, out):
    from .oracle import riccati_fbsde_residual, riccati_lq, value_supported
    lq = _lq_of(problem)
    if lq is None:
        raise ConfigParse(f"{cfg.problem} has no LQ structure")
    grid = _grid(cfg, lq.K)
    sol = riccati_lq(lq, grid)
    n, m = lq.n, lq.m
    cols = ["t"]
    cols += [f"p_{i}{j}" for i in range(n) for j in range(n)]
    cols += [f"p_bar_{i}{j}" for i in range(n) for j in range(n)]
    cols += [f"k_{i}{j}" for i in range(m) for j in range(n)]
    cols += [f"k_bar_{i}{j}" for i in range(m) for j in range(n)]
    rows = [(sol.t[i], *sol.P[i].ravel(), *sol.p_bar[i].ravel(), *sol.gain[i].ravel(), *sol.gain_mean[i].ravel())
            for i in range(len(sol.t))]
    out.table("riccati", cols, rows)
    rng = np.random.default_rng(cfg.seed)
    x0 = np.asarray(lq.xi(rng, cfg.M), dtype=float).reshape(cfg.M, n)
    value_supported(lq)
    value = sol.value(x0.mean(axis=0), np.atleast_2d(np.cov(x0.T, bias=True)))
    resid = riccati_fbsde_residual(sol)
    out.json("result.json", {"value": value, "p0": sol.P[0], "p_bar0": sol.p_bar[0], "fbsde_residual": resid,
                             "stationary_P": sol.stationary_P, "stationary_Pi": sol.stationary_Pi})
    return resid <= 1e-6, f"value={value:.6g}"


def cmd_audit(cfg, problem, constants, out):
    """A priori audits where the constants allow them, plus the stability audit for LQ problems."""
    from .backward import BsdeAuditData, BsdeRunConfig, audit_bsde_apriori, solve_bsde
    from .forward import SdeAuditData, SdeRunConfig, audit_sde_apriori, solve_sde
    coeffs = as_coefficients(problem)
    grid = _grid(cfg, constants.K)
    reports = {}
    if constants.l_sigma_x is not None:
        ens = solve_sde(coeffs, SdeRunConfig(grid, cfg.M, cfg.seed, keep_paths=False))
        data = SdeAuditData(kappa_x=constants.kappa_x, K=constants.K, l_sigma_x=constants.l_sigma_x,
                            l_sigma_mu=constants.l_sigma_mu, l_b_mu=constants.l_b_mu,
                            b_at_zero=coeffs.meta.get("b_at_zero", lambda t: 0.0),
                            sigma_at_zero=coeffs.meta.get("sigma_at_zero", lambda t: 0.0))
        reports["sde_apriori"] = audit_sde_apriori(ens, data).to_dict()
    if constants.bsde_lz is not None:
        fwd = solve_sde(coeffs, SdeRunConfig(grid, cfg.M, cfg.seed, keep_paths=True))
        ens = solve_bsde(coeffs.driver, BsdeRunConfig(grid, cfg.M, cfg.seed, m=coeffs.m, d=coeffs.d), forward=fwd)
        data = BsdeAuditData(kappa_y=constants.kappa_y, K=constants.K, l_z=constants.bsde_lz,
                             l_mu_y=constants.l_mu_y, l_mu_z=constants.l_mu_z,
                             f_at_zero=coeffs.meta.get("f_at_zero", lambda t: 0.0))
        reports["bsde_apriori"] = audit_bsde_apriori(ens, data).to_dict()
    if isinstance(problem, LQSpec):
        lq = problem
        from .homotopy import audit_stability, solve_fbsde
        bumped = replace(lq, Q=lq.Q + 0.05 * np.eye(lq.n), lam_conv=None)
        sol, _ = solve_fbsde(lq, constants, grid, cfg.M, _picard(cfg), seed=cfg.seed)
        sol_b, _ = solve_fbsde(bumped, lq_constants(bumped), grid, cfg.M, _picard(cfg), seed=cfg.seed)
        reports["stability"] = audit_stability(sol, sol_b, lq, bumped).to_dict()
    if not reports:
        raise ConfigParse(f"no audit applies to {cfg.problem}")
    out.json("audits.json", reports)
    flags = [r["flag"] for r in reports.values() if "flag" in r and r["flag"] is not None]
    ok = all(flags)
    return ok, " ".join(f"{k}={'pass' if r.get('flag') else 'fail'}" for k, r in reports.items())


COMMANDS = {
    "solve-sde": cmd_solve_sde,
    "solve-bsde": cmd_solve_bsde,
    "solve-fbsde": cmd_solve_fbsde,
    "control-solve": cmd_control_solve,
    "verify-optimality": cmd_verify_optimality,
    "check-assumptions": cmd_check_assumptions,
    "oracle-lq": cmd_oracle_lq,
    "audit": cmd_audit,
}


# ---------------------------------------------------------------- driver

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mvfbsde", description=__doc__.splitlines()[0])
    ap.add_argument("subcommand", choices=SUBCOMMANDS)
    ap.add_argument("--problem")
    ap.add_argument("--spec", "--config", dest="spec", help="YAML/JSON config with the same keys, or a manifest")
    ap.add_argument("--T", type=float)
    ap.add_argument("--N", type=int)
    ap.add_argument("--K", type=float)
    ap.add_argument("--M", type=int)
    ap.add_argument("--seed", type=int)
    ap.add_argument("--delta", type=float)
    ap.add_argument("--tol", type=float)
    ap.add_argument("--rho", type=float)
    ap.add_argument("--max-iter", dest="max_iter", type=int)
    ap.add_argument("--mode", choices=("flattened", "nested"))
    ap.add_argument("--coarsen", type=int)
    ap.add_argument("--out")
    ap.add_argument("--format", choices=("csv", "jsonl"))
    ap.add_argument("--override-gates", dest="override_gates", action="store_true", default=None)
    ap.add_argument("--no-audits", dest="audits", action="store_false", default=None)
    ap.add_argument("--params", type=json.loads, help="JSON object of builtin parameter overrides")
    ap.add_argument("--perturbations", type=int)
    ap.add_argument("--pairs", type=int)
    return ap


def resolve_config(argv) -> RunConfig:
    args = build_parser().parse_args(argv)
    values = {}
    if args.spec:
        values.update(load_config_file(args.spec))
    for key, val in vars(args).items():
        if key in ("spec", "subcommand") or val is None:
            continue
        values[key] = val
    values.pop("subcommand", None)
    try:
        cfg = RunConfig(subcommand=args.subcommand, **values)
    except TypeError as exc:
        raise ConfigParse(str(exc)) from None
    cfg.validate()
    return cfg


def manifest(cfg: RunConfig, outputs: list, status: str) -> dict:
    return {"config": cfg.echo(), "seed": cfg.seed, "status": status, "outputs": outputs,
            "versions": {"mvfbsde": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
                         "python": platform.python_version()}}


def run(cfg: RunConfig) -> int:
    out = Output(cfg.out, cfg.format)
    problem, constants = load_problem(cfg)
    ok, metric = COMMANDS[cfg.subcommand](cfg, problem, constants, out)
    status = "ok" if ok else "fail"
    out.json("manifest.json", manifest(cfg, list(out.written), status))
    print(f"{cfg.subcommand} {status} {metric}")
    return EXIT_OK if ok else EXIT_FAIL


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    sub = argv[0] if argv else "mvfbsde"
    try:
        cfg = resolve_config(argv)
        return run(cfg)
    except SolverError as exc:
        print(f"{sub} fail {exc.code}")
        print(f"error {exc.code}: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except (ValueError, KeyError, OSError) as exc:
        code = "cli.ConfigParse" if isinstance(exc, (KeyError, OSError)) else f"cli.{type(exc).__name__}"
        print(f"{sub} fail {code}")
        print(f"error {code}: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
