"""Batch front-end: ``deadcore <command> --config <path>``.

Commands: ``solve``, ``sweep``, ``analyze``, ``oracle``, ``residual``. The
configuration grammar is documented in ``docs/config.md``. Exit status:
0 all checks pass, 1 some check fails, 2 invalid configuration, 3 solver
did not converge (diagnostics are still written).
"""

from __future__ import annotations

import argparse
import configparser
import json
import sys
import time
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from .core import AdmissibilityError, Grid, ScalarField, exponents, make_params
from .fileio import read_field_csv, write_field_csv, write_field_pgm, write_json, write_mask_pgm
from .freeboundary import analyze, extract_sets
from .limit import SweepPlan, finalize_sweep, limit_residual_report, r0_limit, run_sweep
from .oracle import limit_radial_oracle, radial_oracle, theta
from .solver import Problem, SolverConfig, coarsen, solve

COMMANDS = ("solve", "sweep", "analyze", "oracle", "residual")
EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_SOLVER = 0, 1, 2, 3


class ConfigError(ValueError):
    def __init__(self, where: str, msg: str):
        super().__init__(f"{where}: {msg}")
        self.where = where


@dataclass
class RunConfig:
    command: str
    geometry: dict
    params: dict
    boundary: dict
    solver: SolverConfig
    analysis: dict
    sweep: dict
    out: Path
    pgm: bool = True
    raw: dict = field(default_factory=dict, repr=False)


# -- parsing ----------------------------------------------------------------------

def _read_raw(path: Optional[str]) -> dict:
    if path is None:
        return {}
    text = Path(path).read_text()
    if text.lstrip().startswith("{"):
        data = json.loads(text)
        if not isinstance(data, dict):
            raise ConfigError("config", "JSON config must be an object")
        raw = {"run": {}}
        for k, v in data.items():
            if isinstance(v, dict):
                raw[k] = dict(v)
            else:
                raw["run"][k] = v
        return raw
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    # keys before the first section belong to [run]
    cp.read_string("[run]\n" + text)
    return {s: dict(cp[s]) for s in cp.sections()}


def _num(where, v, kind=float):
    if isinstance(v, (list, tuple)):
        raise ConfigError(where, f"expected a number, got {v!r}")
    try:
        return kind(v)
    except (TypeError, ValueError):
        raise ConfigError(where, f"expected {kind.__name__}, got {v!r}") from None


def _vec(where, v, kind=float):
    if isinstance(v, str):
        v = [t for t in v.replace(",", " ").split() if t]
    if not isinstance(v, (list, tuple)):
        v = [v]
    return [_num(where, t, kind) for t in v]


def _bool(where, v):
    if isinstance(v, bool):
        return v
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ConfigError(where, f"expected a boolean, got {v!r}")


_SOLVER_FIELDS = {f.name: f for f in fields(SolverConfig)}


def _solver(raw: dict) -> SolverConfig:
    kw = {}
    for k, v in raw.items():
        if k not in _SOLVER_FIELDS:
            raise ConfigError(f"solver.{k}", "unknown key")
        default = _SOLVER_FIELDS[k].default
        if isinstance(default, bool):
            kw[k] = _bool(f"solver.{k}", v)
        elif isinstance(default, int):
            kw[k] = _num(f"solver.{k}", v, int)
        elif isinstance(default, tuple):
            kw[k] = tuple(_vec(f"solver.{k}", v))
        else:
            kw[k] = _num(f"solver.{k}", v)
    try:
        return SolverConfig(**kw)
    except ValueError as e:
        raise ConfigError("solver", str(e)) from None


def build_config(raw: dict, overrides: Optional[dict] = None) -> RunConfig:
    overrides = overrides or {}
    run = raw.get("run", {})
    command = overrides.get("command") or run.get("command")
    if not command:
        raise ConfigError("command", "missing command")
    if command not in COMMANDS:
        raise ConfigError("command", f"unknown command {command!r} (choose from {', '.join(COMMANDS)})")
    known = {"run", "geometry", "params", "boundary", "solver", "analysis", "sweep", "output"}
    for s in raw:
        if s not in known:
            raise ConfigError(s, "unknown section")
    params = dict(raw.get("params", {}))
    geometry = dict(raw.get("geometry", {}))
    sweep = dict(raw.get("sweep", {}))
    for key in ("p", "q", "ell"):
        if overrides.get(key) is not None:
            params[key] = overrides[key]
    if overrides.get("ell") is not None:
        sweep["ell"] = overrides["ell"]
    if overrides.get("n") is not None:
        geometry["n"] = overrides["n"]
        sweep["n"] = overrides["n"]
    output = dict(raw.get("output", {}))
    out = Path(overrides.get("out") or output.get("dir", "."))
    cfg = RunConfig(command=command, geometry=geometry, params=params,
                    boundary=dict(raw.get("boundary", {})), solver=_solver(raw.get("solver", {})),
                    analysis=dict(raw.get("analysis", {})), sweep=sweep, out=out,
                    pgm=_bool("output.pgm", output.get("pgm", True)), raw=raw)
    if command in ("solve", "analyze", "oracle"):
        make_params_from(cfg)  # validate before dispatch
    if command == "sweep":
        sweep_plan(cfg)
    return cfg


def make_params_from(cfg: RunConfig):
    p = cfg.params
    if "p" not in p:
        raise ConfigError("params.p", "missing")
    N = _num("params.N", p.get("N", cfg.geometry.get("dim", 1)), int)
    q = _num("params.q", p.get("q", 0.0))
    ell = p.get("ell")
    try:
        return make_params(N, _num("params.p", p["p"]), q, _num("params.lambda0", p.get("lambda0", 1.0)),
                           None if ell is None else _num("params.ell", ell))
    except AdmissibilityError as e:
        raise ConfigError("params", str(e)) from None


def make_problem(cfg: RunConfig) -> Problem:
    params = make_params_from(cfg)
    g = cfg.geometry
    dim = params.N
    if _num("geometry.dim", g.get("dim", dim), int) != dim:
        raise ConfigError("geometry.dim", f"does not match params.N={dim}")
    lower = _vec("geometry.lower", g.get("lower", -2.0))
    upper = _vec("geometry.upper", g.get("upper", 2.0))
    lower = lower * dim if len(lower) == 1 else lower
    upper = upper * dim if len(upper) == 1 else upper
    if len(lower) != dim or len(upper) != dim:
        raise ConfigError("geometry.lower/upper", f"need {dim} entries")
    n = _vec("geometry.n", g.get("n", 257), int)
    n = n * dim if len(n) == 1 else n
    try:
        grid = Grid.box(lower, upper, n)
    except ValueError as e:
        raise ConfigError("geometry", str(e)) from None
    kind = str(g.get("domain", "box"))
    b = cfg.boundary
    try:
        if kind == "disk":
            R = _num("geometry.R", g.get("R", min(u - l for l, u in zip(lower, upper)) / 2))
            center = _vec("geometry.center", g.get("center", [0.0] * dim))
            kappa = _num("boundary.kappa", b.get("kappa", 1.0))
            return Problem.disk(params, grid, R, kappa, tuple(center))
        if kind != "box":
            raise ConfigError("geometry.domain", f"expected box or disk, got {kind!r}")
        return Problem.box(params, grid, _box_data(b, grid, dim))
    except ConfigError:
        raise
    except ValueError as e:
        raise ConfigError("geometry/boundary", str(e)) from None


def _box_data(b: dict, grid: Grid, dim: int):
    edges = ("left", "right") if dim == 1 else ("left", "right", "bottom", "top")
    unknown = set(b) - set(edges) - {"kappa"}
    if unknown:
        raise ConfigError(f"boundary.{sorted(unknown)[0]}", "unknown key")
    if not any(e in b for e in edges):
        return _num("boundary.kappa", b.get("kappa", 1.0))
    base = _num("boundary.kappa", b.get("kappa", 0.0))
    g = np.full(grid.shape, base)
    # later edges win at corners: left, right, then bottom, top
    for k, e in enumerate(edges):
        if e in b:
            idx = [slice(None)] * dim
            idx[k // 2] = 0 if k % 2 == 0 else -1
            g[tuple(idx)] = _num(f"boundary.{e}", b[e])
    return g


def sweep_plan(cfg: RunConfig) -> SweepPlan:
    s = cfg.sweep
    if "ell" not in s:
        raise ConfigError("sweep.ell", "missing")
    kw = dict(ell=_num("sweep.ell", s["ell"]))
    if "p_list" in s:
        kw["p_list"] = tuple(_vec("sweep.p_list", s["p_list"]))
    for k, kind in (("N", int), ("n", int), ("R", float), ("kappa", float), ("lambda0", float),
                    ("tol_fb", float)):
        if k in s:
            kw[k] = _num(f"sweep.{k}", s[k], kind)
    unknown = set(s) - set(kw)
    if unknown:
        raise ConfigError(f"sweep.{sorted(unknown)[0]}", "unknown key")
    try:
        return SweepPlan(config=cfg.solver, **kw)
    except (ValueError, AdmissibilityError) as e:
        raise ConfigError("sweep", str(e)) from None


# -- commands -------------------------------------------------------------------

def _envelope(cfg: RunConfig, body: dict) -> dict:
    body = dict(body)
    body["command"] = cfg.command
    body["timestamp"] = time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())
    return body


def _oracle_info(problem: Problem, sol) -> dict:
    """Distance to the closed-form profile when the geometry has one."""
    prm = problem.params
    if not prm.constant_lambda0:
        return {}
    g = problem.boundary_data.values[problem.fixed_mask]
    if not np.all(g == g[0]):
        return {}
    kappa = float(g[0])
    try:
        if problem.domain_mask is not None:
            o = radial_oracle(prm, problem.radius, kappa, problem.center)
            if prm.N >= 2 and o.r0 > 0:
                return {"oracle": "approximate only (N >= 2 with r0 > 0)"}
            mask = problem.collar_mask(1)
        else:
            lo, ext = problem.grid.origin[0], problem.grid.extent[0]
            if prm.N != 1:
                return {}
            o = radial_oracle(prm, ext / 2, kappa, lo + ext / 2)
            mask = np.ones(problem.grid.shape, dtype=bool)
    except ValueError as e:
        return {"oracle": str(e)}
    err = np.abs(sol.values - o.on_grid(problem.grid))[mask]
    return {"oracle": {"theta": o.theta, "T": o.T, "r0": o.r0, "sup_error": float(err.max())}}


def _analysis_kw(cfg: RunConfig) -> dict:
    a = cfg.analysis
    kw = {}
    if "tol_fb" in a:
        kw["tol_fb"] = _num("analysis.tol_fb", a["tol_fb"])
    if "delta_h" in a:
        kw["delta_h"] = _num("analysis.delta_h", a["delta_h"])
    if "max_points" in a:
        kw["max_points"] = _num("analysis.max_points", a["max_points"], int)
    return kw


def _write_field_outputs(cfg: RunConfig, fld: ScalarField, dead_mask) -> list:
    written = []
    write_field_csv(cfg.out / "solution.csv", fld)
    written.append("solution.csv")
    if cfg.pgm and fld.grid.dim == 2:
        write_field_pgm(cfg.out / "field.pgm", fld)
        write_mask_pgm(cfg.out / "deadcore.pgm", dead_mask)
        written += ["field.pgm", "deadcore.pgm"]
    return written


def cmd_solve(cfg: RunConfig) -> int:
    problem = make_problem(cfg)
    sol = solve(problem, cfg.solver)
    body = {"params": problem.params.to_dict(), "grid": problem.grid.to_dict(),
            "solver": {"converged": sol.converged, "iterations": sol.iterations,
                       "residual_norm": sol.residual_norm,
                       "scaled_residual": sol.diagnostics.get("scaled_residual"),
                       "energy_final": sol.energy_trace[-1],
                       "energy_monotone": bool(np.all(np.diff(sol.energy_trace) <= 0))}}
    body.update(_oracle_info(problem, sol))
    exps = exponents(problem.params)
    body["targets"] = {"alpha": exps.alpha, "grad_alpha": exps.grad_alpha, "hess_alpha": exps.hess_alpha}
    if not sol.converged:
        body["checks"] = []
        _write_field_outputs(cfg, sol.field, extract_sets(sol, **_delta(cfg))[0].mask())
        write_json(cfg.out / "report.json", _envelope(cfg, body))
        print(f"solver did not converge after {sol.iterations} iterations", file=sys.stderr)
        return EXIT_SOLVER
    other = None
    if _bool("analysis.refine", cfg.analysis.get("refine", True)):
        coarse = coarsen(problem)
        if coarse is not None:
            other = solve(coarse, cfg.solver)
    rep = analyze(sol, other, **_analysis_kw(cfg))
    body["freeboundary"] = rep.to_dict()
    body["checks"] = body["freeboundary"].pop("checks")
    body["outputs"] = _write_field_outputs(cfg, sol.field, rep.dead_core.mask())
    write_json(cfg.out / "report.json", _envelope(cfg, body))
    _print_checks(body["checks"])
    return EXIT_OK if rep.passed else EXIT_CHECK


def _delta(cfg):
    return {"delta_h": _num("analysis.delta_h", cfg.analysis["delta_h"])} if "delta_h" in cfg.analysis else {}


def _input_field(cfg: RunConfig) -> ScalarField:
    path = cfg.analysis.get("input")
    if not path:
        raise ConfigError("analysis.input", "missing (path to a solution CSV)")
    try:
        return read_field_csv(path)
    except (OSError, ValueError) as e:
        raise ConfigError("analysis.input", str(e)) from None


def cmd_analyze(cfg: RunConfig) -> int:
    fld = _input_field(cfg)
    params = make_params_from(cfg)
    rep = analyze(fld, None, params=params, **_analysis_kw(cfg))
    body = {"params": params.to_dict(), "grid": fld.grid.to_dict(), "freeboundary": rep.to_dict()}
    body["checks"] = body["freeboundary"].pop("checks")
    # growth needs a second resolution, which a single stored field cannot supply
    for c in body["checks"]:
        if c["claim"] == "improved regularity along the free boundary":
            c["notes"].append("single field: refinement comparison unavailable")
    write_json(cfg.out / "report.json", _envelope(cfg, body))
    _print_checks(body["checks"])
    return EXIT_OK if all(c["status"] == "PASS" for c in body["checks"]) else EXIT_CHECK


def cmd_sweep(cfg: RunConfig) -> int:
    plan = sweep_plan(cfg)
    rep = finalize_sweep(run_sweep(plan))
    body = rep.to_dict()
    body["checks"].insert(0, {"claim": "uniform convergence to the limit profile",
                              "target": "sup distance non-increasing after the first p (5% slack)",
                              "status": "PASS" if rep.monotone else "FAIL",
                              "values": {"sup_to_limit": rep.sup_to_limit}, "vacuous": False,
                              "notes": []})
    write_json(cfg.out / "report.json", _envelope(cfg, body))
    if rep.solutions:
        top = rep.solutions[-1]
        _write_field_outputs(cfg, top.field, extract_sets(top)[0].mask())
    _print_checks(body["checks"])
    if rep.aborted:
        print(rep.abort_reason, file=sys.stderr)
        return EXIT_SOLVER
    return EXIT_OK if all(c["status"] == "PASS" for c in body["checks"]) else EXIT_CHECK


def cmd_oracle(cfg: RunConfig) -> int:
    params = make_params_from(cfg)
    if not params.constant_lambda0:
        raise ConfigError("params.lambda0", "oracle needs a constant lambda0")
    th = theta(params.N, params.lambda0, params.p, params.q)
    g = cfg.geometry
    R = _num("geometry.R", g.get("R", 2.0))
    kappa = _num("boundary.kappa", cfg.boundary.get("kappa", 1.0))
    exps = exponents(params)
    body = {"params": params.to_dict(), "theta": th, "R": R, "kappa": kappa,
            "alpha": exps.alpha, "grad_alpha": exps.grad_alpha, "hess_alpha": exps.hess_alpha}
    try:
        o = radial_oracle(params, R, kappa)
        body.update(T=o.T, r0=o.r0, dead_core=True)
    except ValueError as e:
        body.update(T=(kappa / th) ** ((params.p - 1 - params.q) / params.p), r0=None, dead_core=False,
                    note=str(e))
    if params.ell is not None:
        body["r0_limit"] = r0_limit(params.ell, R, kappa)
    body["checks"] = []
    write_json(cfg.out / "report.json", _envelope(cfg, body))
    print(f"theta = {th:.17g}")
    print(f"T = {body['T']:.17g}")
    print(f"r0 = {body['r0']:.17g}" if body["r0"] is not None else "r0 = none (no dead core)")
    if "r0_limit" in body:
        print(f"r0_limit = {body['r0_limit']:.17g}")
    return EXIT_OK


def cmd_residual(cfg: RunConfig) -> int:
    a = cfg.analysis
    ell_src = cfg.params.get("ell", a.get("ell"))
    if ell_src is None:
        raise ConfigError("params.ell", "missing")
    ell = _num("params.ell", ell_src)
    if not 0 <= ell < 1:
        raise ConfigError("params.ell", "must lie in [0, 1)")
    if a.get("input"):
        fld = _input_field(cfg)
        source = str(a["input"])
    else:
        g = cfg.geometry
        dim = _num("geometry.dim", g.get("dim", 1), int)
        R = _num("geometry.R", g.get("R", 3.0))
        n = _vec("geometry.n", g.get("n", 513), int)
        grid = Grid.box([-R] * dim, [R] * dim, n if len(n) == dim else n * dim)
        kappa = _num("boundary.kappa", cfg.boundary.get("kappa", 1.0))
        fld = ScalarField(grid, limit_radial_oracle(ell, R, kappa, 0.0, dim).on_grid(grid))
        source = "limit radial profile"
    collar = _num("analysis.collar", a.get("collar", 2), int)
    lr = limit_residual_report(fld, ell, collar=collar)
    body = {"ell": ell, "source": source, "grid": fld.grid.to_dict(), "residual": lr, "checks": []}
    if "bound" in a:
        bound = _num("analysis.bound", a["bound"])
        body["checks"].append({"claim": "limit equation residual", "target": f"max <= {bound:g}",
                               "status": "PASS" if lr["max_residual"] <= bound else "FAIL",
                               "values": lr, "vacuous": False, "notes": []})
    write_json(cfg.out / "report.json", _envelope(cfg, body))
    print(f"max residual = {lr['max_residual']:.6g} (h = {lr['h']:.6g})")
    _print_checks(body["checks"])
    return EXIT_OK if all(c["status"] == "PASS" for c in body["checks"]) else EXIT_CHECK


def _print_checks(checks):
    for c in checks:
        flag = " (vacuous)" if c.get("vacuous") else ""
        print(f"{c['status']}  {c['claim']}: {c['target']}{flag}")


DISPATCH = {"solve": cmd_solve, "sweep": cmd_sweep, "analyze": cmd_analyze, "oracle": cmd_oracle,
            "residual": cmd_residual}


def run(cfg: RunConfig) -> int:
    cfg.out.mkdir(parents=True, exist_ok=True)
    return DISPATCH[cfg.command](cfg)


def parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="deadcore", description=__doc__.splitlines()[0])
    ap.add_argument("command", nargs="?", help=" | ".join(COMMANDS))
    ap.add_argument("--config", help="INI or JSON run configuration")
    ap.add_argument("--p", type=float)
    ap.add_argument("--q", type=float)
    ap.add_argument("--ell", type=float)
    ap.add_argument("--n", type=int)
    ap.add_argument("--out", help="output directory")
    return ap


def main(argv=None) -> int:
    args = parser().parse_args(argv)
    try:
        raw = _read_raw(args.config)
        cfg = build_config(raw, dict(command=args.command, p=args.p, q=args.q, ell=args.ell,
                                     n=args.n, out=args.out))
        return run(cfg)
    except ConfigError as e:
        print(f"invalid config: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, configparser.Error, json.JSONDecodeError) as e:
        print(f"invalid config: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
