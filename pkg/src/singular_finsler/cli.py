"""Command-line driver: one subcommand per experiment, JSON config in, report files out.

Exit codes: 0 success, 2 invalid config, 3 solver failure (partial outputs plus
``failure.json``), 4 filesystem error.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import math
import os
import sys
from pathlib import Path
from typing import Any, Callable

import jsonschema
import numpy as np

from .eigen import ConvergenceError, first_eigenpair
from .experiments import (
    barrier_check,
    barrier_exponent,
    compute_barrier_constants,
    comparison_check,
    gamma_sweep,
    predict_existence,
    summability_sweep,
)
from .finsler import FinslerSpec, check_assumptions, verify_vector_inequalities
from .grid_fem import Domain, Grid, build_grid, energy, seminorm_p, write_field_csv
from .singular import (
    DataSpec,
    ProblemSpec,
    default_schedule,
    energy_J,
    nehari_defect,
    solve_continuation,
    solve_energy_descent,
    solve_regularized,
)

log = logging.getLogger("singular_finsler")

EXIT_OK, EXIT_SCHEMA, EXIT_SOLVER, EXIT_IO = 0, 2, 3, 4
COMMANDS = ("check-norm", "eigen", "solve", "continuation", "barrier", "compare", "sweep-gamma", "sweep-m")


class SolverFailure(RuntimeError):
    pass


# -- schema -----------------------------------------------------------------

_NUM = {"type": "number"}
_POS = {"type": "number", "exclusiveMinimum": 0}
_NORM = {
    "type": "object",
    "properties": {
        "kind": {"enum": ["euclidean", "ellipse", "smoothed_q"]},
        "dim": {"type": "integer", "minimum": 1, "maximum": 2},
        "A": {"type": "array", "items": {"type": "array", "items": _NUM}},
        "q": {"type": "number", "minimum": 1},
        "delta": {"type": "number", "minimum": 0},
    },
    "required": ["kind"],
}
_DOMAIN = {
    "type": "object",
    "properties": {
        "kind": {"enum": ["interval", "rectangle"]},
        "length": _POS,
        "lengths": {"type": "array", "items": _POS, "minItems": 2, "maxItems": 2},
    },
    "required": ["kind"],
}
_DATA = {
    "type": "object",
    "properties": {
        "kind": {"enum": ["constant", "dist_power", "table"]},
        "value": {"type": "number", "minimum": 0},
        "sigma": {"type": "number", "minimum": 0},
        "scale": {"type": "number", "minimum": 0},
        "values": {"type": "array", "items": {"type": "number", "minimum": 0}},
    },
    "required": ["kind"],
}
_RES = {"oneOf": [{"type": "integer", "minimum": 2}, {"type": "array", "items": {"type": "integer", "minimum": 2}}]}
_PROBLEM = {
    "type": "object",
    "properties": {
        "p": {"type": "number", "exclusiveMinimum": 1},
        "gamma": _POS,
        "theta": {"type": "number", "minimum": 0},
        "norm": _NORM,
        "f": _DATA,
        "h": _DATA,
        "domain": _DOMAIN,
        "resolution": _RES,
        "min_cell": _POS,
    },
    "required": ["p", "gamma"],
}
_SCHEDULE = {"type": "array", "items": _POS, "minItems": 1}
_GRIDDED = {
    "p": {"type": "number", "exclusiveMinimum": 1},
    "norm": _NORM,
    "domain": _DOMAIN,
    "resolution": _RES,
    "min_cell": _POS,
}


def _obj(props: dict, required: list[str]) -> dict:
    return {"type": "object", "properties": dict(props, command={"type": "string"}), "required": required}


SCHEMAS: dict[str, dict] = {
    "check-norm": _obj(
        {
            "norm": _NORM,
            "n_samples": {"type": "integer", "minimum": 1},
            "p_values": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 1}},
            "n_pairs": {"type": "integer", "minimum": 1},
        },
        ["norm"],
    ),
    "eigen": _obj(dict(_GRIDDED, reference=_POS, reference_rtol=_POS), ["p"]),
    "solve": _obj(
        {
            "problem": _PROBLEM,
            "epsilon": _POS,
            "method": {"enum": ["newton", "energy-descent"]},
            "manufactured": {"enum": ["sine", "parabola"]},
            "resolutions": {"type": "array", "items": {"type": "integer", "minimum": 2}, "minItems": 2},
        },
        ["problem"],
    ),
    "continuation": _obj({"problem": _PROBLEM, "schedule": _SCHEDULE}, ["problem"]),
    "barrier": _obj({"problem": _PROBLEM, "epsilon": _POS, "strip_eps": _POS, "t": _NUM}, ["problem"]),
    "compare": _obj(
        {"problem1": _PROBLEM, "problem2": _PROBLEM, "epsilon": _POS, "tolerance": _POS, "uniqueness": {"type": "boolean"}},
        ["problem1", "problem2"],
    ),
    "sweep-gamma": _obj(
        {"problem": _PROBLEM, "gamma_values": {"type": "array", "items": _POS, "minItems": 1}, "schedule": _SCHEDULE},
        ["problem", "gamma_values"],
    ),
    "sweep-m": _obj(
        dict(
            _GRIDDED,
            gamma=_POS,
            m_values={"type": "array", "items": {"type": "number", "exclusiveMinimum": 1}, "minItems": 1},
            delta_m=_POS,
            schedule=_SCHEDULE,
        ),
        ["p", "gamma", "m_values"],
    ),
}


class ConfigError(ValueError):
    pass


def load_config(command: str, path: str | os.PathLike) -> dict[str, Any]:
    """Parse and validate; every problem is built once here so semantic errors surface early."""
    text = Path(path).read_text(encoding="utf-8")
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"malformed JSON: {exc}") from exc
    try:
        jsonschema.validate(cfg, SCHEMAS[command])
    except jsonschema.ValidationError as exc:
        raise ConfigError(f"schema violation: {exc.message}") from exc
    if cfg.get("command", command) != command:
        raise ConfigError(f"config is for {cfg['command']!r}, not {command!r}")
    try:
        for key in ("problem", "problem1", "problem2"):
            if key in cfg:
                ProblemSpec.from_dict(cfg[key])
        if command == "check-norm":
            _norm(cfg)
        elif "norm" in cfg:
            _norm(cfg, Domain.from_dict(cfg.get("domain", {"kind": "interval"})).dim)
        if cfg.get("manufactured"):
            pb = ProblemSpec.from_dict(cfg["problem"])
            if pb.domain.dim != 1:
                raise ValueError("manufactured cases are one-dimensional")
            if cfg["manufactured"] == "sine" and pb.p != 2:
                raise ValueError("the sine profile needs p = 2")
        if "schedule" in cfg:
            s = cfg["schedule"]
            if any(b >= a for a, b in zip(s, s[1:])):
                raise ValueError("schedule must be strictly decreasing")
    except (ValueError, KeyError, TypeError) as exc:
        raise ConfigError(f"invalid config: {exc}") from exc
    return cfg


# -- output -----------------------------------------------------------------


def _clean(x):
    """JSON-safe copy: numpy scalars to Python, non-finite floats to strings."""
    if isinstance(x, dict):
        return {str(k): _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    if isinstance(x, np.ndarray):
        return _clean(x.tolist())
    if isinstance(x, (np.bool_, bool)):
        return bool(x)
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, (float, np.floating)):
        x = float(x)
        return x if math.isfinite(x) else str(x)
    return x


class Output:
    def __init__(self, root: Path):
        self.root = root
        self.files: list[str] = []

    def json(self, name: str, obj) -> None:
        self._write(name, json.dumps(_clean(obj), indent=2, sort_keys=True) + "\n")

    def field(self, name: str, grid: Grid, values) -> None:
        write_field_csv(grid, values, self.root / name)
        self.files.append(name)

    def table(self, name: str, header: list[str], rows) -> None:
        lines = [",".join(header)] + [",".join(_cell(v) for v in r) for r in rows]
        self._write(name, "\n".join(lines) + "\n")

    def _write(self, name: str, text: str) -> None:
        with open(self.root / name, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        self.files.append(name)

    def manifest(self) -> None:
        entries = []
        for name in sorted(set(self.files)):
            data = (self.root / name).read_bytes()
            entries.append({"file": name, "sha256": hashlib.sha256(data).hexdigest(), "bytes": len(data)})
        self._write("manifest.json", json.dumps({"files": entries}, indent=2) + "\n")


def _cell(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


# -- helpers ----------------------------------------------------------------


def _norm(cfg: dict, dim: int | None = None) -> FinslerSpec:
    d = dict(cfg.get("norm", {"kind": "euclidean"}))
    if dim is not None:
        d.setdefault("dim", dim)
    return FinslerSpec.from_dict(d)


def _grid(cfg: dict) -> tuple[Domain, Grid]:
    dom = Domain.from_dict(cfg.get("domain", {"kind": "interval", "length": 1.0}))
    return dom, build_grid(dom, cfg.get("resolution", 64), min_cell=cfg.get("min_cell"))


def manufactured_case(name: str, p: float, gamma: float, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(f, exact u) at nodes x in (0, 1): a sine profile for p = 2 and a parabola for any p."""
    if name == "sine":
        if p != 2:
            raise ConfigError("the sine profile needs p = 2")
        u = np.sin(np.pi * x)
        return np.pi**2 * np.abs(u) ** (1 + gamma), u
    u = x * (1 - x)
    return 2 * (p - 1) * np.abs(1 - 2 * x) ** (p - 2) * np.abs(u) ** gamma, u


def _solver(method: str):
    return solve_energy_descent if method == "energy-descent" else solve_regularized


# -- commands ---------------------------------------------------------------


def cmd_check_norm(cfg, out: Output, args) -> None:
    norm = _norm(cfg)
    rep = check_assumptions(norm, n_samples=cfg.get("n_samples", 10_000), seed=args.seed)
    ineq = [
        verify_vector_inequalities(norm, p, n_pairs=cfg.get("n_pairs", 100_000), seed=args.seed).to_dict()
        for p in cfg.get("p_values", [])
    ]
    out.json("report.json", {"command": "check-norm", "norm": norm.to_dict(), "assumptions": rep.to_dict(), "inequalities": ineq})
    bad = [r for r in ineq if not (r["min_mono_gap"] > 0 and r["min_conv_gap"] > 0)]
    if bad:
        raise SolverFailure("vector inequality gap not positive")


def cmd_eigen(cfg, out: Output, args) -> None:
    dom, grid = _grid(cfg)
    norm = _norm(cfg, dom.dim)
    try:
        e = first_eigenpair(grid, norm, cfg["p"], tol=args.tol if args.tol else 1e-8)
    except ConvergenceError as exc:
        raise SolverFailure(str(exc)) from exc
    rep = dict(e.to_dict(), command="eigen", domain=dom.to_dict(), resolution=cfg.get("resolution", 64))
    if "reference" in cfg:
        rel = abs(e.lambda1 - cfg["reference"]) / cfg["reference"]
        rep["reference"] = {"value": cfg["reference"], "relative_error": rel, "rtol": cfg.get("reference_rtol", 1e-3)}
        rep["reference"]["pass"] = rel <= rep["reference"]["rtol"]
    out.field("phi1.csv", grid, e.phi1.values)
    out.json("report.json", rep)


def cmd_solve(cfg, out: Output, args) -> None:
    pd = cfg["problem"]
    eps = cfg.get("epsilon", 1e-8)
    tol = args.tol or 1e-10
    solve = _solver(cfg.get("method", "newton"))
    man = cfg.get("manufactured")
    resolutions = cfg.get("resolutions") or [pd.get("resolution", 64)]
    rows, steps, failure = [], [], None
    for n in resolutions:
        pb = ProblemSpec.from_dict(dict(pd, resolution=n))
        grid = pb.grid()
        exact = None
        if man:
            if grid.dim != 1:
                raise ConfigError("manufactured cases are one-dimensional")
            f, exact = manufactured_case(man, pb.p, pb.gamma, grid.vertices[:, 0] / grid.domain.lengths[0])
            pb = pb.with_(f=DataSpec.table(f))
        r = solve(pb, grid, eps, tol=tol)
        step = r.to_dict()
        step["resolution"] = n
        if pb.gamma > 1 and r.converged:
            step.update(variational_checks(pb, grid, r.u.values))
        if exact is not None:
            step["linf_error"] = float(np.max(np.abs(r.u.values - exact)))
            rows.append([n, step["linf_error"]])
        steps.append(step)
        if n == resolutions[-1] or not r.converged:
            out.field("u.csv", grid, r.u.values)
        if not r.converged:
            failure = f"solve did not converge at resolution {n} (residual {r.final_residual:.3g})"
            break
    rep: dict[str, Any] = {"command": "solve", "epsilon": eps, "tolerance": tol, "steps": steps}
    rep.update(steps[-1])
    if rows:
        errs = [e for _, e in rows]
        rep["error_ratios"] = [a / b for a, b in zip(errs, errs[1:])]
        out.table("convergence.csv", ["resolution", "linf_error"], rows)
    out.json("report.json", rep)
    if failure:
        raise SolverFailure(failure)


def variational_checks(problem: ProblemSpec, grid: Grid, u: np.ndarray, n_scan: int = 41) -> dict[str, Any]:
    """Relative natural-constraint defect and the minimiser of t -> J(t u) on [0.5, 2]."""
    ts = np.linspace(0.5, 2.0, n_scan)
    J = [energy_J(problem, grid, t * u) for t in ts]
    E = energy(grid, problem.norm, problem.p, u)
    return {
        "nehari_relative": abs(nehari_defect(problem, grid, u)) / (problem.p * E),
        "j_scan_argmin": float(ts[int(np.argmin(J))]),
        "j_scan_step": float(ts[1] - ts[0]),
    }


def gradient_gaps(problem: ProblemSpec, grid: Grid, fields: list[np.ndarray]) -> list[float]:
    """seminorm(u_k - u_last) / seminorm(u_last) along a continuation."""
    last = fields[-1]
    ref = seminorm_p(grid, problem.norm, problem.p, last)
    return [seminorm_p(grid, problem.norm, problem.p, u - last) / ref for u in fields[:-1]]


def cmd_continuation(cfg, out: Output, args) -> None:
    pb = ProblemSpec.from_dict(cfg["problem"])
    grid = pb.grid()
    c = solve_continuation(pb, grid, cfg.get("schedule") or default_schedule(), tol=args.tol or 1e-10)
    rep = dict(c.to_dict(), command="continuation")
    if c.completed and len(c.reports) >= 2:
        rep["gradient_gaps"] = gradient_gaps(pb, grid, [r.u.values for r in c.reports])
    rows = [[e, r.seminorm, r.newton_iters, r.final_residual] for e, r in zip(c.schedule, c.reports)]
    out.table("seminorms.csv", ["epsilon", "seminorm", "newton_iters", "final_residual"], rows)
    if c.reports:
        out.field("u_final.csv", grid, c.reports[-1].u.values)
    out.json("report.json", rep)
    if not c.completed:
        raise SolverFailure(c.failure)


def cmd_barrier(cfg, out: Output, args) -> None:
    pb = ProblemSpec.from_dict(cfg["problem"])
    grid = pb.grid()
    try:
        e = first_eigenpair(grid, pb.norm, pb.p)
    except ConvergenceError as exc:
        raise SolverFailure(str(exc)) from exc
    r = solve_regularized(pb, grid, cfg.get("epsilon", 1e-10), tol=args.tol or 1e-10)
    out.field("u.csv", grid, r.u.values)
    out.field("phi1.csv", grid, e.phi1.values)
    if not r.converged:
        out.json("report.json", {"command": "barrier", "solve": r.to_dict()})
        raise SolverFailure("barrier solve did not converge")
    be = barrier_exponent(pb.p, pb.gamma)
    strip = cfg.get("strip_eps", 4 * grid.h)
    s1, s2 = compute_barrier_constants(e, pb, grid, strip, u=r.u, t=cfg.get("t"))
    b = barrier_check(r.u, e, s1, s2, be.eta, upper_eta=be.upper(cfg.get("t")))
    out.json("report.json", {
        "command": "barrier",
        "barrier": b.to_dict(),
        "regime": be.regime,
        "strip_eps": strip,
        "lambda1": e.lambda1,
        "solve": r.to_dict(),
        "pass": b.lower_violation_fraction == 0 and b.upper_violation_fraction == 0 and b.consistent,
    })


def cmd_compare(cfg, out: Output, args) -> None:
    p1 = ProblemSpec.from_dict(cfg["problem1"])
    p2 = ProblemSpec.from_dict(cfg["problem2"])
    grid = p1.grid()
    eps = cfg.get("epsilon", 1e-8)
    tol = cfg.get("tolerance", 1e-8)
    rep: dict[str, Any] = {"command": "compare", "epsilon": eps}
    try:
        rep["comparison"] = comparison_check(p1, p2, grid, eps, tol=tol).to_dict()
    except RuntimeError as exc:
        raise SolverFailure(str(exc)) from exc
    if cfg.get("uniqueness", False):
        rep["uniqueness"] = uniqueness_paths(p1, grid, eps, args.tol or 1e-10)
        out.field("u_newton.csv", grid, rep["uniqueness"].pop("_u"))
    out.json("report.json", rep)


def uniqueness_paths(problem: ProblemSpec, grid: Grid, eps: float, tol: float = 1e-10) -> dict[str, Any]:
    """Newton from d(x), Newton from 10 d(x), and energy descent; max relative L-inf spread."""
    runs = {
        "newton_distance": solve_regularized(problem, grid, eps, tol=tol),
        "newton_scaled": solve_regularized(problem, grid, eps, warm_start=10 * grid.distance, tol=tol),
        "energy_descent": solve_energy_descent(problem, grid, eps, tol=tol),
    }
    ref = runs["newton_distance"].u.values
    scale = float(np.max(np.abs(ref)))
    spread = max(float(np.max(np.abs(r.u.values - ref))) / scale for r in runs.values())
    return {
        "converged": {k: r.converged for k, r in runs.items()},
        "max_relative_spread": spread,
        "_u": ref,
    }


def cmd_sweep_gamma(cfg, out: Output, args) -> None:
    pb = ProblemSpec.from_dict(cfg["problem"])
    grid = pb.grid()
    rep = gamma_sweep(pb, grid, cfg["gamma_values"], cfg.get("schedule") or default_schedule(), threads=args.threads)
    out.table("sweep.csv", ["value", "growth_exponent", "saturated", "predicted_exists"],
              [[e.value, e.growth_exponent, e.saturated, e.predicted_exists] for e in rep.entries])
    out.json("report.json", dict(rep.to_dict(), command="sweep-gamma"))
    failed = [e.value for e in rep.entries if not e.completed]
    if failed:
        raise SolverFailure(f"continuation failed for gamma in {failed}")


def cmd_sweep_m(cfg, out: Output, args) -> None:
    dom, grid = _grid(cfg)
    norm = _norm(cfg, dom.dim)
    try:
        e = first_eigenpair(grid, norm, cfg["p"])
    except ConvergenceError as exc:
        raise SolverFailure(str(exc)) from exc
    rep = summability_sweep(cfg["p"], cfg["gamma"], cfg["m_values"], grid, cfg.get("schedule") or default_schedule(), e,
                            delta_m=cfg.get("delta_m", 0.05), norm=norm, threads=args.threads)
    out.table("sweep.csv", ["value", "growth_exponent", "saturated", "predicted_exists"],
              [[x.value, x.growth_exponent, x.saturated, x.predicted_exists] for x in rep.entries])
    d = dict(rep.to_dict(), command="sweep-m")
    d["limit_threshold"] = predict_existence(cfg["p"], cfg["gamma"]).threshold
    out.json("report.json", d)
    failed = [x.value for x in rep.entries if not x.completed]
    if failed:
        raise SolverFailure(f"continuation failed for m in {failed}")


HANDLERS: dict[str, Callable] = {
    "check-norm": cmd_check_norm,
    "eigen": cmd_eigen,
    "solve": cmd_solve,
    "continuation": cmd_continuation,
    "barrier": cmd_barrier,
    "compare": cmd_compare,
    "sweep-gamma": cmd_sweep_gamma,
    "sweep-m": cmd_sweep_m,
}


# -- entry point ------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="singular-finsler", description=__doc__.splitlines()[0])
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("--config", required=True, help="JSON config for the subcommand")
    ap.add_argument("--out", required=True, help="output directory")
    ap.add_argument("--seed", type=int, default=0, help="RNG seed (u64)")
    ap.add_argument("--threads", type=int, default=1, help="parallel sweep points; 1 is bit-reproducible")
    ap.add_argument("--tol", type=float, default=None, help="solver tolerance override")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def run(argv: list[str] | None = None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if not (0 <= args.seed < 2**64):
        print("error: seed must be an unsigned 64-bit integer", file=sys.stderr)
        return EXIT_SCHEMA
    if args.threads < 1 or (args.tol is not None and not args.tol > 0):
        print("error: --threads must be >= 1 and --tol > 0", file=sys.stderr)
        return EXIT_SCHEMA
    try:
        cfg = load_config(args.command, args.config)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    except OSError as exc:
        print(f"error: cannot read config: {exc}", file=sys.stderr)
        return EXIT_IO
    root = Path(args.out)
    try:
        root.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        print(f"error: cannot create output directory: {exc}", file=sys.stderr)
        return EXIT_IO
    out = Output(root)
    code = EXIT_OK
    try:
        HANDLERS[args.command](copy.deepcopy(cfg), out, args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    except (SolverFailure, ConvergenceError, ValueError) as exc:
        out.json("failure.json", {"command": args.command, "error": str(exc)})
        print(f"solver failure: {exc}", file=sys.stderr)
        code = EXIT_SOLVER
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    try:
        out.manifest()
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    return code


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
