"""Batch front-end: ``stochmp --config experiment.yaml [overrides]``.

Config schema (YAML, strict: unknown keys are rejected)::

    problem:
      name: lq_scalar            # catalog name
      params: {a: -1.0}          # factory keyword arguments
    mc:
      paths: 20000
      seed: 0
      steps: 512
      antithetic: false
      n_jobs: 1
      block: 8192
    command:
      name: check-mp             # validate | simulate | adjoint | riesz | check-mp | study
      ...                        # command options, see COMMAND_OPTIONS
    output: results/run1

Every run writes ``manifest.json`` (config echo, config hash, seed, wall
time, version, verdict, failing row) and ``verdict.json``. Exit status is
0 on PASS, 1 on FAIL and 2 on configuration errors.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
import time
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .bsee import compare_adjoints, solve_adjoint_regression, solve_adjoint_riccati
from .controls import Control
from .mp import (DEFAULT_EPS, DEFAULT_TAUS, approx_x2_by_spike_z, check_maximum_principle,
                 expansion_check, pathwise_cost)
from .problems import build
from .riesz import (appropriate_check, continuity_probe, problem_tuple, riesz_matrix,
                    scalar_oracle, spike_limit_study)
from .see import moment_sup, solve_state, spike_rate_mc
from .stochastics import ConfigurationError, McConfig, TimeGrid, reduce_mean, sample_ensemble

RATE_TARGET = 2.0
RATE_TOL = 0.3
RIESZ_RTOL = 0.01

MC_DEFAULTS = {"paths": 10000, "seed": 0, "steps": 512, "antithetic": False, "n_jobs": 1, "block": 8192}
STUDY_KINDS = ("spike_rate", "spike_limit", "expansion", "x2", "continuity")
COMMAND_OPTIONS = {
    "validate": {"samples": 64},
    "simulate": {"control": None, "moment": 2},
    "adjoint": {"control": None, "method": "regression"},
    "riesz": {"tau": 0.25, "control": None},
    "check-mp": {"control": None, "tau_grid": list(DEFAULT_TAUS), "u_grid": None,
                 "riesz_paths": None, "adjoint": "regression"},
    "study": {"kind": None, "eps_list": list(DEFAULT_EPS), "tau": 0.25, "xi": None, "zeta": None,
              "u": None, "control": None, "spacings": list(DEFAULT_EPS)},
}
TOP_KEYS = {"problem", "mc", "command", "output"}
EXIT_PASS, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2


# -- configuration --------------------------------------------------------------------------

def _strict(block: dict, allowed, where: str) -> None:
    if not isinstance(block, dict):
        raise ConfigurationError(f"{where} must be a mapping")
    unknown = set(block) - set(allowed)
    if unknown:
        raise ConfigurationError(f"unknown keys in {where}: {sorted(unknown)}")


def load_config(source) -> dict:
    """Parse and validate a config file or mapping; returns the completed config."""
    if isinstance(source, (str, Path)):
        try:
            raw = yaml.safe_load(Path(source).read_text())
        except OSError as exc:
            raise ConfigurationError(f"cannot read config: {exc}") from exc
        except yaml.YAMLError as exc:
            raise ConfigurationError(f"malformed config: {exc}") from exc
    else:
        raw = source
    raw = raw or {}
    _strict(raw, TOP_KEYS, "config")
    problem = raw.get("problem")
    if not isinstance(problem, dict) or "name" not in problem:
        raise ConfigurationError("config needs problem.name")
    _strict(problem, {"name", "params"}, "problem")
    mc = dict(MC_DEFAULTS)
    mc_raw = raw.get("mc") or {}
    _strict(mc_raw, MC_DEFAULTS, "mc")
    mc.update(mc_raw)
    command = raw.get("command")
    if isinstance(command, str):
        command = {"name": command}
    if not isinstance(command, dict) or command.get("name") not in COMMAND_OPTIONS:
        raise ConfigurationError(f"command.name must be one of {sorted(COMMAND_OPTIONS)}")
    opts = dict(COMMAND_OPTIONS[command["name"]])
    _strict(command, set(opts) | {"name"}, f"command {command['name']}")
    opts.update({k: v for k, v in command.items() if k != "name"})
    cfg = {
        "problem": {"name": str(problem["name"]), "params": dict(problem.get("params") or {})},
        "mc": mc,
        "command": {"name": command["name"], **opts},
        "output": str(raw.get("output", "stochmp-out")),
    }
    _check_values(cfg)
    return cfg


def _check_values(cfg: dict) -> None:
    mc = cfg["mc"]
    for key in ("paths", "steps", "n_jobs", "block"):
        if not isinstance(mc[key], int) or isinstance(mc[key], bool) or mc[key] < 1:
            raise ConfigurationError(f"mc.{key} must be a positive integer")
    if not isinstance(mc["seed"], int) or mc["seed"] < 0:
        raise ConfigurationError("mc.seed must be a nonnegative integer")
    if not isinstance(mc["antithetic"], bool):
        raise ConfigurationError("mc.antithetic must be true or false")
    cmd = cfg["command"]
    if cmd["name"] == "study":
        if cmd["kind"] not in STUDY_KINDS:
            raise ConfigurationError(f"study kind must be one of {STUDY_KINDS}")
        key = "spacings" if cmd["kind"] == "continuity" else "eps_list"
        values = cmd[key]
        if not isinstance(values, list) or len(values) < 2:
            raise ConfigurationError(f"study {cmd['kind']} needs at least two {key} values")
    if cmd["name"] == "adjoint" and cmd["method"] not in ("regression", "riccati"):
        raise ConfigurationError("adjoint.method must be regression or riccati")
    if cmd["name"] == "check-mp" and cmd["adjoint"] not in ("regression", "riccati"):
        raise ConfigurationError("check-mp.adjoint must be regression or riccati")


def config_hash(cfg: dict) -> str:
    text = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()


# -- artifacts ----------------------------------------------------------------------------------

def _fmt(v) -> str:
    if isinstance(v, str):
        return v
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    return "%.17g" % float(v)


def write_csv(path: Path, columns, rows) -> None:
    """CSV with full round-trip decimal numbers."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        f = float(obj)
        return f if np.isfinite(f) else str(f)
    return obj


def _write_json(path: Path, data) -> None:
    path.write_text(json.dumps(_jsonable(data), indent=2, sort_keys=True) + "\n")


# -- helpers ----------------------------------------------------------------------------------

def _mc(cfg) -> McConfig:
    m = cfg["mc"]
    return McConfig(paths=m["paths"], seed=m["seed"], antithetic=m["antithetic"],
                    n_jobs=m["n_jobs"], block=m["block"])


def _control(spec, problem, oracle, grid: TimeGrid) -> Control:
    """``optimal`` | ``origin`` | ``{constant: u}`` | ``{scale: s}`` (scaled Riccati feedback)."""
    if spec is None:
        spec = "optimal" if oracle is not None else "origin"
    if spec == "optimal":
        if oracle is None:
            raise ConfigurationError(f"{problem.name} has no Riccati feedback")
        return Control(feedback=oracle.control)
    if spec == "origin":
        return Control.constant(problem.control_set.origin, grid)
    if isinstance(spec, dict) and set(spec) == {"constant"}:
        value = np.atleast_1d(np.asarray(spec["constant"], dtype=float))
        problem.control_set.require(value)
        return Control.constant(value, grid)
    if isinstance(spec, dict) and set(spec) == {"scale"}:
        if oracle is None:
            raise ConfigurationError(f"{problem.name} has no Riccati feedback to scale")
        s = float(spec["scale"])
        return Control(feedback=lambda t, x: s * oracle.control(t, x))
    raise ConfigurationError(f"unrecognised control {spec!r}")


def _vector(value, dim: int, name: str) -> np.ndarray:
    v = np.ones(dim) if value is None else np.atleast_1d(np.asarray(value, dtype=float))
    if v.shape != (dim,):
        raise ConfigurationError(f"{name} must have dimension {dim}")
    return v


def _scalar_riesz_oracle(problem, tau: float):
    """Closed-form ``P_τ`` for scalar LQ data with constant coefficients, else ``None``."""
    lq = problem.lq
    if lq is None or problem.dim != 1 or problem.pair.random:
        return None
    a0 = float(problem.pair.a[0, 0] + lq.F[0, 0])
    b0 = float(problem.pair.b[0, 0] + lq.G[0, 0])
    return scalar_oracle(a0, b0, float(lq.M[0, 0]), float(lq.Q[0, 0]), tau)


def _reference(cfg, problem, oracle, grid, mc):
    w = sample_ensemble(grid, mc)
    ctrl = _control(cfg["command"].get("control"), problem, oracle, grid)
    return solve_state(problem, ctrl, w)


def _tuple(cfg, problem, oracle, grid, mc):
    if problem.lq is not None and not problem.pair.random:
        return problem_tuple(problem), None
    bar = _reference(cfg, problem, oracle, grid, mc)
    return problem_tuple(problem, bar, solve_adjoint_regression(problem, bar, stderr=False)), bar


# -- commands ------------------------------------------------------------------------------------

def cmd_validate(cfg, problem, oracle, out: Path) -> dict:
    reports = problem.validate(samples=int(cfg["command"]["samples"]), seed=cfg["mc"]["seed"])
    rows = [(r.name, r.passed, r.margin, np.nan if r.exact_margin is None else r.exact_margin)
            for r in reports]
    write_csv(out / "validation.csv", ("check", "passed", "margin", "exact_margin"), rows)
    _write_json(out / "validation.json", [r.to_dict() for r in reports])
    failing = next((r.to_dict() for r in reports if not r.passed), None)
    return {"pass": failing is None, "worstRow": failing}


def cmd_simulate(cfg, problem, oracle, out: Path) -> dict:
    grid, mc = TimeGrid(cfg["mc"]["steps"]), _mc(cfg)
    bar = _reference(cfg, problem, oracle, grid, mc)
    rep = moment_sup(bar, int(cfg["command"]["moment"]))
    write_csv(out / "moments.csv", ("t", "mean", "stderr"),
              zip(grid.times, rep.mean, rep.stderr))
    costs = pathwise_cost(problem, bar)
    j, j_se = reduce_mean(costs, mc.antithetic)
    return {"pass": True, "worstRow": None,
            "details": {"sup_moment": rep.sup_moment, "sup_stderr": rep.sup_stderr,
                        "sup_time": float(grid.time(rep.sup_index)), "cost": j, "cost_stderr": j_se,
                        "clipped_fraction": bar.control.clipped_fraction}}


def cmd_adjoint(cfg, problem, oracle, out: Path) -> dict:
    grid, mc = TimeGrid(cfg["mc"]["steps"]), _mc(cfg)
    bar = _reference(cfg, problem, oracle, grid, mc)
    if cfg["command"]["method"] == "riccati":
        if problem.lq is None:
            raise ConfigurationError(f"{problem.name} has no Riccati oracle")
        adj = solve_adjoint_riccati(problem, bar, oracle)
    else:
        adj = solve_adjoint_regression(problem, bar)
    mp_, sp = adj.sup_mean_square("p")
    mq, sq = adj.sup_mean_square("q")
    write_csv(out / "adjoint.csv", ("t", "p_ms", "p_stderr", "q_ms", "q_stderr"),
              zip(grid.times, mp_, sp, mq, sq))
    details = {"energy": adj.energy(), **adj.diagnostics}
    verdict = {"pass": True, "worstRow": None, "details": details}
    if adj.method == "regression" and problem.lq is not None:
        cmp = compare_adjoints(adj, solve_adjoint_riccati(problem, bar, oracle))
        details["comparison"] = cmp
        verdict["pass"] = cmp["passed"]
        if not cmp["passed"]:
            verdict["worstRow"] = {k: cmp[k] for k in cmp if "worst" in k or k == "terminal_max"}
    return verdict


def cmd_riesz(cfg, problem, oracle, out: Path) -> dict:
    grid, mc = TimeGrid(cfg["mc"]["steps"]), _mc(cfg)
    tup, _ = _tuple(cfg, problem, oracle, grid, mc)
    tau = float(cfg["command"]["tau"])
    check = appropriate_check(tup, mc)
    riesz = riesz_matrix(tau, tup, mc, keep_samples=False)
    _write_json(out / "riesz.json", {**riesz.to_dict(), "appropriate": check.to_dict()})
    n = riesz.dim
    write_csv(out / "riesz.csv", ("i", "j", "value", "stderr"),
              [(i, j, riesz.matrix[i, j], riesz.stderr[i, j]) for i in range(n) for j in range(n)])
    verdict = {"pass": bool(check.passed), "worstRow": None if check.passed else check.to_dict(),
               "details": {"tau": riesz.tau, "appropriate": check.passed}}
    exact = _scalar_riesz_oracle(problem, riesz.tau)
    if exact is not None:
        est, se = float(riesz.matrix[0, 0]), float(riesz.stderr[0, 0])
        ok = abs(est - exact) <= max(3.0 * se, RIESZ_RTOL * abs(exact))
        verdict["details"].update({"oracle": exact, "estimate": est, "stderr": se})
        if not ok:
            verdict["pass"] = False
            verdict["worstRow"] = {"estimate": est, "oracle": exact, "stderr": se}
    return verdict


def cmd_check_mp(cfg, problem, oracle, out: Path) -> dict:
    grid, mc = TimeGrid(cfg["mc"]["steps"]), _mc(cfg)
    cmd = cfg["command"]
    ctrl = _control(cmd["control"], problem, oracle, grid)
    rmc = mc.with_paths(int(cmd["riesz_paths"])) if cmd["riesz_paths"] else None
    u_grid = None if cmd["u_grid"] is None else np.asarray(cmd["u_grid"], dtype=float).reshape(
        len(cmd["u_grid"]), -1)
    res = check_maximum_principle(problem, ctrl, mc, grid, tuple(cmd["tau_grid"]), u_grid, rmc,
                                  adjoint=cmd["adjoint"])
    table = res.table
    m = problem.control_dim
    cols = ("tau", *(f"u{i}" for i in range(m)), "first", "second", "total", "stderr")
    write_csv(out / "mp_residuals.csv", cols, table.as_array())
    worst = table.violations()
    worst_row = min(worst, key=lambda r: r[4] + 3.0 * r[5]) if worst else None
    return {"pass": table.passed, "worstRow": None if worst_row is None else dict(zip(
        ("tau", "u", "first", "second", "total", "stderr"), worst_row)),
        "details": {"violations": len(worst), "abstol": table.abstol,
                    "cost": res.cost[0], "cost_stderr": res.cost[1]}}


def cmd_study(cfg, problem, oracle, out: Path) -> dict:
    grid, mc = TimeGrid(cfg["mc"]["steps"]), _mc(cfg)
    cmd = cfg["command"]
    kind = cmd["kind"]
    tau = float(cmd["tau"])
    n = problem.dim
    details = {"kind": kind}
    if kind == "spike_rate":
        rows, slope = spike_rate_mc(problem.pair, tau, _vector(cmd["xi"], n, "xi"), cmd["eps_list"], grid, mc)
        passed = abs(slope - RATE_TARGET) <= RATE_TOL
        details["slope"] = slope
        columns, full = ("eps", "fourth_moment", "stderr"), rows
        summary = [(r[0], r[1], r[2]) for r in rows]
    elif kind in ("spike_limit", "continuity"):
        tup, _ = _tuple(cfg, problem, oracle, grid, mc)
        xi, zeta = _vector(cmd["xi"], n, "xi"), _vector(cmd["zeta"], n, "zeta")
        if kind == "spike_limit":
            table = spike_limit_study(tau, xi, zeta, tup, cmd["eps_list"], mc)
            summary = [(r[0], r[2], r[3]) for r in table.rows]
        else:
            table = continuity_probe(tau, xi, zeta, tup, mc, tuple(cmd["spacings"]))
            summary = [(r[0], r[1], r[2]) for r in table.rows]
        passed, columns, full = table.passed, table.columns, table.rows
        details.update(table.details)
    else:
        ctrl = _control(cmd["control"], problem, oracle, grid)
        u = _vector(cmd["u"], problem.control_dim, "u")
        if kind == "expansion":
            table = expansion_check(problem, ctrl, tau, u, cmd["eps_list"], mc, grid)
            details.update({"remainder_decreasing": table.remainder_decreasing,
                            "gap_decreasing": table.gap_decreasing})
            summary = [(r[0], r[1], r[2]) for r in table.rows]
        else:
            table = approx_x2_by_spike_z(problem, ctrl, tau, u, cmd["eps_list"], mc, grid)
            summary = [(r[0], r[1], r[2]) for r in table.rows]
        passed, columns, full = table.passed, table.columns, table.rows
    label = "PASS" if passed else "FAIL"
    write_csv(out / f"study_{kind}.csv", ("parameter", "value", "stderr", "verdict"),
              [(*r, label) for r in summary])
    write_csv(out / f"study_{kind}_table.csv", columns, full)
    return {"pass": bool(passed), "worstRow": None if passed else _worst_study_row(columns, full),
            "details": details}


def _worst_study_row(columns, rows):
    return dict(zip(columns, rows[-1])) if rows else None


COMMANDS = {"validate": cmd_validate, "simulate": cmd_simulate, "adjoint": cmd_adjoint,
            "riesz": cmd_riesz, "check-mp": cmd_check_mp, "study": cmd_study}


# -- entry points ------------------------------------------------------------------------------------

def run(cfg: dict) -> int:
    """Execute a validated config; writes artifacts and returns the exit status."""
    out = Path(cfg["output"])
    out.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    manifest = {"config": cfg, "config_hash": config_hash(cfg), "seed": cfg["mc"]["seed"],
                "version": __version__}
    try:
        problem, oracle = build(cfg["problem"]["name"], cfg["problem"]["params"])
        verdict = COMMANDS[cfg["command"]["name"]](cfg, problem, oracle, out)
        status = EXIT_PASS if verdict["pass"] else EXIT_FAIL
    except ConfigurationError as exc:
        verdict = {"pass": False, "worstRow": None,
                   "error": {"code": getattr(exc, "code", "E_CONFIG"), "message": str(exc)}}
        status = EXIT_CONFIG
    except (ValueError, ArithmeticError, np.linalg.LinAlgError) as exc:
        verdict = {"pass": False, "worstRow": None,
                   "error": {"code": getattr(exc, "code", "E_NUMERIC"), "message": str(exc)}}
        status = EXIT_FAIL
    manifest.update({"wall_time": time.perf_counter() - start, "verdict": "PASS" if verdict["pass"] else "FAIL",
                     "failing_row": verdict.get("worstRow"), "exit_status": status})
    if "error" in verdict:
        manifest["error"] = verdict["error"]
    if "details" in verdict:
        manifest["details"] = verdict["details"]
    _write_json(out / "verdict.json", {"pass": verdict["pass"], "worstRow": verdict.get("worstRow"),
                                       "config": cfg, **({"error": verdict["error"]} if "error" in verdict else {})})
    _write_json(out / "manifest.json", manifest)
    return status


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="stochmp", description="Run a stochmp experiment from a config file.")
    ap.add_argument("--config", required=True, help="YAML experiment config")
    ap.add_argument("--command", choices=sorted(COMMANDS), help="override command.name")
    ap.add_argument("--seed", type=int, help="override mc.seed")
    ap.add_argument("--paths", type=int, help="override mc.paths")
    ap.add_argument("--steps", type=int, help="override mc.steps")
    ap.add_argument("--antithetic", action="store_true", default=None, help="use antithetic pairs")
    ap.add_argument("--n-jobs", type=int, dest="n_jobs", help="override mc.n_jobs")
    ap.add_argument("--out", help="override the output directory")
    return ap


def _overrides(raw: dict, args) -> dict:
    raw = dict(raw or {})
    mc = dict(raw.get("mc") or {})
    for key in ("seed", "paths", "steps", "antithetic", "n_jobs"):
        val = getattr(args, key)
        if val is not None:
            mc[key] = val
    raw["mc"] = mc
    if args.out is not None:
        raw["output"] = args.out
    if args.command is not None:
        cmd = raw.get("command")
        cmd = {"name": cmd} if isinstance(cmd, str) else dict(cmd or {})
        if cmd.get("name") != args.command:
            cmd = {"name": args.command}
        raw["command"] = cmd
    return raw


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    raw = None
    try:
        try:
            raw = yaml.safe_load(Path(args.config).read_text())
        except OSError as exc:
            raise ConfigurationError(f"cannot read config: {exc}") from exc
        except yaml.YAMLError as exc:
            raise ConfigurationError(f"malformed config: {exc}") from exc
        if raw is not None and not isinstance(raw, dict):
            raise ConfigurationError("config must be a mapping")
        cfg = load_config(_overrides(raw, args))
    except ConfigurationError as exc:
        fallback = raw.get("output") if isinstance(raw, dict) else None
        out = Path(args.out or fallback or "stochmp-out")
        out.mkdir(parents=True, exist_ok=True)
        err = {"code": getattr(exc, "code", "E_CONFIG"), "message": str(exc)}
        _write_json(out / "manifest.json", {"verdict": "FAIL", "error": err, "exit_status": EXIT_CONFIG,
                                            "version": __version__, "failing_row": None})
        print(f"error [{err['code']}]: {err['message']}", file=sys.stderr)
        return EXIT_CONFIG
    status = run(cfg)
    print(("PASS", "FAIL", "CONFIG ERROR")[status], file=sys.stderr)
    return status


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
