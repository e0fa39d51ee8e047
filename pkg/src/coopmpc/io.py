"""Scenario files and run artifacts.

Scenario files are YAML documents with the sections ``agents``, ``object``,
``obstacles``, ``ocp`` and ``run`` (plus the optional ``name``,
``gravity`` and ``gravity_compensation``).  Numbers may be written as
arithmetic expressions over ``pi`` and ``sqrt`` (``"pi/4"``,
``"0.7071*sqrt(2)"``).  Unknown keys are rejected.

Artifacts written by :func:`write_artifacts`::

    states.csv    one row per plant sub-step (schema ``coopmpc.states/1``)
    solver.csv    one row per sampling instant (schema ``coopmpc.solver/1``)
    summary.json  final errors, violation counts, solver statistics, monitors
    *.svg         error norms, value function, x-y path with obstacles
"""
from __future__ import annotations

import ast
import csv
import io as _io
import json
import math
import operator
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .closed_loop import (
    Scenario,
    ScenarioError,
    TrajectoryLog,
    monitor_convergence,
    monitor_value_function,
)
from .constraints import EllipsoidRegion, Workspace
from .coupled_dynamics import CoupledSystem, ObjectModel
from .ocp import OcpConfig
from .se3_kinematics import AgentModel, EulerAngles

STATES_SCHEMA = "coopmpc.states/1"
SOLVER_SCHEMA = "coopmpc.solver/1"
OUT_DIR_ENV = "COOPMPC_OUT_DIR"
DATA_DIR = Path(__file__).parent / "data"
FLOAT_FMT = "%.17g"


class ConfigError(ValueError):
    """Scenario file problem; ``path`` names the offending key."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path


# ---------------------------------------------------------------------------
# numbers

_OPS = {ast.Add: operator.add, ast.Sub: operator.sub, ast.Mult: operator.mul,
        ast.Div: operator.truediv, ast.Pow: operator.pow}
_NAMES = {"pi": math.pi}
_FUNCS = {"sqrt": math.sqrt}


def _eval_expr(node):
    if isinstance(node, ast.Expression):
        return _eval_expr(node.body)
    if isinstance(node, ast.Constant) and isinstance(node.value, (int, float)):
        return float(node.value)
    if isinstance(node, ast.Name) and node.id in _NAMES:
        return _NAMES[node.id]
    if isinstance(node, ast.UnaryOp) and isinstance(node.op, (ast.USub, ast.UAdd)):
        v = _eval_expr(node.operand)
        return -v if isinstance(node.op, ast.USub) else v
    if isinstance(node, ast.BinOp) and type(node.op) in _OPS:
        return _OPS[type(node.op)](_eval_expr(node.left), _eval_expr(node.right))
    if (isinstance(node, ast.Call) and isinstance(node.func, ast.Name) and node.func.id in _FUNCS
            and len(node.args) == 1 and not node.keywords):
        return _FUNCS[node.func.id](_eval_expr(node.args[0]))
    raise ValueError("unsupported expression")


def _num(v, path: str) -> float:
    if isinstance(v, bool):
        raise ConfigError(path, "expected a number, got a boolean")
    if isinstance(v, (int, float)):
        return float(v)
    if isinstance(v, str):
        try:
            return float(_eval_expr(ast.parse(v.strip(), mode="eval")))
        except (SyntaxError, ValueError, ZeroDivisionError) as exc:
            raise ConfigError(path, f"cannot evaluate {v!r} ({exc})") from None
    raise ConfigError(path, f"expected a number, got {type(v).__name__}")


def _vec(v, path: str, n: int | None = None) -> list[float]:
    if not isinstance(v, (list, tuple)):
        raise ConfigError(path, "expected a list of numbers")
    out = [_num(a, f"{path}[{k}]") for k, a in enumerate(v)]
    if n is not None and len(out) != n:
        raise ConfigError(path, f"expected {n} entries, got {len(out)}")
    return out


def _diag(v, path: str, n: int) -> np.ndarray:
    if isinstance(v, (list, tuple)):
        return np.array(_vec(v, path, n))
    return np.full(n, _num(v, path))


# ---------------------------------------------------------------------------
# schema

def _section(d, path: str, required: set, optional: set) -> dict:
    if not isinstance(d, dict):
        raise ConfigError(path, "expected a mapping")
    for k in d:
        if k not in required and k not in optional:
            raise ConfigError(f"{path}.{k}" if path else str(k), "unknown key")
    for k in sorted(required):
        if k not in d:
            raise ConfigError(f"{path}.{k}" if path else k, "missing required key")
    return d


_TOP_REQ = {"agents", "object", "ocp", "run"}
_TOP_OPT = {"name", "obstacles", "gravity", "gravity_compensation", "version"}
_AGENT_REQ = {"link_lengths", "joint_offsets", "q0", "q_des"}
_AGENT_OPT = {"name", "joint_axes", "base_dof", "base_height", "grasp_position", "grasp_orientation",
              "tau_bar", "qdot_bar", "base_mass", "base_inertia", "link_masses", "hull_semi_axes",
              "hull_thickness", "joint_limits"}
_OBJ_REQ = {"x0", "x_des"}
_OBJ_OPT = {"mass", "inertia", "semi_axes", "v0"}
_OBS_REQ = {"center", "semi_axes"}
_OBS_OPT = {"orientation"}
_OCP_REQ = {"h", "T_p", "Q", "P", "R"}
_OCP_OPT = {"epsilon0", "eps_sing", "theta_bar", "separation_method", "input_mode", "u_box",
            "terminal_mode", "kkt_tol", "max_iter", "backoff", "epsilon0_min", "substeps"}
_RUN_REQ = {"duration"}
_RUN_OPT = {"delta", "validate_terminal", "terminal_samples", "seed"}


def _agent(d, path: str) -> tuple[AgentModel, list, list]:
    _section(d, path, _AGENT_REQ, _AGENT_OPT)
    links = _vec(d["link_lengths"], f"{path}.link_lengths")
    n = len(links)
    kw = dict(link_lengths=tuple(links),
              joint_offsets=tuple(_vec(d["joint_offsets"], f"{path}.joint_offsets", n)))
    if "joint_axes" in d:
        axes = d["joint_axes"]
        if not isinstance(axes, list) or len(axes) != n:
            raise ConfigError(f"{path}.joint_axes", f"expected {n} axes")
        kw["joint_axes"] = tuple(tuple(_vec(a, f"{path}.joint_axes[{k}]", 3)) for k, a in enumerate(axes))
    else:
        kw["joint_axes"] = tuple((1.0, 0.0, 0.0) for _ in range(n))
    for key in ("base_height", "tau_bar", "qdot_bar", "base_mass", "hull_thickness"):
        if key in d:
            kw[key] = _num(d[key], f"{path}.{key}")
    if "name" in d:
        kw["name"] = str(d["name"])
    if "base_dof" in d:
        kw["base_dof"] = str(d["base_dof"])
    if "grasp_position" in d:
        kw["grasp_offset_position"] = tuple(_vec(d["grasp_position"], f"{path}.grasp_position", 3))
    if "grasp_orientation" in d:
        kw["grasp_offset_orientation"] = EulerAngles(*_vec(d["grasp_orientation"], f"{path}.grasp_orientation", 3))
    if "base_inertia" in d:
        kw["base_inertia"] = tuple(_vec(d["base_inertia"], f"{path}.base_inertia", 3))
    if "link_masses" in d:
        kw["link_masses"] = tuple(_vec(d["link_masses"], f"{path}.link_masses", n))
    if "hull_semi_axes" in d:
        kw["hull_semi_axes"] = tuple(_vec(d["hull_semi_axes"], f"{path}.hull_semi_axes", 3))
    if "joint_limits" in d:
        lim = d["joint_limits"]
        if not isinstance(lim, list) or len(lim) != n:
            raise ConfigError(f"{path}.joint_limits", f"expected {n} [lower, upper] pairs")
        kw["joint_limits"] = tuple(tuple(_vec(p, f"{path}.joint_limits[{k}]", 2)) for k, p in enumerate(lim))
    try:
        model = AgentModel(**kw)
    except ValueError as exc:
        raise ConfigError(path, str(exc)) from None
    q0 = _vec(d["q0"], f"{path}.q0", model.n)
    qd = _vec(d["q_des"], f"{path}.q_des", model.n)
    return model, q0, qd


def scenario_from_dict(doc: dict) -> Scenario:
    """Validated :class:`Scenario` from a parsed scenario document."""
    _section(doc, "", _TOP_REQ, _TOP_OPT)
    if "version" in doc and doc["version"] != 1:
        raise ConfigError("version", f"unsupported version {doc['version']!r}")
    agents_doc = doc["agents"]
    if not isinstance(agents_doc, list) or not agents_doc:
        raise ConfigError("agents", "expected a nonempty list")
    parsed = [_agent(a, f"agents[{k}]") for k, a in enumerate(agents_doc)]
    agents = [p[0] for p in parsed]

    o = _section(doc["object"], "object", _OBJ_REQ, _OBJ_OPT)
    okw = {}
    if "mass" in o:
        okw["mass"] = _num(o["mass"], "object.mass")
    if "inertia" in o:
        okw["inertia"] = tuple(_vec(o["inertia"], "object.inertia", 3))
    if "semi_axes" in o:
        okw["semi_axes"] = tuple(_vec(o["semi_axes"], "object.semi_axes", 3))
    try:
        obj = ObjectModel(**okw)
        skw = dict(obj=obj, gravity_compensation=bool(doc.get("gravity_compensation", False)))
        if "gravity" in doc:
            skw["gravity"] = tuple(_vec(doc["gravity"], "gravity", 3))
        system = CoupledSystem(agents, **skw)
    except ValueError as exc:
        raise ConfigError("agents", str(exc)) from None
    d = system.d
    x0o = _vec(o["x0"], "object.x0", d)
    xdo = _vec(o["x_des"], "object.x_des", d)
    v0 = _vec(o["v0"], "object.v0", d) if "v0" in o else [0.0] * d
    x0 = system.pack(x0o, v0, [p[1] for p in parsed])
    xd = system.pack(xdo, np.zeros(d), [p[2] for p in parsed])

    obstacles = []
    for k, ob in enumerate(doc.get("obstacles") or []):
        path = f"obstacles[{k}]"
        _section(ob, path, _OBS_REQ, _OBS_OPT)
        ckw = dict(center=_vec(ob["center"], f"{path}.center", 3),
                   semi_axes=_vec(ob["semi_axes"], f"{path}.semi_axes", 3))
        if "orientation" in ob:
            rows = ob["orientation"]
            if not isinstance(rows, list) or len(rows) != 3:
                raise ConfigError(f"{path}.orientation", "expected a 3x3 rotation matrix")
            ckw["orientation"] = [_vec(r, f"{path}.orientation[{i}]", 3) for i, r in enumerate(rows)]
        try:
            obstacles.append(EllipsoidRegion(**ckw))
        except ValueError as exc:
            raise ConfigError(path, str(exc)) from None

    c = _section(doc["ocp"], "ocp", _OCP_REQ, _OCP_OPT)
    h = _num(c["h"], "ocp.h")
    T_p = _num(c["T_p"], "ocp.T_p")
    if not (0 < h < T_p):
        raise ConfigError("ocp.h", f"the sampling grid requires 0 < h < T_p (h={h:g}, T_p={T_p:g})")
    ckw = dict(h=h, T_p=T_p, Q=_diag(c["Q"], "ocp.Q", system.nx), P=_diag(c["P"], "ocp.P", system.nx),
               R=_diag(c["R"], "ocp.R", system.nu))
    for key in ("epsilon0", "eps_sing", "theta_bar", "u_box", "kkt_tol", "backoff", "epsilon0_min"):
        if key in c:
            ckw[key] = _num(c[key], f"ocp.{key}")
    for key in ("max_iter", "substeps"):
        if key in c:
            v = _num(c[key], f"ocp.{key}")
            if v != int(v):
                raise ConfigError(f"ocp.{key}", "expected an integer")
            ckw[key] = int(v)
    for key in ("separation_method", "input_mode", "terminal_mode"):
        if key in c:
            ckw[key] = str(c[key])
    try:
        cfg = OcpConfig(**ckw)
    except ValueError as exc:
        raise ConfigError("ocp", str(exc)) from None

    r = _section(doc["run"], "run", _RUN_REQ, _RUN_OPT)
    rkw = dict(duration=_num(r["duration"], "run.duration"))
    if "delta" in r:
        rkw["delta"] = _num(r["delta"], "run.delta")
    if "validate_terminal" in r:
        rkw["validate_terminal"] = bool(r["validate_terminal"])
    if "terminal_samples" in r:
        rkw["terminal_samples"] = int(_num(r["terminal_samples"], "run.terminal_samples"))
    if "seed" in r:
        rkw["seed"] = int(_num(r["seed"], "run.seed"))
    try:
        return Scenario(str(doc.get("name", "scenario")), system, x0, xd, cfg, Workspace(obstacles), **rkw)
    except ScenarioError as exc:
        raise ConfigError("run" if "sub-step" in str(exc) or "duration" in str(exc) else "agents",
                          str(exc)) from None


def resolve_scenario_path(name_or_path) -> Path:
    """Bundled scenario name (``scenario1``) or a file path."""
    p = Path(name_or_path)
    if p.exists():
        return p
    bundled = DATA_DIR / f"{name_or_path}.yaml"
    if bundled.exists():
        return bundled
    raise ConfigError("", f"no scenario file or bundled scenario named {str(name_or_path)!r}")


def load_scenario(path) -> Scenario:
    """Parse and validate a scenario file (or bundled scenario name)."""
    p = resolve_scenario_path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError("", f"cannot read {p}: {exc}") from None
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError("", f"parse error in {p}: {exc}") from None
    if doc is None:
        raise ConfigError("", f"{p} is empty")
    return scenario_from_dict(doc)


# ---------------------------------------------------------------------------
# artifacts

def state_columns(log: TrajectoryLog, n_agents: int | None = None) -> list[str]:
    """Column names of ``states.csv`` after ``t``."""
    nx = log.sub_x.shape[1]
    if log.d == 4:
        obj = ["x_O", "y_O", "z_O", "phi_O", "vx_O", "vy_O", "vz_O", "wx_O"]
    else:
        obj = ["x_O", "y_O", "z_O", "phi_O", "theta_O", "psi_O", "vx_O", "vy_O", "vz_O", "wx_O", "wy_O", "wz_O"]
    nq = nx - len(obj)
    n_agents = n_agents or _n_agents(log)
    per = nq // n_agents
    cols = list(obj)
    for i in range(1, n_agents + 1):
        if log.d == 4 and per >= 2:
            cols += [f"x_B{i}", f"y_B{i}"] + [f"alpha_{i}_{k}" for k in range(1, per - 1)]
        else:
            cols += [f"q_{i}_{k}" for k in range(1, per + 1)]
    return cols


def _n_agents(log: TrajectoryLog) -> int:
    u = np.asarray(log.u)
    return max(u.shape[1] // log.d, 1) if u.ndim == 2 else 1


def _fmt(v) -> str:
    return FLOAT_FMT % v


def _writer(schema: str):
    buf = _io.StringIO()
    buf.write(f"# schema: {schema}\n")
    return buf, csv.writer(buf, lineterminator="\n")


def states_csv(log: TrajectoryLog) -> str:
    buf, w = _writer(STATES_SCHEMA)
    w.writerow(["t"] + state_columns(log, _n_agents(log)))
    for t, x in zip(log.sub_t, log.sub_x):
        w.writerow([_fmt(t)] + [_fmt(v) for v in x])
    return buf.getvalue()


def solver_columns(log: TrajectoryLog) -> list[str]:
    n = _n_agents(log)
    d = log.d
    cols = ["t", "J", "status", "iterations", "kkt", "fallback", "candidate_admissible", "e_norm"]
    cols += [f"u_{i}_{k}" for i in range(1, n + 1) for k in range(1, d + 1)]
    cols += [f"lambda_{i}_{k}" for i in range(1, n + 1) for k in range(1, d + 1)]
    cols += [f"res:{name}" for name in log.residual_names]
    return cols


def solver_csv(log: TrajectoryLog) -> str:
    buf, w = _writer(SOLVER_SCHEMA)
    w.writerow(solver_columns(log))
    for i in range(len(log)):
        row = [_fmt(log.t[i]), _fmt(log.J[i]), log.status[i], str(int(log.iterations[i])), _fmt(log.kkt[i]),
               str(int(log.fallback[i])), _fmt(log.candidate_admissible[i]),
               _fmt(np.linalg.norm(log.e[i]))]
        row += [_fmt(v) for v in log.u[i]] + [_fmt(v) for v in log.wrenches[i]] + [_fmt(v) for v in log.residuals[i]]
        w.writerow(row)
    return buf.getvalue()


def read_csv(path) -> tuple[list[str], list[list[str]]]:
    """``(header, rows)`` of an artifact CSV (schema comment skipped)."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(ln for ln in fh if not ln.startswith("#")))
    return rows[0], rows[1:]


def _jsonable(v):
    if isinstance(v, dict):
        return {str(k): _jsonable(a) for k, a in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(a) for a in v]
    if isinstance(v, np.ndarray):
        return _jsonable(v.tolist())
    if isinstance(v, (np.floating, float)):
        f = float(v)
        return f if math.isfinite(f) else str(f)
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, np.bool_):
        return bool(v)
    return v


def summarize(log: TrajectoryLog, seed: int | None = None, scenario: Scenario | None = None,
              residual_tol: float = 1e-6) -> dict:
    """Deterministic run summary (no wall-clock times).  With ``scenario``
    the state constraints are also evaluated at every plant sub-step."""
    vrep = monitor_value_function(log)
    crep = monitor_convergence(log)
    counts = {}
    if len(log):
        counts = {s: log.status.count(s) for s in sorted(set(log.status))}
    ef = log.final_error
    out = {
        "scenario": log.scenario,
        "seed": seed,
        "samples": len(log),
        "h": log.h,
        "delta": log.delta,
        "final_state": log.final_state,
        "final_error": {"norm": float(np.linalg.norm(ef)), "position": crep.final_position_error,
                        "orientation": crep.final_angle_error},
        "constraints": {
            "min_sample_residual": float(log.residuals.min()) if log.residuals.size else None,
            "sample_violations": int(np.sum(np.any(log.residuals < -residual_tol, axis=1))),
        },
        "solver": {"status_counts": counts, "fallbacks": int(log.fallback.sum()),
                   "iterations_total": int(log.iterations.sum()),
                   "iterations_max": int(log.iterations.max()) if len(log) else 0,
                   "kkt_max": float(np.nanmax(log.kkt)) if len(log) and np.isfinite(log.kkt).any() else None},
        "terminal": None if log.terminal is None else {
            "validated": bool(log.terminal.validated), "epsilon0": float(log.terminal.epsilon0),
            "message": log.terminal.message},
        "shifted_candidates": {
            "checked": int(np.sum(~np.isnan(log.candidate_admissible))),
            "admissible": int(np.nansum(log.candidate_admissible))},
        "value_function": {"monotone_violations": len(vrep.monotone_violations),
                           "decrement_violations": len(vrep.decrement_violations),
                           "m": vrep.m, "max_excess": vrep.max_excess,
                           "max_decrement_excess": vrep.max_decrement_excess},
        "convergence": {"bounded": crep.bounded, "max_error_norm": crep.max_error_norm,
                        "max_rate_norm": crep.max_rate_norm, "z2_integral": crep.z2_integral,
                        "z2_bound": crep.z2_bound, "z2_within_bound": crep.z2_within_bound,
                        "entered_terminal_ball": crep.entered_terminal_ball, "violations": crep.violations},
    }
    if scenario is not None:
        sub = log.sub_residuals(scenario.model())
        out["constraints"]["min_sub_step_residual"] = float(sub.min()) if sub.size else None
        out["constraints"]["sub_step_violations"] = int(np.sum(np.any(sub < -residual_tol, axis=1)))
        out["constraints"]["min_by_name"] = {n: float(v) for n, v in zip(log.residual_names, sub.min(axis=0))}
    return _jsonable(out)


# --- SVG -----------------------------------------------------------------

def _svg_plot(series, title: str, xlabel: str, ylabel: str, logy: bool = False, equal: bool = False,
              circles=(), w: int = 640, hgt: int = 420) -> str:
    """Minimal line plot.  ``series`` is a list of ``(label, x, y, colour)``."""
    ml, mr, mt, mb = 70, 20, 40, 50
    xs = np.concatenate([np.asarray(s[1], float) for s in series]) if series else np.zeros(1)
    ys = np.concatenate([np.asarray(s[2], float) for s in series]) if series else np.zeros(1)
    if logy:
        ys = np.log10(np.maximum(ys, 1e-16))
    ext = [(float(c[0] - c[2]), float(c[0] + c[2]), float(c[1] - c[2]), float(c[1] + c[2])) for c in circles]
    x0 = min([float(np.nanmin(xs))] + [e[0] for e in ext])
    x1 = max([float(np.nanmax(xs))] + [e[1] for e in ext])
    y0 = min([float(np.nanmin(ys))] + [e[2] for e in ext])
    y1 = max([float(np.nanmax(ys))] + [e[3] for e in ext])
    if x1 - x0 < 1e-12:
        x1 = x0 + 1.0
    if y1 - y0 < 1e-12:
        y1 = y0 + 1.0
    pw, ph = w - ml - mr, hgt - mt - mb
    if equal:
        s = min(pw / (x1 - x0), ph / (y1 - y0))
        sx = sy = s
    else:
        sx, sy = pw / (x1 - x0), ph / (y1 - y0)

    def X(v):
        return ml + (v - x0) * sx

    def Y(v):
        return mt + ph - (v - y0) * sy

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{hgt}" viewBox="0 0 {w} {hgt}">',
           '<rect width="100%" height="100%" fill="white"/>',
           f'<text x="{w / 2:.1f}" y="22" text-anchor="middle" font-family="sans-serif" font-size="15">{title}</text>',
           f'<rect x="{ml}" y="{mt}" width="{pw}" height="{ph}" fill="none" stroke="#444"/>']
    for k in range(5):
        fx = x0 + (x1 - x0) * k / 4
        fy = y0 + (y1 - y0) * k / 4
        ylab = f"1e{fy:.1f}" if logy else f"{fy:.3g}"
        out.append(f'<text x="{X(fx):.1f}" y="{mt + ph + 18}" text-anchor="middle" font-family="sans-serif" '
                   f'font-size="11">{fx:.3g}</text>')
        out.append(f'<text x="{ml - 6}" y="{Y(fy) + 4:.1f}" text-anchor="end" font-family="sans-serif" '
                   f'font-size="11">{ylab}</text>')
    out.append(f'<text x="{ml + pw / 2:.1f}" y="{hgt - 10}" text-anchor="middle" font-family="sans-serif" '
               f'font-size="12">{xlabel}</text>')
    out.append(f'<text x="16" y="{mt + ph / 2:.1f}" text-anchor="middle" font-family="sans-serif" font-size="12" '
               f'transform="rotate(-90 16 {mt + ph / 2:.1f})">{ylabel}</text>')
    for cx, cy, r in circles:
        out.append(f'<circle cx="{X(cx):.2f}" cy="{Y(cy):.2f}" r="{r * sx:.2f}" fill="#f4cccc" stroke="#c00"/>')
    for k, (label, x, y, colour) in enumerate(series):
        y = np.asarray(y, float)
        if logy:
            y = np.log10(np.maximum(y, 1e-16))
        pts = " ".join(f"{X(a):.2f},{Y(b):.2f}" for a, b in zip(np.asarray(x, float), y))
        out.append(f'<polyline fill="none" stroke="{colour}" stroke-width="1.5" points="{pts}"/>')
        out.append(f'<text x="{ml + 8}" y="{mt + 16 + 14 * k}" font-family="sans-serif" font-size="11" '
                   f'fill="{colour}">{label}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


_COLOURS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def plots(log: TrajectoryLog, scenario: Scenario | None = None) -> dict[str, str]:
    E = log.sub_x - log.x_des
    t = log.sub_t
    d = log.d
    figs = {"errors.svg": _svg_plot(
        [("|p_O - p_O,des| [m]", t, np.linalg.norm(E[:, :3], axis=1), _COLOURS[0]),
         ("max orientation error [rad]", t, np.abs(E[:, 3:d]).max(axis=1), _COLOURS[1])],
        "object pose error", "t [s]", "error", logy=True)}
    if len(log):
        figs["value.svg"] = _svg_plot([("J*", log.t, np.maximum(log.J, 1e-16), _COLOURS[0])],
                                      "optimal cost", "t [s]", "J*", logy=True)
    series = [("object", log.sub_x[:, 0], log.sub_x[:, 1], _COLOURS[0])]
    circles = []
    if scenario is not None:
        for k, s in enumerate(scenario.system.q_slices):
            series.append((scenario.system.agents[k].name, log.sub_x[:, s][:, 0], log.sub_x[:, s][:, 1],
                           _COLOURS[(k + 1) % len(_COLOURS)]))
        for ob in scenario.workspace.obstacles:
            # outline in the x-y plane (largest horizontal extent)
            circles.append((ob.center[0], ob.center[1], float(max(ob.semi_axes[0], ob.semi_axes[1]))))
    figs["path.svg"] = _svg_plot(series, "x-y path", "x [m]", "y [m]", equal=True, circles=circles)
    return figs


@dataclass
class RunArtifacts:
    out_dir: Path
    files: dict = field(default_factory=dict)  # role -> path


def _atomic_write(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise


def default_out_dir() -> Path:
    return Path(os.environ.get(OUT_DIR_ENV, "coopmpc-out"))


def write_artifacts(log: TrajectoryLog, out_dir=None, scenario: Scenario | None = None, seed: int | None = None,
                    with_plots: bool = True) -> RunArtifacts:
    """Write CSVs, summary and plots; every file is replaced atomically."""
    out = Path(out_dir) if out_dir is not None else default_out_dir()
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from exc
    files = {"states": out / "states.csv", "solver": out / "solver.csv", "summary": out / "summary.json"}
    _atomic_write(files["states"], states_csv(log))
    _atomic_write(files["solver"], solver_csv(log))
    _atomic_write(files["summary"], json.dumps(summarize(log, seed, scenario), indent=2, sort_keys=True) + "\n")
    if with_plots:
        for name, svg in plots(log, scenario).items():
            files[name[:-4]] = out / name
            _atomic_write(out / name, svg)
    return RunArtifacts(out, files)
