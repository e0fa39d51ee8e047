"""Receding-horizon execution, scenario presets and stability monitors.

At every ``t_i = i h`` the OCP is solved from the measured error, the first
input interval is held over ``[t_i, t_i + h)`` and the plant is integrated
with RK4 at sub-step ``delta`` followed by the rigid-grasp projection.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .constraints import Workspace, audit_workspace, sphere
from .coupled_dynamics import CoupledSystem, ObjectModel, grasp_residuals, interaction_wrenches
from .ocp import (
    OcpConfig,
    SolveResult,
    SystemModel,
    TerminalIngredients,
    admissibility_check,
    build_ocp,
    shift_warm_start,
    solve,
    terminal_gain,
    terminal_ingredients,
)
from .se3_kinematics import AgentModel, EulerAngles

logger = logging.getLogger("coopmpc.closed_loop")

# Link-1 length of the preset arms: l1 sin(pi/4) = 0.7071 exactly, so the
# 4-decimal start and goal coordinates close the grasp loop with zero residual.
LINK1 = 0.7071 * np.sqrt(2.0)
LINK2 = 0.2
# Preset masses (kg).  Lighter than the library defaults so that the
# published weights and horizon settle the transport within the run time.
PRESET_BASE_MASS = 0.5
PRESET_LINK_MASS = 0.25


class ScenarioError(ValueError):
    """Invalid scenario definition."""


class InitialInfeasibleError(RuntimeError):
    """The OCP has no feasible solution at ``t = 0``."""

    def __init__(self, message, result: SolveResult | None = None):
        super().__init__(message)
        self.result = result


@dataclass
class Scenario:
    """Everything needed for one closed-loop run.

    ``x0`` and ``x_des`` are full states ``[x_O, v_O, q]``.  ``delta`` is the
    plant sub-step (``h / 10`` when omitted).
    """

    name: str
    system: CoupledSystem
    x0: np.ndarray
    x_des: np.ndarray
    config: OcpConfig
    workspace: Workspace = field(default_factory=Workspace)
    duration: float = 10.0
    delta: float | None = None
    validate_terminal: bool = True
    terminal_samples: int = 1000
    seed: int = 0

    def __post_init__(self):
        self.x0 = np.asarray(self.x0, float)
        self.x_des = np.asarray(self.x_des, float)
        nx = self.system.nx
        if self.x0.shape != (nx,) or self.x_des.shape != (nx,):
            raise ScenarioError(f"x0 and x_des must have {nx} entries")
        if self.delta is None:
            self.delta = self.config.h / 10
        if not (0 < self.delta <= self.config.h):
            raise ScenarioError("plant sub-step must satisfy 0 < delta <= h")
        ratio = self.config.h / self.delta
        if abs(ratio - round(ratio)) > 1e-9:
            raise ScenarioError("h must be an integer multiple of the plant sub-step")
        if self.duration < 0:
            raise ScenarioError("duration must be nonnegative")
        steps = self.duration / self.config.h
        if abs(steps - round(steps)) > 1e-9:
            raise ScenarioError("duration must be an integer multiple of h")
        if np.any(self.x_des[self.system.d: 2 * self.system.d] != 0):
            raise ScenarioError("the desired object velocity must be zero")
        for label, x in (("x0", self.x0), ("x_des", self.x_des)):
            r = grasp_residuals(self.system, x)
            if r.max() > 1e-6:
                raise ScenarioError(f"{label}: joints inconsistent with the object pose "
                                    f"(grasp residual {r.max():.3g})")

    @property
    def n_steps(self) -> int:
        return int(round(self.duration / self.config.h))

    @property
    def n_sub(self) -> int:
        return int(round(self.config.h / self.delta))

    def model(self) -> SystemModel:
        return SystemModel(self.system, self.workspace, self.config)

    def check_initial_state(self, tol: float = 1e-6) -> list[str]:
        """Names of the state constraints violated by ``x0``."""
        m = self.model()
        r = m.residuals(self.x0[None])[0]
        return [n for n, v in zip(m.names, r) if v < -tol]


@dataclass
class TrajectoryLog:
    """Closed-loop record.  Sample arrays have one row per ``t_i``; the
    ``sub_*`` arrays one row per plant sub-step (starting with ``x0``)."""

    scenario: str
    h: float
    delta: float
    x_des: np.ndarray
    residual_names: list
    t: np.ndarray
    x: np.ndarray
    e: np.ndarray
    u: np.ndarray
    J: np.ndarray
    status: list
    iterations: np.ndarray
    kkt: np.ndarray
    fallback: np.ndarray
    residuals: np.ndarray
    wrenches: np.ndarray
    candidate_admissible: np.ndarray  # shifted candidate at t_{i+1}; nan if not checked
    sub_t: np.ndarray
    sub_x: np.ndarray
    terminal: TerminalIngredients | None = None
    weights: tuple = ()  # (Q, R) matrices for the monitors
    d: int = 4  # object pose coordinates (4 planar, 6 spatial)
    solve_seconds: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __len__(self) -> int:
        return len(self.t)

    @property
    def final_state(self) -> np.ndarray:
        return self.sub_x[-1]

    @property
    def final_error(self) -> np.ndarray:
        return self.sub_x[-1] - self.x_des

    def sub_residuals(self, model: SystemModel) -> np.ndarray:
        return model.residuals(self.sub_x)


def run(scenario: Scenario, progress=None, check_candidates: bool = True) -> TrajectoryLog:
    """Closed-loop simulation of ``scenario``.

    A solver failure after ``t = 0`` falls back to the shifted candidate of the
    previous instant and is flagged in ``log.fallback``.  ``progress`` is
    called as ``progress(i, n_steps, result)``.
    """
    sc = scenario
    cfg = sc.config
    model = sc.model()
    x_des = sc.x_des
    bad = sc.check_initial_state()
    if bad:
        raise InitialInfeasibleError("initial state violates " + ", ".join(bad))
    if sc.validate_terminal:
        tf = terminal_ingredients(model, x_des, cfg, samples=sc.terminal_samples, seed=sc.seed)
    else:
        K, u_eq, *_ = terminal_gain(model, x_des, cfg)
        tf = TerminalIngredients(K, u_eq, 0.0, False, message="not validated",
                                 u_box=cfg.u_box if cfg.input_mode == "box" else None)
    if cfg.terminal_mode == "hard" and tf.validated:
        cfg = replace(cfg, epsilon0=tf.epsilon0)
    logger.info("%s: %s", sc.name, tf.message)
    radius = tf.epsilon0 if tf.validated else None

    K, n_sub, dt = sc.n_steps, sc.n_sub, sc.delta
    nx, nu = model.nx, model.nu
    rec = dict(t=np.zeros(K), x=np.zeros((K, nx)), u=np.zeros((K, nu)), J=np.zeros(K),
               it=np.zeros(K, int), kkt=np.zeros(K), fb=np.zeros(K, bool),
               res=np.zeros((K, model.n_res)), w=np.zeros((K, nu)), adm=np.full(K, np.nan),
               secs=np.zeros(K))
    status = []
    sub_x = np.zeros((K * n_sub + 1, nx))
    sub_x[0] = sc.x0
    x = sc.x0.copy()
    warm = None
    for i in range(K):
        t0 = time.perf_counter()
        prob = build_ocp(x - x_des, cfg, model=model, x_des=x_des)
        res = solve(prob, warm)
        rec["secs"][i] = time.perf_counter() - t0
        if res.status == "infeasible":
            if warm is None:
                raise InitialInfeasibleError(f"OCP infeasible at t = {i * cfg.h:g}: {res.message} "
                                             f"(min residual {res.residual_min:.3g})", res)
            U = np.asarray(warm[0], float)
            E = prob.rollout(U)
            res = SolveResult(U, E, prob.objective(prob.pack(U, E)), np.nan, "fallback",
                              res.iterations, 0.0, float(model.residuals(E[1:] + x_des).min()),
                              "shifted candidate applied")
            rec["fb"][i] = True
            logger.warning("t=%.3f solver failure, shifted candidate applied", i * cfg.h)
        u = res.u[0].copy()
        rec["t"][i] = i * cfg.h
        rec["x"][i] = x
        rec["u"][i] = u
        rec["J"][i] = res.J
        rec["it"][i] = res.iterations
        rec["kkt"][i] = res.kkt_residual
        rec["res"][i] = model.residuals(x[None])[0]
        rec["w"][i] = interaction_wrenches(sc.system, x, u)
        status.append(res.status)
        for j in range(n_sub):
            x = model.project(model.step(x, u, dt))
            sub_x[i * n_sub + j + 1] = x
        warm = shift_warm_start(res, tf.controller, cfg, model, x_des)
        if check_candidates and i + 1 < K:
            rep = admissibility_check(warm[0], x - x_des, cfg, model, x_des, radius)
            rec["adm"][i + 1] = float(rep.admissible)
        if progress is not None:
            progress(i, K, res)
    sub_t = np.arange(K * n_sub + 1) * dt
    e = rec["x"] - x_des
    return TrajectoryLog(sc.name, cfg.h, dt, x_des.copy(), list(model.names), rec["t"], rec["x"], e,
                         rec["u"], rec["J"], status, rec["it"], rec["kkt"], rec["fb"], rec["res"],
                         rec["w"], rec["adm"], sub_t, sub_x, tf, (cfg.Qm, cfg.Rm), sc.system.d, rec["secs"])


# ---------------------------------------------------------------------------
# monitors

@dataclass
class StabilityMonitor:
    """Running value-function bookkeeping along a log."""

    J: list = field(default_factory=list)
    z2_integral: list = field(default_factory=list)  # cumulative, one entry per sample
    violations: list = field(default_factory=list)

    def push(self, J: float, z2_interval: float):
        prev = self.z2_integral[-1] if self.z2_integral else 0.0
        self.J.append(float(J))
        self.z2_integral.append(prev + max(float(z2_interval), 0.0))


def _z2_intervals(log: TrajectoryLog) -> np.ndarray:
    """``int |z2|^2`` over each sampling interval, ``z2 = [e, u]`` (trapezoid
    on the plant sub-steps)."""
    n_sub = int(round(log.h / log.delta))
    out = np.zeros(len(log))
    for i in range(len(log)):
        E = log.sub_x[i * n_sub: (i + 1) * n_sub + 1] - log.x_des
        f = np.einsum("ij,ij->i", E, E) + float(log.u[i] @ log.u[i])
        out[i] = log.delta * (0.5 * f[0] + f[1:-1].sum() + 0.5 * f[-1])
    return out


@dataclass
class ValueReport:
    samples: int
    monotone_violations: list  # indices i with J_{i+1} > J_i + tol
    decrement_violations: list  # indices i failing the quantitative bound
    m: float
    max_excess: float
    max_decrement_excess: float
    monitor: StabilityMonitor

    @property
    def ok(self) -> bool:
        return not self.monotone_violations and not self.decrement_violations


def monitor_value_function(log: TrajectoryLog, rel_tol: float = 1e-3, m: float | None = None,
                           J=None) -> ValueReport:
    """Check ``J*_{i+1} <= J*_i + tol`` and ``J*_{i+1} - J*_i <= -m int|z2|^2 + tol``
    with ``tol = rel_tol (1 + J*_i)``.  ``J`` overrides the logged values
    (fault injection)."""
    Js = np.asarray(log.J if J is None else J, float)
    if m is None:
        if log.weights:
            Q, R = log.weights
            m = float(min(np.linalg.eigvalsh(Q).min(), np.linalg.eigvalsh(R).min()))
        else:
            m = 0.0
    z2 = _z2_intervals(log) if len(log) else np.zeros(0)
    mon = StabilityMonitor()
    mono, dec = [], []
    ex, dex = -np.inf, -np.inf
    for i in range(len(Js)):
        mon.push(Js[i], z2[i] if i < len(z2) else 0.0)
        if i + 1 >= len(Js):
            break
        tol = rel_tol * (1.0 + Js[i])
        d = Js[i + 1] - Js[i]
        ex = max(ex, d - tol)
        dex = max(dex, d + m * z2[i] - tol)
        if d > tol:
            mono.append(i)
        if d > -m * z2[i] + tol:
            dec.append(i)
    mon.violations = sorted(set(mono) | set(dec))
    return ValueReport(len(Js), mono, dec, m, float(ex), float(dex), mon)


@dataclass
class ConvergenceReport:
    samples: int
    bounded: bool
    max_error_norm: float
    max_rate_norm: float
    z2_integral: float
    z2_bound: float | None
    final_error_norm: float
    final_position_error: float
    final_angle_error: float
    entered_terminal_ball: bool | None
    violations: list
    z2_within_bound: bool | None = None

    @property
    def ok(self) -> bool:
        return self.bounded and not self.violations


def monitor_convergence(log: TrajectoryLog, bound: float = 1e3, m: float | None = None) -> ConvergenceReport:
    """Boundedness of ``e``, ``e_dot`` and ``int |z2|^2`` plus the final errors.

    ``e`` must stay below ``max(bound, 10 |e(0)|)`` and ``e_dot`` below
    ``bound``.  The ``z2`` integral is compared with ``J*(0) / m``; exceeding it
    is reported as a violation but does not make the run unbounded.
    """
    if len(log) == 0:
        return ConvergenceReport(0, True, 0.0, 0.0, 0.0, None, 0.0, 0.0, 0.0, None, [])
    E = log.sub_x - log.x_des
    n = np.linalg.norm(E, axis=1)
    rate = np.linalg.norm(np.diff(E, axis=0), axis=1) / log.delta if len(E) > 1 else np.zeros(1)
    viol = []
    if not np.all(np.isfinite(E)):
        viol.append("non-finite error")
    lim = max(bound, 10.0 * n[0])
    if n.max() > lim:
        viol.append(f"|e| reached {n.max():.3g} > {lim:.3g}")
    if rate.size and rate.max() > bound:
        viol.append(f"|e_dot| reached {rate.max():.3g} > {bound:.3g}")
    bounded = not viol
    z2 = float(_z2_intervals(log).sum())
    if not np.isfinite(z2):
        viol.append("non-finite int |z2|^2")
        bounded = False
    if m is None and log.weights:
        Q, R = log.weights
        m = float(min(np.linalg.eigvalsh(Q).min(), np.linalg.eigvalsh(R).min()))
    z2_bound = None
    within = None
    if m:
        z2_bound = float(log.J[0]) / m
        within = bool(z2 <= z2_bound * (1 + 1e-3) + 1e-9)
        if not within:
            viol.append(f"int |z2|^2 = {z2:.4g} exceeds J*(0)/m = {z2_bound:.4g}")
    ef = E[-1]
    ball = None
    if log.terminal is not None and log.terminal.validated:
        ball = bool(np.linalg.norm(ef) <= log.terminal.epsilon0)
    pos = float(np.linalg.norm(ef[:3]))
    ang = float(np.abs(ef[3:log.d]).max())
    return ConvergenceReport(len(log), bounded, float(n.max()), float(rate.max()) if rate.size else 0.0, z2,
                             z2_bound, float(n[-1]), pos, ang, ball, viol, within)


# ---------------------------------------------------------------------------
# presets

def planar_agent(name: str, elbow_offset: float, grasp_position, joint_limits=None, qdot_bar: float = 1.0,
                 **kw) -> AgentModel:
    """Mobile base with a two-link arm rotating about the base x-axis, holding
    the object with a ``-pi/2`` roll offset."""
    return AgentModel(link_lengths=(LINK1, LINK2), joint_axes=((1.0, 0.0, 0.0), (1.0, 0.0, 0.0)),
                      joint_offsets=(0.0, elbow_offset), grasp_offset_position=tuple(grasp_position),
                      grasp_offset_orientation=EulerAngles(-np.pi / 2, 0.0, 0.0), joint_limits=joint_limits,
                      qdot_bar=qdot_bar, name=name, **kw)


def _preset_agent(name, elbow_offset, grasp_position, sign, joint_eps, qdot_bar):
    return planar_agent(name, elbow_offset, grasp_position, _limits(sign, joint_eps), qdot_bar,
                        base_mass=PRESET_BASE_MASS, link_masses=(PRESET_LINK_MASS, PRESET_LINK_MASS))


def _limits(sign: int, eps: float):
    """Arm limits keeping the first joint inside one quadrant."""
    first = (eps, np.pi / 2 - eps) if sign > 0 else (-np.pi / 2 + eps, -eps)
    return (first, (-np.pi / 2 + eps, np.pi / 2 - eps))


def scenario1(duration: float = 80.0, qdot_bar: float = 0.5, eps_sing: float = 1e-3, joint_eps: float = 1e-3,
              **ocp_overrides) -> Scenario:
    """Two agents carry the object past a spherical obstacle."""
    agents = [_preset_agent("agent1", -np.pi / 2, (0.0, 1.5, 0.0), +1, joint_eps, qdot_bar),
              _preset_agent("agent2", np.pi / 2, (0.0, -1.5, 0.0), -1, joint_eps, qdot_bar)]
    system = CoupledSystem(agents, ObjectModel(), gravity_compensation=True)
    q4 = np.pi / 4
    x0 = system.pack([0.0, -2.2071, 0.9071, np.pi / 2], np.zeros(4),
                     [[0.0, 0.0, q4, q4], [0.0, -4.4142, -q4, -q4]])
    xd = system.pack([10.0, 10.0, 0.9071, np.pi / 2], np.zeros(4),
                     [[10.0, 12.2071, q4, q4], [10.0, 7.7929, -q4, -q4]])
    opts = dict(h=0.1, T_p=0.3, Q=np.full(16, 10.0), P=np.full(16, 10.0), R=np.full(8, 2.0), u_box=10.0,
                eps_sing=eps_sing, terminal_mode="none", backoff=5e-3)
    opts.update(ocp_overrides)
    return Scenario("scenario1", system, x0, xd, OcpConfig(**opts),
                    Workspace([sphere((5.0, 5.0, 1.0), 2.0)]), duration)


def scenario2(duration: float = 100.0, qdot_bar: float = 0.5, eps_sing: float = 1e-3, joint_eps: float = 1e-3,
              **ocp_overrides) -> Scenario:
    """Three agents carry the object to a goal 5 m away; no obstacle."""
    agents = [_preset_agent("agent1", -np.pi / 2, (0.5, 1.5, 0.0), +1, joint_eps, qdot_bar),
              _preset_agent("agent2", np.pi / 2, (0.0, -1.5, 0.0), -1, joint_eps, qdot_bar),
              _preset_agent("agent3", -np.pi / 2, (-0.5, 1.5, 0.0), +1, joint_eps, qdot_bar)]
    system = CoupledSystem(agents, ObjectModel(), gravity_compensation=True)
    q4 = np.pi / 4
    x0 = system.pack([0.0, -2.2071, 0.9071, np.pi / 2], np.zeros(4),
                     [[0.5, 0.0, q4, q4], [0.0, -4.4142, -q4, -q4], [-0.5, 0.0, q4, q4]])
    xd = system.pack([5.0, -2.2071, 0.9071, np.pi / 2], np.zeros(4),
                     [[5.5, 0.0, q4, q4], [5.0, -4.4142, -q4, -q4], [4.5, 0.0, q4, q4]])
    opts = dict(h=0.1, T_p=0.5, Q=np.full(20, 0.5), P=np.full(20, 0.5), R=np.full(12, 0.5), u_box=10.0,
                eps_sing=eps_sing, terminal_mode="none", backoff=5e-3)
    opts.update(ocp_overrides)
    return Scenario("scenario2", system, x0, xd, OcpConfig(**opts),
                    Workspace(), duration)


PRESETS = {"scenario1": scenario1, "scenario2": scenario2}


def preflight(scenario: Scenario) -> list[str]:
    """Human-readable warnings about the scenario geometry."""
    return audit_workspace(scenario.system, scenario.x0, scenario.workspace, scenario.x_des,
                           scenario.config.constraint_config)
