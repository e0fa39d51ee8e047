"""Agent, object and coupled agents-object dynamics.

This is the reference (model-generic) implementation.  The closed loop and
the OCP evaluate the planar instantiation through :mod:`coopmpc.kernels`,
which must agree with the functions here.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .se3_kinematics import (
    AgentModel,
    KinematicSingularityError,
    PLANAR_TASK,
    SPATIAL_TASK,
    chain_frames,
    euler_to_rotation,
    grasp_offset_world,
    inverse_kinematics,
    object_agent_jacobian,
    object_repr_jacobian,
    point_jacobians,
    skew,
    task_jacobian,
)

GRAVITY = (0.0, 0.0, -9.81)


@dataclass(frozen=True)
class ObjectModel:
    mass: float = 1.0
    inertia: tuple[float, float, float] = (0.1, 0.1, 0.1)  # principal moments, object frame
    semi_axes: tuple[float, float, float] = (0.2, 0.2, 1.5)  # bounding ellipsoid, object frame

    def __post_init__(self):
        if self.mass <= 0 or min(self.inertia) <= 0:
            raise ValueError("object mass and inertia must be positive")


@dataclass
class Wrench:
    force: np.ndarray
    torque: np.ndarray

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.force, self.torque])


@dataclass
class CoupledSystem:
    """N agents rigidly grasping one object.

    State ``x = [x_O; v_O; q_1; ...; q_N]``.  For planar agents the object
    coordinates are reduced to ``(x, y, z, roll)`` and its velocity to
    ``(vx, vy, vz, wx)``; inputs are per-agent wrenches in the same
    coordinates.  With ``gravity_compensation`` the agents add a feed-forward
    wrench ``u_g(q)`` with ``G^T u_g = g~`` on top of the commanded input.
    """

    agents: Sequence[AgentModel]
    obj: ObjectModel = field(default_factory=ObjectModel)
    gravity: tuple[float, float, float] = GRAVITY
    gravity_compensation: bool = False

    def __post_init__(self):
        self.agents = tuple(self.agents)
        if not self.agents:
            raise ValueError("at least one agent is required")
        planar = [a.is_planar for a in self.agents]
        if any(planar) and not all(planar):
            raise ValueError("planar and spatial agents cannot be mixed")
        self.planar = all(planar)
        self.rows = list(PLANAR_TASK if self.planar else SPATIAL_TASK)
        self.d = len(self.rows)
        self.n_q = [a.n for a in self.agents]
        self.n = sum(self.n_q)
        self.nx = 2 * self.d + self.n
        self.nu = self.d * len(self.agents)
        offs = np.cumsum([0] + self.n_q)
        self.q_slices = [slice(2 * self.d + offs[i], 2 * self.d + offs[i + 1]) for i in range(len(self.agents))]

    @property
    def N(self) -> int:
        return len(self.agents)

    # --- state packing -------------------------------------------------
    def pose6(self, x) -> np.ndarray:
        x = np.asarray(x, float)
        p = np.zeros(6)
        p[self.rows] = x[: self.d]
        return p

    def vel6(self, x) -> np.ndarray:
        x = np.asarray(x, float)
        v = np.zeros(6)
        v[self.rows] = x[self.d: 2 * self.d]
        return v

    def joints(self, x) -> list[np.ndarray]:
        x = np.asarray(x, float)
        return [x[s] for s in self.q_slices]

    def pack(self, x_o, v_o, qs) -> np.ndarray:
        x_o = np.asarray(x_o, float)
        v_o = np.asarray(v_o, float)
        if x_o.size == 6:
            x_o = x_o[self.rows]
        if v_o.size == 6:
            v_o = v_o[self.rows]
        return np.concatenate([x_o, v_o] + [np.asarray(q, float) for q in qs])


# ---------------------------------------------------------------------------
# agent terms

def _bodies(model: AgentModel, q, frames=None):
    """(mass, world inertia, point, upto) for the base and every link."""
    fr = frames if frames is not None else chain_frames(model, q)
    out = [(model.base_mass, fr.R_base @ np.diag(model.base_inertia) @ fr.R_base.T, fr.p_base, 0)]
    for j, (l, m) in enumerate(zip(model.link_lengths, model.masses)):
        R = fr.rotations[j]
        mid = fr.origins[j] + R @ np.array([0.0, 0.0, 0.5 * l])
        I_rod = np.diag([m * l * l / 12.0, m * l * l / 12.0, 0.0])
        out.append((m, R @ I_rod @ R.T, mid, j + 1))
    return out, fr


def _body_jacobians(model: AgentModel, q):
    bodies, fr = _bodies(model, q)
    return [(m, I, *point_jacobians(model, q, p, upto, fr)) for m, I, p, upto in bodies]


def agent_joint_space_terms(model: AgentModel, q, qdot, gravity=GRAVITY,
                            fd_step: float = 1e-6) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Joint-space inertia ``B``, Coriolis matrix ``N`` and gravity ``g_q``.

    ``N`` is built from body Jacobian rates so that ``B_dot - 2N`` is skew
    symmetric; the rates come from a central difference along ``qdot``.
    """
    q = np.asarray(q, float)
    qdot = np.asarray(qdot, float)
    gvec = np.asarray(gravity, float)
    n = model.n
    B = np.zeros((n, n))
    N = np.zeros((n, n))
    gq = np.zeros(n)
    now = _body_jacobians(model, q)
    speed = np.linalg.norm(qdot)
    if speed > 0:
        h = fd_step / speed
        plus = _body_jacobians(model, q + h * qdot)
        minus = _body_jacobians(model, q - h * qdot)
    for k, (m, I, Jv, Jw) in enumerate(now):
        B += m * Jv.T @ Jv + Jw.T @ I @ Jw
        gq -= m * Jv.T @ gvec
        if speed > 0:
            Jv_dot = (plus[k][2] - minus[k][2]) / (2 * h)
            Jw_dot = (plus[k][3] - minus[k][3]) / (2 * h)
            w = Jw @ qdot
            N += m * Jv.T @ Jv_dot + Jw.T @ (I @ Jw_dot + skew(w) @ I @ Jw)
    return B, N, gq


def task_jacobian_rate(model: AgentModel, q, qdot, fd_step: float = 1e-6) -> np.ndarray:
    q = np.asarray(q, float)
    qdot = np.asarray(qdot, float)
    speed = np.linalg.norm(qdot)
    if speed == 0:
        return np.zeros((len(model.task_rows), model.n))
    h = fd_step / speed
    return (task_jacobian(model, q + h * qdot) - task_jacobian(model, q - h * qdot)) / (2 * h)


def _pinv_checked(model: AgentModel, J: np.ndarray, eps: float) -> np.ndarray:
    JtJ = J.T @ J if J.shape[1] <= J.shape[0] else J @ J.T
    if abs(np.linalg.det(JtJ)) < eps:
        raise KinematicSingularityError(f"{model.name}: det(J^T J) below {eps:g}")
    if J.shape[0] == J.shape[1]:
        return np.linalg.inv(J)
    return np.linalg.pinv(J)


def agent_task_space_terms(model: AgentModel, q, qdot, gravity=GRAVITY,
                           eps: float = 1e-12) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Task-space ``M_i``, ``C_i`` and ``g_i``.

    ``C_i`` is returned as a matrix acting on ``v_i``:
    ``C_i = M_i (J B^-1 N - J_dot) J^+``.
    """
    J = task_jacobian(model, q)
    Jp = _pinv_checked(model, J, eps)
    B, N, gq = agent_joint_space_terms(model, q, qdot, gravity)
    Binv = np.linalg.inv(B)
    M = np.linalg.inv(J @ Binv @ J.T)
    M = 0.5 * (M + M.T)
    Jdot = task_jacobian_rate(model, q, qdot)
    C = M @ (J @ Binv @ N - Jdot) @ Jp
    g = M @ J @ Binv @ gq
    return M, C, g


# ---------------------------------------------------------------------------
# object terms

def object_terms(obj: ObjectModel, x_o, v_o, gravity=GRAVITY) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Newton-Euler inertia, Coriolis matrix and gravity vector (6-D)."""
    x_o = np.asarray(x_o, float)
    v_o = np.asarray(v_o, float)
    R = euler_to_rotation(x_o[3:6])
    Iw = R @ np.diag(obj.inertia) @ R.T
    M = np.zeros((6, 6))
    M[:3, :3] = obj.mass * np.eye(3)
    M[3:, 3:] = Iw
    C = np.zeros((6, 6))
    C[3:, 3:] = skew(v_o[3:6]) @ Iw
    g = np.zeros(6)
    g[:3] = -obj.mass * np.asarray(gravity, float)
    return M, C, g


# ---------------------------------------------------------------------------
# coupled terms

def _agent_blocks(system: CoupledSystem, x, eps: float = 1e-12):
    """Per-agent (G_i, G_i_dot, q_dot_i, M_i, C_i, g_i) in task coordinates."""
    rows = system.rows
    v6 = system.vel6(x)
    v = v6[rows]
    w = v6[3:6]
    out = []
    for model, q in zip(system.agents, system.joints(x)):
        a = grasp_offset_world(model, q)
        G_i = object_agent_jacobian(a)[np.ix_(rows, rows)]
        Gd = np.zeros((6, 6))
        Gd[:3, 3:] = skew(np.cross(w, a))
        G_i_dot = Gd[np.ix_(rows, rows)]
        J = task_jacobian(model, q)
        qdot = _pinv_checked(model, J, eps) @ (G_i @ v)
        M, C, g = agent_task_space_terms(model, q, qdot, system.gravity, eps)
        out.append((G_i, G_i_dot, qdot, M, C, g))
    return out


def coupled_terms(system: CoupledSystem, x) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """``M~ = M_O + G^T M- G``, ``C~ = C_O + G^T M- G_dot + G^T C- G``, ``g~ = g_O + G^T g-``."""
    rows = system.rows
    M_O, C_O, g_O = object_terms(system.obj, system.pose6(x), system.vel6(x), system.gravity)
    Mt = M_O[np.ix_(rows, rows)].copy()
    Ct = C_O[np.ix_(rows, rows)].copy()
    gt = g_O[rows].copy()
    for G_i, G_i_dot, _, M, C, g in _agent_blocks(system, x):
        Mt += G_i.T @ M @ G_i
        Ct += G_i.T @ M @ G_i_dot + G_i.T @ C @ G_i
        gt += G_i.T @ g
    return 0.5 * (Mt + Mt.T), Ct, gt


def grasp_matrix_of(system: CoupledSystem, x) -> np.ndarray:
    rows = system.rows
    return np.vstack([object_agent_jacobian(grasp_offset_world(m, q))[np.ix_(rows, rows)]
                      for m, q in zip(system.agents, system.joints(x))])


def compensation_wrench(system: CoupledSystem, x, weights=None) -> np.ndarray:
    """Minimum-(weighted)-norm ``u_g`` with ``G^T u_g = g~``."""
    _, _, gt = coupled_terms(system, x)
    G = grasp_matrix_of(system, x)
    Winv = np.eye(system.nu) if weights is None else np.diag(1.0 / np.asarray(weights, float))
    return Winv @ G @ np.linalg.solve(G.T @ Winv @ G, gt)


def applied_input(system: CoupledSystem, x, u) -> np.ndarray:
    u = np.asarray(u, float)
    if system.gravity_compensation:
        return u + compensation_wrench(system, x)
    return u


def joint_rates(system: CoupledSystem, x) -> np.ndarray:
    """``q_dot = J^ J_O I~ v_O`` stacked over the agents."""
    v = system.vel6(x)[system.rows]
    out = []
    for model, q in zip(system.agents, system.joints(x)):
        G_i = object_agent_jacobian(grasp_offset_world(model, q))[np.ix_(system.rows, system.rows)]
        out.append(_pinv_checked(model, task_jacobian(model, q), 1e-12) @ (G_i @ v))
    return np.concatenate(out)


def state_derivative(system: CoupledSystem, x, u) -> np.ndarray:
    """Compact dynamics ``x_dot = [f1; f2; f3]``."""
    x = np.asarray(x, float)
    d = system.d
    rows = system.rows
    _, Jinv = object_repr_jacobian(system.pose6(x))
    v = x[d: 2 * d]
    f1 = Jinv[np.ix_(rows, rows)] @ v
    Mt, Ct, gt = coupled_terms(system, x)
    G = grasp_matrix_of(system, x)
    f2 = np.linalg.solve(Mt, G.T @ applied_input(system, x, u) - Ct @ v - gt)
    f3 = joint_rates(system, x)
    return np.concatenate([f1, f2, f3])


def error_derivative(system: CoupledSystem, e, u, x_des) -> np.ndarray:
    return state_derivative(system, np.asarray(e, float) + np.asarray(x_des, float), u)


def interaction_wrenches(system: CoupledSystem, x, u, vdot_o=None) -> np.ndarray:
    """Stacked agent-to-object wrenches ``lambda-`` (task coordinates).

    ``lambda- = u - M- G v_O_dot - (M- G_dot + C- G) v_O - g-`` with ``u``
    the applied (compensated, if enabled) input.
    """
    x = np.asarray(x, float)
    d = system.d
    v = x[d: 2 * d]
    if vdot_o is None:
        vdot_o = state_derivative(system, x, u)[d: 2 * d]
    ua = applied_input(system, x, u)
    lam = []
    for i, (G_i, G_i_dot, _, M, C, g) in enumerate(_agent_blocks(system, x)):
        ui = ua[i * d: (i + 1) * d]
        lam.append(ui - M @ G_i @ vdot_o - (M @ G_i_dot + C @ G_i) @ v - g)
    return np.concatenate(lam)


def kinetic_energy(system: CoupledSystem, x) -> float:
    Mt, _, _ = coupled_terms(system, x)
    v = np.asarray(x, float)[system.d: 2 * system.d]
    return 0.5 * float(v @ Mt @ v)


def rk4_step(f, x, dt: float) -> np.ndarray:
    k1 = f(x)
    k2 = f(x + 0.5 * dt * k1)
    k3 = f(x + 0.5 * dt * k2)
    k4 = f(x + dt * k3)
    return x + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)


def project_grasp(system: CoupledSystem, x) -> np.ndarray:
    """Re-synchronise every agent's joints with the object pose."""
    x = np.array(x, dtype=float)
    x_o = system.pose6(x)
    for model, s in zip(system.agents, system.q_slices):
        x[s] = inverse_kinematics(model, x_o, x[s])
    return x


def integrate(system: CoupledSystem, x, u, dt: float, project: bool = True) -> np.ndarray:
    """One classical RK4 step with zero-order-hold input."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    x_next = rk4_step(lambda y: state_derivative(system, y, u), np.asarray(x, float), dt)
    return project_grasp(system, x_next) if project else x_next


def grasp_residuals(system: CoupledSystem, x) -> np.ndarray:
    """Per-agent norm of the rigid-grasp mismatch (task coordinates)."""
    from .se3_kinematics import grasp_residual

    x_o = system.pose6(x)
    return np.array([np.linalg.norm(grasp_residual(m, q, x_o)[list(m.task_rows)])
                     for m, q in zip(system.agents, system.joints(x))])
