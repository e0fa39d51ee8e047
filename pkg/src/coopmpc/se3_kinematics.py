"""Rotations, Euler-rate maps and the kinematics of mobile manipulators that
rigidly grasp a common object.

Conventions
-----------
* Euler angles are intrinsic x-y-z: ``R = Rx(phi) @ Ry(theta) @ Rz(psi)``.
  With this ordering the world-frame angular velocity is ``J_B(eta) @ eta_dot``.
* Velocities are stacked ``[linear; angular]`` (6-vectors).
* A *planar* agent has a base translating in the x-y plane and an arm whose
  joints all rotate about the world x-axis.  Its task space is reduced to the
  four coordinates ``(x, y, z, roll)`` (see :data:`PLANAR_TASK`).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

PLANAR_TASK = (0, 1, 2, 3)
SPATIAL_TASK = (0, 1, 2, 3, 4, 5)

_BASE_DOFS = {"planar": 2, "spatial": 6}


class SingularityError(ValueError):
    """Raised when a kinematic or representation singularity is hit."""


class RepresentationSingularityError(SingularityError):
    pass


class KinematicSingularityError(SingularityError):
    pass


class EulerAngles(NamedTuple):
    phi: float = 0.0
    theta: float = 0.0
    psi: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([self.phi, self.theta, self.psi], dtype=float)


@dataclass
class Pose:
    position: np.ndarray
    orientation: EulerAngles

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.position, self.orientation.as_array()])

    @classmethod
    def from_array(cls, a: Sequence[float]) -> "Pose":
        a = np.asarray(a, dtype=float)
        return cls(a[:3].copy(), EulerAngles(*a[3:6]))


@dataclass
class JointState:
    q: np.ndarray
    qdot: np.ndarray


def _as_eta(eta) -> np.ndarray:
    if isinstance(eta, EulerAngles):
        return eta.as_array()
    return np.asarray(eta, dtype=float)


def skew(a) -> np.ndarray:
    """Matrix ``S(a)`` with ``S(a) @ b == cross(a, b)``."""
    x, y, z = np.asarray(a, dtype=float)
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def rot_x(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_z(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def axis_rotation(axis, angle: float) -> np.ndarray:
    """Rodrigues rotation about a unit axis."""
    k = np.asarray(axis, dtype=float)
    K = skew(k)
    return np.eye(3) + np.sin(angle) * K + (1.0 - np.cos(angle)) * (K @ K)


def euler_to_rotation(eta) -> np.ndarray:
    phi, theta, psi = _as_eta(eta)
    return rot_x(phi) @ rot_y(theta) @ rot_z(psi)


def rotation_to_euler(R: np.ndarray) -> EulerAngles:
    """Inverse of :func:`euler_to_rotation` on the principal branch."""
    theta = float(np.arcsin(np.clip(R[0, 2], -1.0, 1.0)))
    phi = float(np.arctan2(-R[1, 2], R[2, 2]))
    psi = float(np.arctan2(-R[0, 1], R[0, 0]))
    return EulerAngles(phi, theta, psi)


def euler_rate_jacobian(eta) -> np.ndarray:
    """``J_B(eta)`` mapping Euler-angle rates to world angular velocity.

    Its determinant is ``cos(theta)``; it is singular at ``theta = +-pi/2``.
    """
    phi, theta, _ = _as_eta(eta)
    sp, cp = np.sin(phi), np.cos(phi)
    st, ct = np.sin(theta), np.cos(theta)
    return np.array([[1.0, 0.0, st], [0.0, cp, -ct * sp], [0.0, sp, ct * cp]])


def object_repr_jacobian(x_o, tol: float = 1e-9) -> tuple[np.ndarray, np.ndarray]:
    """Object representation Jacobian ``diag(I3, J_B(eta_O))`` and its inverse.

    ``x_o`` is a :class:`Pose` or a 6-vector ``[p; eta]``.
    """
    eta = x_o.orientation.as_array() if isinstance(x_o, Pose) else np.asarray(x_o, float)[3:6]
    if abs(np.cos(eta[1])) < tol:
        raise RepresentationSingularityError(
            f"object pitch {eta[1]:.6g} rad is at a representation singularity"
        )
    Jt = euler_rate_jacobian(eta)
    J = np.eye(6)
    J[3:, 3:] = Jt
    Jinv = np.eye(6)
    Jinv[3:, 3:] = np.linalg.inv(Jt)
    return J, Jinv


@dataclass(frozen=True)
class AgentModel:
    """Mobile manipulator: a moving base carrying a serial revolute arm.

    Arm joint ``j`` rotates by ``alpha_j + joint_offsets[j]`` about
    ``joint_axes[j]`` (expressed in the previous link frame) and is followed
    by a straight link of length ``link_lengths[j]`` along the local z-axis.
    Masses follow the slender-rod model: point mass at each link midpoint with
    inertia ``m l^2 / 12`` about the two axes normal to the link.
    """

    link_lengths: tuple[float, ...]
    joint_axes: tuple[tuple[float, float, float], ...]
    joint_offsets: tuple[float, ...]
    base_dof: str = "planar"
    base_height: float = 0.0
    grasp_offset_position: tuple[float, float, float] = (0.0, 0.0, 0.0)
    grasp_offset_orientation: EulerAngles = EulerAngles()
    tau_bar: float = 10.0
    qdot_bar: float = 1.0
    base_mass: float = 5.0
    base_inertia: tuple[float, float, float] = (0.1, 0.1, 0.1)
    link_masses: tuple[float, ...] = ()
    hull_semi_axes: tuple[float, float, float] | None = None
    hull_thickness: float = 0.3
    joint_limits: tuple[tuple[float, float], ...] | None = None
    name: str = "agent"

    def __post_init__(self):
        if self.base_dof not in _BASE_DOFS:
            raise ValueError(f"base_dof must be one of {sorted(_BASE_DOFS)}")
        n = len(self.link_lengths)
        if n == 0 or len(self.joint_axes) != n or len(self.joint_offsets) != n:
            raise ValueError("link_lengths, joint_axes and joint_offsets must share a nonzero length")
        if any(l <= 0 for l in self.link_lengths):
            raise ValueError("link lengths must be positive")
        if self.tau_bar <= 0 or self.qdot_bar <= 0:
            raise ValueError("tau_bar and qdot_bar must be positive")
        if self.hull_semi_axes is not None and any(b <= 0 for b in self.hull_semi_axes):
            raise ValueError("hull semi-axes must be positive")
        if self.link_masses and len(self.link_masses) != n:
            raise ValueError("one mass per link is required")
        if self.joint_limits is not None and len(self.joint_limits) != n:
            raise ValueError("one (lower, upper) limit pair per arm joint is required")

    @property
    def n_alpha(self) -> int:
        return len(self.link_lengths)

    @property
    def n_base(self) -> int:
        return _BASE_DOFS[self.base_dof]

    @property
    def n(self) -> int:
        return self.n_base + self.n_alpha

    @property
    def is_planar(self) -> bool:
        return self.base_dof == "planar" and all(
            np.allclose(a, (1.0, 0.0, 0.0)) for a in self.joint_axes
        )

    @property
    def task_rows(self) -> tuple[int, ...]:
        return PLANAR_TASK if self.is_planar else SPATIAL_TASK

    @property
    def reach(self) -> float:
        return float(sum(self.link_lengths))

    def hull_axes(self) -> tuple[float, float, float]:
        """Semi-axes of the base-centred ellipsoid bounding base and arm.

        A planar arm sweeps the y-z plane of its base, so its hull is a disc
        of radius ``reach`` with thickness ``hull_thickness`` along x.
        """
        if self.hull_semi_axes is not None:
            return tuple(float(b) for b in self.hull_semi_axes)
        r = max(self.reach, self.base_height)
        if self.is_planar:
            return (self.hull_thickness, r, r)
        return (r, r, r)

    @property
    def masses(self) -> tuple[float, ...]:
        return self.link_masses or tuple(1.0 for _ in self.link_lengths)


def _check_q(model: AgentModel, q) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    if q.shape != (model.n,):
        raise ValueError(f"joint vector has shape {q.shape}, model expects ({model.n},)")
    return q


def base_pose(model: AgentModel, q) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Base position, Euler angles and rotation."""
    q = _check_q(model, q)
    if model.base_dof == "planar":
        p = np.array([q[0], q[1], 0.0])
        eta = np.zeros(3)
    else:
        p = q[:3].copy()
        eta = q[3:6].copy()
    return p, eta, euler_to_rotation(eta)


@dataclass
class ChainFrames:
    """World-frame quantities of one evaluation of the serial chain."""

    p_base: np.ndarray
    eta_base: np.ndarray
    R_base: np.ndarray
    origins: list = field(default_factory=list)  # joint origins, len n_alpha + 1 (last = EE)
    rotations: list = field(default_factory=list)  # link rotations, len n_alpha
    axes: list = field(default_factory=list)  # world joint axes, len n_alpha

    @property
    def p_end(self) -> np.ndarray:
        return self.origins[-1]

    @property
    def R_end(self) -> np.ndarray:
        return self.rotations[-1]


def chain_frames(model: AgentModel, q) -> ChainFrames:
    q = _check_q(model, q)
    p_b, eta_b, R_b = base_pose(model, q)
    alpha = q[model.n_base:]
    fr = ChainFrames(p_b, eta_b, R_b)
    o = p_b + R_b @ np.array([0.0, 0.0, model.base_height])
    R = R_b
    fr.origins.append(o)
    for j in range(model.n_alpha):
        axis = np.asarray(model.joint_axes[j], dtype=float)
        fr.axes.append(R @ axis)
        R = R @ axis_rotation(axis, alpha[j] + model.joint_offsets[j])
        o = o + R @ np.array([0.0, 0.0, model.link_lengths[j]])
        fr.rotations.append(R)
        fr.origins.append(o)
    return fr


def end_effector_euler(model: AgentModel, q, frames: ChainFrames | None = None) -> np.ndarray:
    fr = frames if frames is not None else chain_frames(model, q)
    if model.is_planar:
        # single roll angle: keep it unwrapped so it stays differentiable
        q = np.asarray(q, float)
        return np.array([np.sum(q[model.n_base:]) + np.sum(model.joint_offsets), 0.0, 0.0])
    return rotation_to_euler(fr.R_end).as_array()


def forward_kinematics(model: AgentModel, q) -> Pose:
    """End-effector pose ``p_E = p_B + R_B k_p(alpha)``, ``eta_E = k_eta(eta_B, alpha)``."""
    fr = chain_frames(model, q)
    return Pose(fr.p_end.copy(), EulerAngles(*end_effector_euler(model, q, fr)))


def point_jacobians(model: AgentModel, q, point: np.ndarray, upto: int,
                    frames: ChainFrames | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Linear and angular Jacobians (3 x n each) of a world point rigidly
    attached after arm joint ``upto - 1`` (``upto = 0`` means the base)."""
    fr = frames if frames is not None else chain_frames(model, q)
    n = model.n
    Jv = np.zeros((3, n))
    Jw = np.zeros((3, n))
    if model.base_dof == "planar":
        Jv[0, 0] = 1.0
        Jv[1, 1] = 1.0
    else:
        Jv[:, :3] = np.eye(3)
        JB = euler_rate_jacobian(fr.eta_base)
        Jv[:, 3:6] = -skew(point - fr.p_base) @ JB
        Jw[:, 3:6] = JB
    nb = model.n_base
    for j in range(upto):
        z = fr.axes[j]
        Jv[:, nb + j] = np.cross(z, point - fr.origins[j])
        Jw[:, nb + j] = z
    return Jv, Jw


def agent_jacobian(model: AgentModel, q) -> np.ndarray:
    """6 x n agent Jacobian ``J_i`` with ``v_i = J_i(q_i) q_i_dot``."""
    fr = chain_frames(model, q)
    Jv, Jw = point_jacobians(model, q, fr.p_end, model.n_alpha, fr)
    return np.vstack([Jv, Jw])


def task_jacobian(model: AgentModel, q) -> np.ndarray:
    """Agent Jacobian restricted to the model's task coordinates."""
    return agent_jacobian(model, q)[list(model.task_rows)]


def manipulability(model: AgentModel, q, eps: float = 1e-3) -> tuple[float, bool]:
    """``det(J^T J)`` and the membership predicate ``|det| >= eps``.

    For agents with more joints than task coordinates ``det(J J^T)`` is used,
    since ``J^T J`` is then rank deficient everywhere.
    """
    J = task_jacobian(model, q)
    d = float(np.linalg.det(J.T @ J)) if J.shape[1] <= J.shape[0] else float(np.linalg.det(J @ J.T))
    return d, abs(d) >= eps


def object_agent_jacobian(p_o_rel_e) -> np.ndarray:
    """``J_Oi = [[I, S(p_O/E)], [0, I]]`` where ``p_O/E = p_O - p_E``."""
    J = np.eye(6)
    J[:3, 3:] = skew(p_o_rel_e)
    return J


def object_agent_jacobian_inv(p_o_rel_e) -> np.ndarray:
    J = np.eye(6)
    J[:3, 3:] = -skew(p_o_rel_e)
    return J


def grasp_offset_world(model: AgentModel, q) -> np.ndarray:
    """``p_O/E_i = p_O - p_E = -R_E p^E_{E/O}`` evaluated from the agent's joints."""
    fr = chain_frames(model, q)
    R_E = euler_to_rotation(end_effector_euler(model, q, fr)) if model.is_planar else fr.R_end
    return -R_E @ np.asarray(model.grasp_offset_position, float)


def grasp_matrix(models: Sequence[AgentModel], qs: Sequence, rows: Sequence[int] | None = None) -> np.ndarray:
    """Stacked object-to-agent Jacobians; optionally restricted to task rows."""
    blocks = []
    for m, q in zip(models, qs):
        J = object_agent_jacobian(grasp_offset_world(m, q))
        if rows is not None:
            J = J[np.ix_(rows, rows)]
        blocks.append(J)
    if not blocks:
        raise ValueError("at least one agent is required")
    return np.vstack(blocks)


def object_pose_from_agent(model: AgentModel, q) -> Pose:
    """Object pose implied by one rigidly grasping agent (inverse of the grasp map)."""
    fr = chain_frames(model, q)
    eta_e = end_effector_euler(model, q, fr)
    R_E = euler_to_rotation(eta_e) if model.is_planar else fr.R_end
    p_o = fr.p_end - R_E @ np.asarray(model.grasp_offset_position, float)
    eta_o = eta_e - _as_eta(model.grasp_offset_orientation)
    return Pose(p_o, EulerAngles(*eta_o))


def object_state_from_agent(model: AgentModel, q, qdot) -> tuple[Pose, np.ndarray]:
    """Object pose and 6-D velocity recovered from one agent's joint state."""
    pose = object_pose_from_agent(model, q)
    if abs(np.cos(pose.orientation.theta)) < 1e-9:
        raise RepresentationSingularityError("object pitch at +-pi/2")
    v_e = agent_jacobian(model, q) @ np.asarray(qdot, float)
    p_oe = pose.position - forward_kinematics(model, q).position
    return pose, object_agent_jacobian_inv(p_oe) @ v_e


def grasp_residual(model: AgentModel, q, x_o) -> np.ndarray:
    """Mismatch between the agent's end-effector pose and the rigid-grasp map."""
    x_o = x_o.as_array() if isinstance(x_o, Pose) else np.asarray(x_o, float)
    implied = object_pose_from_agent(model, q).as_array()
    return implied - x_o


def inverse_kinematics(model: AgentModel, x_o, q_init, tol: float = 1e-12, max_iter: int = 50) -> np.ndarray:
    """Joint vector placing the end effector on the grasp of object pose ``x_o``.

    Gauss-Newton on the task coordinates starting from ``q_init``; base
    coordinates absorb the redundancy through the least-squares step.
    """
    rows = list(model.task_rows)
    q = np.array(q_init, dtype=float)
    for _ in range(max_iter):
        r = grasp_residual(model, q, x_o)[rows]
        if np.linalg.norm(r) < tol:
            break
        J = _grasp_residual_jacobian(model, q)[rows]
        q = q - np.linalg.lstsq(J, r, rcond=None)[0]
    return q


def _grasp_residual_jacobian(model: AgentModel, q, h: float = 1e-7) -> np.ndarray:
    q = np.asarray(q, float)
    cols = []
    for k in range(q.size):
        dq = np.zeros_like(q)
        dq[k] = h
        cols.append((object_pose_from_agent(model, q + dq).as_array()
                     - object_pose_from_agent(model, q - dq).as_array()) / (2 * h))
    return np.column_stack(cols)


def jacobian_fd_error(model: AgentModel, q, step: float = 1e-6) -> float:
    """Relative error between :func:`agent_jacobian` and central differences
    of :func:`forward_kinematics` (Euler rates mapped to angular velocity)."""
    q = _check_q(model, q)
    eta = np.asarray(forward_kinematics(model, q).orientation)
    Jfd = np.empty((6, model.n))
    for j in range(model.n):
        d = np.zeros(model.n)
        d[j] = step
        a, b = forward_kinematics(model, q + d), forward_kinematics(model, q - d)
        deta = (np.asarray(a.orientation) - np.asarray(b.orientation) + np.pi) % (2 * np.pi) - np.pi
        Jfd[:3, j] = (a.position - b.position) / (2 * step)
        Jfd[3:, j] = euler_rate_jacobian(eta) @ deta / (2 * step)
    J = agent_jacobian(model, q)
    return float(np.linalg.norm(J - Jfd) / max(np.linalg.norm(Jfd), 1e-12))
