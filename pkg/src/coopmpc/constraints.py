"""Ellipsoidal regions, collision residuals and the state/error/input sets.

Residual convention: every entry is ``>= 0`` exactly when the corresponding
requirement holds.  The ordering of :func:`state_residuals` is a stable
contract (version :data:`RESIDUAL_LAYOUT_VERSION`)::

    agent_obstacle[i,z]   for each agent i, each obstacle z
    object_obstacle[z]    for each obstacle z
    agent_agent[i,j]      for each pair i < j
    object_pitch          theta_bar - |theta_O|
    base_pitch[i]         theta_bar - |theta_Bi|
    manipulability[i]     |det(J^T J)| - eps
    joint_lo[i,j], joint_hi[i,j]   for agents with joint limits
    qdot_lo[i,k], qdot_hi[i,k]     qdot_bar +- qdot_ik
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .coupled_dynamics import CoupledSystem, joint_rates
from .se3_kinematics import (
    AgentModel,
    KinematicSingularityError,
    base_pose,
    euler_to_rotation,
    manipulability,
    task_jacobian,
)

RESIDUAL_LAYOUT_VERSION = 1
SEPARATION_METHODS = ("support", "sphere")


@dataclass(frozen=True)
class EllipsoidRegion:
    """``{p : (p - c)^T P (p - c) <= 1}`` with ``P = R diag(beta^-2) R^T``."""

    center: np.ndarray
    semi_axes: np.ndarray
    orientation: np.ndarray = field(default_factory=lambda: np.eye(3))

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, float).reshape(3))
        object.__setattr__(self, "semi_axes", np.asarray(self.semi_axes, float).reshape(3))
        object.__setattr__(self, "orientation", np.asarray(self.orientation, float).reshape(3, 3))
        if np.any(self.semi_axes <= 0):
            raise ValueError("semi-axes must be positive")

    @property
    def shape_matrix(self) -> np.ndarray:
        R = self.orientation
        return R @ np.diag(self.semi_axes ** -2) @ R.T

    @property
    def circumradius(self) -> float:
        return float(self.semi_axes.max())

    def contains(self, p, tol: float = 0.0) -> bool | np.ndarray:
        d = np.asarray(p, float) - self.center
        val = np.einsum("...i,ij,...j->...", d, self.shape_matrix, d)
        return val <= 1.0 + tol

    def support(self, n) -> float:
        """Support function ``max_{p in region} n.(p - c)`` for unit ``n``."""
        R = self.orientation
        S = R @ np.diag(self.semi_axes ** 2) @ R.T
        n = np.asarray(n, float)
        return float(np.sqrt(n @ S @ n))

    def sample_boundary(self, k: int, rng: np.random.Generator) -> np.ndarray:
        d = rng.standard_normal((k, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        return self.center + (d * self.semi_axes) @ self.orientation.T


def sphere(center, radius: float) -> EllipsoidRegion:
    return EllipsoidRegion(center, (radius, radius, radius))


def agent_hull(model: AgentModel, q) -> EllipsoidRegion:
    """Base-attached ellipsoid covering the base and every arm configuration."""
    p, _, R = base_pose(model, q)
    c = p + R @ np.array([0.0, 0.0, model.base_height])
    return EllipsoidRegion(c, model.hull_axes(), R)


def object_hull(x_o, semi_axes) -> EllipsoidRegion:
    x_o = np.asarray(x_o, float)
    return EllipsoidRegion(x_o[:3], semi_axes, euler_to_rotation(x_o[3:6]))


def separation(a: EllipsoidRegion, b: EllipsoidRegion, method: str = "support") -> float:
    """Conservative signed clearance between two ellipsoids.

    ``"sphere"``: ``|c_a - c_b| - max(beta_a) - max(beta_b)``.
    ``"support"``: ``|c_a - c_b| - h_a(n) - h_b(-n)`` along the centre line
    ``n``; the slab test of a separating axis, hence never positive for
    intersecting regions, and never smaller than the sphere value.
    """
    d = b.center - a.center
    dist = float(np.linalg.norm(d))
    if method == "sphere":
        return dist - a.circumradius - b.circumradius
    if method != "support":
        raise ValueError(f"unknown separation method {method!r}")
    if dist == 0.0:
        return -a.semi_axes.min() - b.semi_axes.min()
    n = d / dist
    return dist - a.support(n) - b.support(n)


@dataclass(frozen=True)
class Workspace:
    obstacles: tuple[EllipsoidRegion, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "obstacles", tuple(self.obstacles))


@dataclass(frozen=True)
class ConstraintConfig:
    theta_bar: float = np.pi / 3
    eps_sing: float = 1e-3
    separation_method: str = "support"


@dataclass
class ConstraintResiduals:
    names: list[str]
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, float)
        if len(self.names) != self.values.size:
            raise ValueError("one name per residual is required")

    def min(self) -> float:
        return float(self.values.min()) if self.values.size else np.inf

    def satisfied(self, tol: float = 0.0) -> bool:
        return bool(np.all(self.values >= -tol))

    def violations(self, tol: float = 0.0) -> dict[str, float]:
        return {n: float(v) for n, v in zip(self.names, self.values) if v < -tol}

    def as_dict(self) -> dict[str, float]:
        return {n: float(v) for n, v in zip(self.names, self.values)}

    def group(self, prefix: str) -> np.ndarray:
        return np.array([v for n, v in zip(self.names, self.values) if n.startswith(prefix + "[")
                         or n == prefix])


def residual_names(system: CoupledSystem, workspace: Workspace) -> list[str]:
    names = []
    nz = len(workspace.obstacles)
    for i in range(system.N):
        names += [f"agent_obstacle[{i},{z}]" for z in range(nz)]
    names += [f"object_obstacle[{z}]" for z in range(nz)]
    names += [f"agent_agent[{i},{j}]" for i in range(system.N) for j in range(i + 1, system.N)]
    names.append("object_pitch")
    names += [f"base_pitch[{i}]" for i in range(system.N)]
    names += [f"manipulability[{i}]" for i in range(system.N)]
    for i, a in enumerate(system.agents):
        if a.joint_limits is not None:
            for j in range(a.n_alpha):
                names += [f"joint_lo[{i},{j}]", f"joint_hi[{i},{j}]"]
    for i, a in enumerate(system.agents):
        for k in range(a.n):
            names += [f"qdot_lo[{i},{k}]", f"qdot_hi[{i},{k}]"]
    return names


def state_residuals(system: CoupledSystem, x, workspace: Workspace,
                    config: ConstraintConfig | None = None) -> ConstraintResiduals:
    """Residuals of every state constraint at the coupled state ``x``."""
    cfg = config or ConstraintConfig()
    method = getattr(cfg, "separation_method", "support")
    x = np.asarray(x, float)
    qs = system.joints(x)
    x_o = system.pose6(x)
    hulls = [agent_hull(a, q) for a, q in zip(system.agents, qs)]
    ohull = object_hull(x_o, system.obj.semi_axes)
    vals = []
    for h in hulls:
        vals += [separation(h, obs, method) for obs in workspace.obstacles]
    vals += [separation(ohull, obs, method) for obs in workspace.obstacles]
    vals += [separation(hulls[i], hulls[j], method)
             for i in range(system.N) for j in range(i + 1, system.N)]
    vals.append(cfg.theta_bar - abs(x_o[4]))
    vals += [cfg.theta_bar - abs(base_pose(a, q)[1][1]) for a, q in zip(system.agents, qs)]
    vals += [abs(manipulability(a, q)[0]) - cfg.eps_sing for a, q in zip(system.agents, qs)]
    for a, q in zip(system.agents, qs):
        if a.joint_limits is not None:
            for j, (lo, hi) in enumerate(a.joint_limits):
                alpha = q[a.n_base + j]
                vals += [alpha - lo, hi - alpha]
    try:
        qd = joint_rates(system, x)
    except KinematicSingularityError:
        qd = np.full(system.n, np.inf)
    off = 0
    for a in system.agents:
        for k in range(a.n):
            vals += [a.qdot_bar + qd[off + k], a.qdot_bar - qd[off + k]]
        off += a.n
    return ConstraintResiduals(residual_names(system, workspace), np.array(vals, float))


class PlanarResiduals:
    """Batched, complex-step-safe evaluation of :func:`state_residuals` for
    planar systems.  ``__call__`` maps ``X (B, nx)`` to ``(B, n_res)``."""

    def __init__(self, system: CoupledSystem, workspace: Workspace, config: ConstraintConfig | None = None):
        if not system.planar:
            raise ValueError("planar systems only")
        cfg = config or ConstraintConfig()
        self.system = system
        self.workspace = workspace
        self.theta_bar = cfg.theta_bar
        self.eps = cfg.eps_sing
        self.method = getattr(cfg, "separation_method", "support")
        if self.method not in SEPARATION_METHODS:
            raise ValueError(f"unknown separation method {self.method!r}")
        self.names = residual_names(system, workspace)
        self.n_res = len(self.names)
        self.agent_S = [np.diag(np.asarray(a.hull_axes()) ** 2) for a in system.agents]
        self.agent_r = [max(a.hull_axes()) for a in system.agents]
        self.obj_ax2 = np.asarray(system.obj.semi_axes, float) ** 2
        self.obj_r = max(system.obj.semi_axes)
        self.obs = [(o.center, o.orientation @ np.diag(o.semi_axes ** 2) @ o.orientation.T, o.circumradius)
                    for o in workspace.obstacles]

    @staticmethod
    def _norm(d):
        return np.sqrt(np.sum(d * d, axis=-1))

    def _sep(self, ca, Sa, ra, cb, Sb, rb):
        d = cb - ca
        dist = self._norm(d)
        if self.method == "sphere":
            return dist - ra - rb
        n = d / dist[:, None]
        ha = np.sqrt(np.einsum("bi,bij,bj->b", n, Sa, n) if Sa.ndim == 3 else np.einsum("bi,ij,bj->b", n, Sa, n))
        hb = np.sqrt(np.einsum("bi,bij,bj->b", n, Sb, n) if Sb.ndim == 3 else np.einsum("bi,ij,bj->b", n, Sb, n))
        return dist - ha - hb

    def __call__(self, X) -> np.ndarray:
        X = np.atleast_2d(X)
        sysm = self.system
        B = X.shape[0]
        dt = X.dtype
        cols = []
        phi = X[:, 3]
        c, s = np.cos(phi), np.sin(phi)
        # object hull matrix R_x(phi) diag(beta^2) R_x(phi)^T
        So = np.zeros((B, 3, 3), dt)
        b1, b2, b3 = self.obj_ax2
        So[:, 0, 0] = b1
        So[:, 1, 1] = b2 * c * c + b3 * s * s
        So[:, 2, 2] = b2 * s * s + b3 * c * c
        So[:, 1, 2] = So[:, 2, 1] = (b2 - b3) * c * s
        po = X[:, :3]
        centers = []
        for a, sl in zip(sysm.agents, sysm.q_slices):
            q = X[:, sl]
            ca = np.zeros((B, 3), dt)
            ca[:, 0] = q[:, 0]
            ca[:, 1] = q[:, 1]
            ca[:, 2] = a.base_height
            centers.append(ca)
        for i in range(sysm.N):
            for (oc, oS, orad) in self.obs:
                cols.append(self._sep(centers[i], self.agent_S[i], self.agent_r[i],
                                      np.broadcast_to(oc, (B, 3)), oS, orad))
        for (oc, oS, orad) in self.obs:
            cols.append(self._sep(po, So, self.obj_r, np.broadcast_to(oc, (B, 3)), oS, orad))
        for i in range(sysm.N):
            for j in range(i + 1, sysm.N):
                cols.append(self._sep(centers[i], self.agent_S[i], self.agent_r[i],
                                      centers[j], self.agent_S[j], self.agent_r[j]))
        const = np.full(B, self.theta_bar, dtype=dt)
        cols.append(const)
        cols += [const] * sysm.N
        v = X[:, 4:8]
        w = v[:, 3]
        qd_cols = []
        for a, sl in zip(sysm.agents, sysm.q_slices):
            l1, l2 = a.link_lengths
            o1, o2 = a.joint_offsets
            q = X[:, sl]
            b1 = q[:, 2] + o1
            b2 = b1 + q[:, 3] + o2
            s1, c1, s2, c2 = np.sin(b1), np.cos(b1), np.sin(b2), np.cos(b2)
            cols.append((l1 * s1) ** 2 - self.eps)
            px, py, pz = a.grasp_offset_position
            ay = -(c2 * py - s2 * pz)
            az = -(s2 * py + c2 * pz)
            # qdot = J^-1 G v in closed form (J is block triangular)
            vy = v[:, 1] + az * w
            vz = v[:, 2] - ay * w
            det = (-l1 * s1 - l2 * s2) + l2 * s2
            a1d = (vz + l2 * s2 * w) / det
            a2d = w - a1d
            ybd = vy + (l1 * c1 + l2 * c2) * a1d + l2 * c2 * a2d
            qd_cols.append((v[:, 0], ybd, a1d, a2d))
        for a, sl in zip(sysm.agents, sysm.q_slices):
            if a.joint_limits is not None:
                q = X[:, sl]
                for j, (lo, hi) in enumerate(a.joint_limits):
                    cols += [q[:, a.n_base + j] - lo, hi - q[:, a.n_base + j]]
        for a, qd in zip(sysm.agents, qd_cols):
            for comp in qd:
                cols += [a.qdot_bar + comp, a.qdot_bar - comp]
        return np.stack([np.broadcast_to(c_, (B,)) for c_ in cols], axis=1)

    def jacobian(self, X) -> tuple[np.ndarray, np.ndarray]:
        """Values ``(B, m)`` and exact Jacobians ``(B, m, nx)`` by complex step."""
        X = np.atleast_2d(np.asarray(X, float))
        B, nx = X.shape
        h = 1e-30
        Xc = np.repeat(X[:, None, :], nx, axis=1).astype(complex)
        Xc[:, np.arange(nx), np.arange(nx)] += 1j * h
        R = self(Xc.reshape(B * nx, nx)).reshape(B, nx, -1)
        return self(X), np.swapaxes(R.imag / h, 1, 2)


def in_error_set(system: CoupledSystem, e, x_des, workspace: Workspace,
                 config: ConstraintConfig | None = None, tol: float = 0.0) -> bool:
    """``e + x_des`` lies in the state set."""
    x = np.asarray(e, float) + np.asarray(x_des, float)
    return state_residuals(system, x, workspace, config).satisfied(tol)


@dataclass(frozen=True)
class InputBounds:
    radius: np.ndarray  # per agent
    lower: np.ndarray  # per channel
    upper: np.ndarray


def input_bound_radius(model: AgentModel, q, eps: float = 1e-12) -> float:
    """``tau_bar / sigma_min(J^T)`` on the agent's task Jacobian."""
    sig = np.linalg.svd(task_jacobian(model, q).T, compute_uv=False)
    smin = float(sig.min())
    if smin <= eps:
        raise KinematicSingularityError(f"{model.name}: sigma_min(J^T) = {smin:.3g}")
    return model.tau_bar / smin


def input_bounds(system: CoupledSystem, x, box: float | None = None) -> InputBounds:
    radii = np.array([input_bound_radius(a, q) for a, q in zip(system.agents, system.joints(x))])
    if box is None:
        lo = -np.repeat(radii, system.d)
    else:
        lo = -np.full(system.nu, float(box))
    return InputBounds(radii, lo, -lo)


def torque_bound_margins(system: CoupledSystem, x, u) -> np.ndarray:
    """Per-agent ``tau_bar - sigma_max(J^T) |u_i|``; nonnegative guarantees ``|tau_i| <= tau_bar``."""
    u = np.asarray(u, float)
    out = []
    for i, (a, q) in enumerate(zip(system.agents, system.joints(x))):
        smax = np.linalg.svd(task_jacobian(a, q).T, compute_uv=False).max()
        out.append(a.tau_bar - smax * np.linalg.norm(u[i * system.d: (i + 1) * system.d]))
    return np.array(out)


def formation_diameter(system: CoupledSystem, x) -> float:
    """Largest extent of the agents' and object's hulls at ``x``."""
    qs = system.joints(x)
    regions = [agent_hull(a, q) for a, q in zip(system.agents, qs)]
    regions.append(object_hull(system.pose6(x), system.obj.semi_axes))
    pts = []
    for r in regions:
        for k in range(3):
            ax = r.orientation[:, k] * r.semi_axes[k]
            pts += [r.center + ax, r.center - ax]
    pts = np.array(pts)
    return float(np.max(np.linalg.norm(pts[:, None] - pts[None], axis=-1)))


def audit_workspace(system: CoupledSystem, x, workspace: Workspace, x_des=None,
                    config: ConstraintConfig | None = None) -> list[str]:
    """Heuristic warnings: obstacle pairs whose gap is narrower than the
    formation, and start/goal states outside the state set."""
    warnings = []
    diam = formation_diameter(system, x)
    obs = workspace.obstacles
    for i in range(len(obs)):
        for j in range(i + 1, len(obs)):
            gap = separation(obs[i], obs[j], "sphere")
            if gap < diam:
                warnings.append(f"obstacles {i} and {j}: gap {gap:.3f} m is below the formation "
                                f"diameter {diam:.3f} m")
    for label, state in (("initial", x), ("desired", x_des)):
        if state is None:
            continue
        res = state_residuals(system, state, workspace, config)
        for name, val in res.violations().items():
            warnings.append(f"{label} state violates {name} ({val:.4g})")
    return warnings
