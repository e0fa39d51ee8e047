"""Finite-horizon optimal control problem of the receding-horizon scheme.

Transcription: multiple shooting with piecewise-constant inputs and
``config.substeps`` RK4 steps per sampling period.  Decision vector::

    z = [u_0, ..., u_{Np-1}, e_0, ..., e_Np]

Equality constraints are ``e_0 = e_now`` and the shooting defects; the
state residuals of :mod:`coopmpc.constraints` are imposed at nodes
``1..Np`` and the optional terminal ball ``|e_Np| <= epsilon0`` last.
The NLP is solved by SLSQP (scipy), an SQP method with a damped BFGS
Hessian and an l1 exact-penalty line search.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
from scipy import linalg, optimize

from .constraints import (
    ConstraintConfig,
    PlanarResiduals,
    Workspace,
    input_bound_radius,
    residual_names,
    state_residuals,
)
from .coupled_dynamics import (
    CoupledSystem,
    compensation_wrench,
    project_grasp,
    rk4_step,
    state_derivative,
)
from .kernels import PlanarKernel

log = logging.getLogger("coopmpc.ocp")

STATUSES = ("optimal", "max-iter", "infeasible")


def _as_weight(w, n: int | None, name: str, strict: bool) -> np.ndarray:
    """Diagonal vector or full symmetric matrix -> square matrix."""
    a = np.asarray(w, float)
    if a.ndim == 0:
        if n is None:
            raise ValueError(f"{name}: scalar weight needs a dimension")
        a = np.full(n, float(a))
    if a.ndim == 1:
        bad = a <= 0 if strict else a < 0
        if np.any(bad):
            raise ValueError(f"{name} entries must be {'> 0' if strict else '>= 0'}")
        return np.diag(a)
    if a.shape[0] != a.shape[1] or not np.allclose(a, a.T):
        raise ValueError(f"{name} must be square and symmetric")
    ev = np.linalg.eigvalsh(a)
    if (strict and ev.min() <= 0) or ev.min() < -1e-12:
        raise ValueError(f"{name} must be positive {'definite' if strict else 'semidefinite'}")
    return a


@dataclass
class OcpConfig:
    """Weights, horizon and solver settings.

    ``Q`` and ``R`` are diagonal vectors; ``P`` is a diagonal vector or a
    full symmetric positive definite matrix.  ``terminal_mode`` is ``"hard"``
    (impose ``|e(T_p)| <= epsilon0``) or ``"none"`` (terminal cost only).
    """

    h: float
    T_p: float
    Q: np.ndarray
    P: np.ndarray
    R: np.ndarray
    epsilon0: float = 0.1
    eps_sing: float = 1e-3
    theta_bar: float = np.pi / 3
    separation_method: str = "support"
    input_mode: str = "box"
    u_box: float = 10.0
    terminal_mode: str = "hard"
    kkt_tol: float = 1e-6
    max_iter: int = 100
    backoff: float = 1e-3
    epsilon0_min: float = 1e-4
    substeps: int = 1

    def __post_init__(self):
        if not (0 < self.h < self.T_p):
            raise ValueError(f"0 < h < T_p violated (h={self.h}, T_p={self.T_p})")
        n = self.T_p / self.h
        if abs(n - round(n)) > 1e-9:
            raise ValueError("T_p must be an integer multiple of h")
        self.Q = np.asarray(self.Q, float)
        self.R = np.asarray(self.R, float)
        self.P = np.asarray(self.P, float)
        _as_weight(self.Q, None if self.Q.ndim else 1, "Q", strict=False)
        _as_weight(self.R, None if self.R.ndim else 1, "R", strict=True)
        _as_weight(self.P, None if self.P.ndim else 1, "P", strict=True)
        if self.epsilon0 < 0:
            raise ValueError("epsilon0 must be nonnegative")
        if self.input_mode not in ("box", "ball"):
            raise ValueError("input_mode must be 'box' or 'ball'")
        if self.terminal_mode not in ("hard", "none"):
            raise ValueError("terminal_mode must be 'hard' or 'none'")
        if self.u_box <= 0 or self.max_iter < 1 or self.kkt_tol <= 0:
            raise ValueError("u_box, max_iter and kkt_tol must be positive")
        if int(self.substeps) != self.substeps or self.substeps < 1:
            raise ValueError("substeps must be a positive integer")
        self.substeps = int(self.substeps)

    @property
    def N_p(self) -> int:
        return int(round(self.T_p / self.h))

    @property
    def Qm(self) -> np.ndarray:
        return _as_weight(self.Q, None, "Q", strict=False)

    @property
    def Rm(self) -> np.ndarray:
        return _as_weight(self.R, None, "R", strict=True)

    @property
    def Pm(self) -> np.ndarray:
        return _as_weight(self.P, None, "P", strict=True)

    @property
    def constraint_config(self) -> ConstraintConfig:
        return ConstraintConfig(self.theta_bar, self.eps_sing, self.separation_method)


# ---------------------------------------------------------------------------
# costs and lemma quantities

def running_cost(e, u, config: OcpConfig) -> float:
    e = np.asarray(e, float)
    u = np.asarray(u, float)
    return float(e @ config.Qm @ e + u @ config.Rm @ u)


def terminal_cost(e, config: OcpConfig) -> float:
    e = np.asarray(e, float)
    return float(e @ config.Pm @ e)


def class_k_bounds(config: OcpConfig) -> tuple[float, float]:
    """``(m, M)`` with ``m |z|^2 <= F(e, u) <= M |z|^2`` for ``z = [e; u]``."""
    q = np.linalg.eigvalsh(config.Qm)
    r = np.linalg.eigvalsh(config.Rm)
    return float(min(q.min(), r.min())), float(max(q.max(), r.max()))


def lipschitz_constant(config: OcpConfig) -> float:
    """``L_V = 2 epsilon0 sigma_max(P)`` for ``V`` on the epsilon0-ball."""
    return 2.0 * config.epsilon0 * float(np.linalg.svd(config.Pm, compute_uv=False).max())


@dataclass
class LemmaReport:
    name: str
    samples: int
    max_violation: float
    passed: bool
    seconds: float


def verify_class_k_bounds(config: OcpConfig, samples: int = 10_000, seed: int = 0,
                          tol: float = 1e-9, scale: float = 10.0) -> LemmaReport:
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    m, M = class_k_bounds(config)
    nx, nu = config.Qm.shape[0], config.Rm.shape[0]
    E = rng.uniform(-scale, scale, (samples, nx)) * rng.uniform(0, 1, (samples, 1))
    U = rng.uniform(-scale, scale, (samples, nu)) * rng.uniform(0, 1, (samples, 1))
    F = np.einsum("bi,ij,bj->b", E, config.Qm, E) + np.einsum("bi,ij,bj->b", U, config.Rm, U)
    z2 = np.sum(E * E, 1) + np.sum(U * U, 1)
    # relative violation, scaled by the size of the sample
    viol = np.maximum(m * z2 - F, F - M * z2) / np.maximum(1.0, z2 * M)
    worst = float(viol.max())
    return LemmaReport("class-K sandwich", samples, worst, worst <= tol, time.perf_counter() - t0)


def verify_lipschitz(config: OcpConfig, samples: int = 10_000, seed: int = 0,
                     tol: float = 1e-9) -> LemmaReport:
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    L = lipschitz_constant(config)
    P = config.Pm
    n = P.shape[0]

    def ball(k):
        d = rng.standard_normal((k, n))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        return d * config.epsilon0 * rng.uniform(0, 1, (k, 1)) ** (1.0 / n)

    E1, E2 = ball(samples), ball(samples)
    V1 = np.einsum("bi,ij,bj->b", E1, P, E1)
    V2 = np.einsum("bi,ij,bj->b", E2, P, E2)
    viol = np.abs(V1 - V2) - L * np.linalg.norm(E1 - E2, axis=1)
    worst = float(viol.max()) if samples else 0.0
    return LemmaReport("Lipschitz bound", samples, worst, worst <= tol, time.perf_counter() - t0)


# ---------------------------------------------------------------------------
# prediction models

class SystemModel:
    """Prediction model of a coupled system in absolute coordinates.

    Planar systems use the hot kernels and complex-step derivatives; other
    systems fall back to the reference dynamics with central differences.
    """

    def __init__(self, system: CoupledSystem, workspace: Workspace, config: OcpConfig):
        self.system = system
        self.workspace = workspace
        self.config = config
        self.nx = system.nx
        self.nu = system.nu
        self.names = residual_names(system, workspace)
        self.n_res = len(self.names)
        self.fast = False
        if system.planar and all(a.n_alpha == 2 for a in system.agents):
            self.kernel = PlanarKernel(system)
            self.res = PlanarResiduals(system, workspace, config.constraint_config)
            self.fast = True

    def rhs(self, x, u):
        if self.fast:
            return self.kernel.rhs(x, u)
        return state_derivative(self.system, x, u)

    def step(self, x, u, dt, nsub=1):
        if self.fast:
            return self.kernel.rk4(x, u, dt, nsub)
        y = np.asarray(x, float)
        for _ in range(nsub):
            y = rk4_step(lambda s: state_derivative(self.system, s, u), y, dt / nsub)
        return y

    def step_sens_many(self, X, U, dt, nsub=1):
        if self.fast:
            return self.kernel.rk4_sens_many(X, U, dt, nsub)
        K = X.shape[0]
        h = 1e-6
        Xn = np.array([self.step(X[k], U[k], dt, nsub) for k in range(K)])
        A = np.empty((K, self.nx, self.nx))
        B = np.empty((K, self.nx, self.nu))
        for k in range(K):
            for j in range(self.nx):
                d = np.zeros(self.nx)
                d[j] = h
                A[k, :, j] = (self.step(X[k] + d, U[k], dt, nsub) - self.step(X[k] - d, U[k], dt, nsub)) / (2 * h)
            for j in range(self.nu):
                d = np.zeros(self.nu)
                d[j] = h
                B[k, :, j] = (self.step(X[k], U[k] + d, dt, nsub) - self.step(X[k], U[k] - d, dt, nsub)) / (2 * h)
        return Xn, A, B

    def project(self, x):
        if self.fast:
            return self.kernel.project(x)[0]
        return project_grasp(self.system, x)

    def residuals(self, X) -> np.ndarray:
        X = np.atleast_2d(X)
        if self.fast:
            return self.res(X)
        cfg = self.config.constraint_config
        return np.array([state_residuals(self.system, x, self.workspace, cfg).values for x in X])

    def residual_jac(self, X):
        X = np.atleast_2d(np.asarray(X, float))
        if self.fast:
            return self.res.jacobian(X)
        h = 1e-6
        V = self.residuals(X)
        D = np.empty((X.shape[0], self.n_res, self.nx))
        for j in range(self.nx):
            d = np.zeros(self.nx)
            d[j] = h
            D[:, :, j] = (self.residuals(X + d) - self.residuals(X - d)) / (2 * h)
        return V, D

    def input_radius(self, X) -> np.ndarray:
        """Per-node, per-agent radii ``tau_bar / sigma_min(J^T)``."""
        X = np.atleast_2d(X)
        return np.array([[input_bound_radius(a, q) for a, q in zip(self.system.agents, self.system.joints(x))]
                         for x in X])

    def equilibrium_input(self, x_des) -> np.ndarray:
        if self.system.gravity_compensation:
            return np.zeros(self.nu)
        return compensation_wrench(self.system, x_des)


class LinearModel:
    """``x+ = A x + B u`` with no state constraints (test and analysis aid)."""

    def __init__(self, A, B):
        self.A = np.asarray(A, float)
        self.B = np.asarray(B, float)
        self.nx, self.nu = self.B.shape
        self.names: list[str] = []
        self.n_res = 0
        self.config = None

    def step(self, x, u, dt=None, nsub=1):
        return self.A @ x + self.B @ u

    def step_sens_many(self, X, U, dt, nsub=1):
        K = X.shape[0]
        return (X @ self.A.T + U @ self.B.T, np.broadcast_to(self.A, (K, self.nx, self.nx)).copy(),
                np.broadcast_to(self.B, (K, self.nx, self.nu)).copy())

    def residuals(self, X):
        return np.zeros((np.atleast_2d(X).shape[0], 0))

    def residual_jac(self, X):
        K = np.atleast_2d(X).shape[0]
        return np.zeros((K, 0)), np.zeros((K, 0, self.nx))

    def project(self, x):
        return np.asarray(x, float)

    def equilibrium_input(self, x_des):
        return np.zeros(self.nu)


# ---------------------------------------------------------------------------
# transcription

@dataclass
class OcpProblem:
    model: object
    config: OcpConfig
    x_des: np.ndarray
    e_now: np.ndarray

    def __post_init__(self):
        self.x_des = np.asarray(self.x_des, float)
        self.e_now = np.asarray(self.e_now, float)
        m = self.model
        if self.x_des.shape != (m.nx,) or self.e_now.shape != (m.nx,):
            raise ValueError(f"state vectors must have length {m.nx}")
        if not np.all(np.isfinite(self.e_now)):
            raise ValueError("e_now must be finite")
        cfg = self.config
        if cfg.Qm.shape[0] != m.nx or cfg.Pm.shape[0] != m.nx or cfg.Rm.shape[0] != m.nu:
            raise ValueError(f"weights must match nx={m.nx}, nu={m.nu}")
        self.Np = cfg.N_p
        self.nx, self.nu = m.nx, m.nu
        self.nU = self.Np * self.nu
        self.nz = self.nU + (self.Np + 1) * self.nx
        self.n_eq = (self.Np + 1) * self.nx
        self.n_res = m.n_res
        self.terminal = cfg.terminal_mode == "hard"
        self.ball = cfg.input_mode == "ball"
        self.n_agents = self.nu // getattr(getattr(m, "system", None), "d", self.nu) if self.ball else 0
        self.n_ineq = self.Np * self.n_res + (1 if self.terminal else 0) + self.Np * self.n_agents
        self._key = None
        self._cache: dict = {}

    # layout helpers
    def unpack(self, z):
        z = np.asarray(z, float)
        U = z[: self.nU].reshape(self.Np, self.nu)
        E = z[self.nU:].reshape(self.Np + 1, self.nx)
        return U, E

    def pack(self, U, E) -> np.ndarray:
        return np.concatenate([np.asarray(U, float).ravel(), np.asarray(E, float).ravel()])

    def bounds(self):
        if self.config.input_mode == "box":
            b = self.config.u_box
            return [(-b, b)] * self.nU + [(None, None)] * (self.nz - self.nU)
        return [(None, None)] * self.nz

    def rollout(self, U, e0=None) -> np.ndarray:
        e = self.e_now if e0 is None else np.asarray(e0, float)
        E = [e]
        for k in range(self.Np):
            E.append(self.model.step(E[-1] + self.x_des, U[k], self.config.h, self.config.substeps) - self.x_des)
        return np.array(E)

    def _eval(self, z):
        key = z.tobytes()
        if key == self._key:
            return self._cache
        U, E = self.unpack(z)
        X = E[:-1] + self.x_des
        Xn, A, B = self.model.step_sens_many(np.ascontiguousarray(X), np.ascontiguousarray(U), self.config.h,
                                                 self.config.substeps)
        Rv, RJ = self.model.residual_jac(E[1:] + self.x_des)
        self._cache = {"Xn": Xn, "A": A, "B": B, "Rv": Rv, "RJ": RJ}
        if self.ball:
            rad = self.model.input_radius(X)
            hh = 1e-6
            drad = np.empty((self.Np, rad.shape[1], self.nx))
            for j in range(self.nx):
                d = np.zeros(self.nx)
                d[j] = hh
                drad[:, :, j] = (self.model.input_radius(X + d) - self.model.input_radius(X - d)) / (2 * hh)
            self._cache.update(rad=rad, drad=drad)
        self._key = key
        return self._cache

    # objective
    def objective(self, z) -> float:
        U, E = self.unpack(z)
        cfg = self.config
        Q, R, P = cfg.Qm, cfg.Rm, cfg.Pm
        run = np.einsum("ki,ij,kj->", E[:-1], Q, E[:-1]) + np.einsum("ki,ij,kj->", U, R, U)
        return float(cfg.h * run + E[-1] @ P @ E[-1])

    def gradient(self, z) -> np.ndarray:
        U, E = self.unpack(z)
        cfg = self.config
        Q, R, P = cfg.Qm, cfg.Rm, cfg.Pm
        gU = 2.0 * cfg.h * U @ R
        gE = np.empty_like(E)
        gE[:-1] = 2.0 * cfg.h * E[:-1] @ Q
        gE[-1] = (P + P.T) @ E[-1]
        return self.pack(gU, gE)

    # constraints
    def eq(self, z) -> np.ndarray:
        U, E = self.unpack(z)
        c = self._eval(z)
        d = E[1:] - (c["Xn"] - self.x_des)
        return np.concatenate([E[0] - self.e_now, d.ravel()])

    def eq_jac(self, z) -> np.ndarray:
        c = self._eval(z)
        nx, nu, Np = self.nx, self.nu, self.Np
        Jm = np.zeros((self.n_eq, self.nz))
        Jm[:nx, self.nU: self.nU + nx] = np.eye(nx)
        for k in range(Np):
            r = slice((k + 1) * nx, (k + 2) * nx)
            Jm[r, k * nu: (k + 1) * nu] = -c["B"][k]
            Jm[r, self.nU + k * nx: self.nU + (k + 1) * nx] = -c["A"][k]
            Jm[r, self.nU + (k + 1) * nx: self.nU + (k + 2) * nx] = np.eye(nx)
        return Jm

    def ineq(self, z, backoff: float | None = None) -> np.ndarray:
        """Inequality values; residual rows are tightened by ``backoff``
        (default ``config.backoff``)."""
        U, E = self.unpack(z)
        c = self._eval(z)
        b = self.config.backoff if backoff is None else backoff
        parts = [(c["Rv"] - b).ravel()]
        if self.terminal:
            parts.append(np.array([self.config.epsilon0 ** 2 - E[-1] @ E[-1]]))
        if self.ball:
            d = self.nu // self.n_agents
            Ui = U.reshape(self.Np, self.n_agents, d)
            parts.append((c["rad"] ** 2 - np.sum(Ui * Ui, axis=2)).ravel())
        return np.concatenate(parts) if parts else np.zeros(0)

    def ineq_jac(self, z) -> np.ndarray:
        U, E = self.unpack(z)
        c = self._eval(z)
        nx, nu, Np, m = self.nx, self.nu, self.Np, self.n_res
        Jm = np.zeros((self.n_ineq, self.nz))
        for k in range(Np):
            col = self.nU + (k + 1) * nx
            Jm[k * m: (k + 1) * m, col: col + nx] = c["RJ"][k]
        row = Np * m
        if self.terminal:
            Jm[row, self.nU + Np * nx:] = -2.0 * E[-1]
            row += 1
        if self.ball:
            d = nu // self.n_agents
            for k in range(Np):
                for i in range(self.n_agents):
                    Jm[row, k * nu + i * d: k * nu + (i + 1) * d] = -2.0 * U[k, i * d: (i + 1) * d]
                    Jm[row, self.nU + k * nx: self.nU + (k + 1) * nx] = 2.0 * c["rad"][k, i] * c["drad"][k, i]
                    row += 1
        return Jm

    def initial_guess(self, U=None) -> np.ndarray:
        if U is None:
            U = np.tile(self.model.equilibrium_input(self.x_des), (self.Np, 1))
        U = np.asarray(U, float)
        return self.pack(U, self.rollout(U))


def build_ocp(e_now, config: OcpConfig, workspace: Workspace | None = None,
              system: CoupledSystem | None = None, x_des=None, model=None) -> OcpProblem:
    """Multiple-shooting transcription at the measured error ``e_now``."""
    if model is None:
        if system is None or x_des is None:
            raise ValueError("either a model or a system together with x_des is required")
        model = SystemModel(system, workspace or Workspace(), config)
    if x_des is None:
        x_des = np.zeros(model.nx)
    return OcpProblem(model, config, x_des, e_now)


# ---------------------------------------------------------------------------
# solution

@dataclass(frozen=True)
class SolveResult:
    u: np.ndarray  # (Np, nu)
    e: np.ndarray  # (Np+1, nx), re-integrated from e_now
    J: float
    kkt_residual: float
    status: str
    iterations: int
    defect: float
    residual_min: float
    message: str = ""

    @property
    def first_input(self) -> np.ndarray:
        return self.u[0]


def _kkt_residual(prob: OcpProblem, z, tol_act: float = 1e-6) -> float:
    """Stationarity residual with least-squares multipliers plus feasibility."""
    g = prob.gradient(z)
    rows = [prob.eq_jac(z)]
    if prob.n_ineq:
        ci = prob.ineq(z)
        act = ci <= tol_act
        if np.any(act):
            rows.append(prob.ineq_jac(z)[act])
        infeas_i = max(0.0, -float(ci.min()))
    else:
        infeas_i = 0.0
    lo = np.array([b[0] if b[0] is not None else -np.inf for b in prob.bounds()])
    hi = np.array([b[1] if b[1] is not None else np.inf for b in prob.bounds()])
    at = (z <= lo + tol_act) | (z >= hi - tol_act)
    if np.any(at):
        rows.append(np.eye(prob.nz)[at])
    A = np.vstack(rows)
    lam = np.linalg.lstsq(A.T, g, rcond=None)[0]
    stat = float(np.abs(g - A.T @ lam).max()) / max(1.0, float(np.abs(g).max()))
    return max(stat, float(np.abs(prob.eq(z)).max()), infeas_i)


def solve(prob: OcpProblem, warm_start=None) -> SolveResult:
    """Solve the NLP from ``warm_start`` (decision vector or ``(U, E)``)."""
    cfg = prob.config
    if warm_start is None:
        z0 = prob.initial_guess()
    elif isinstance(warm_start, tuple):
        z0 = prob.pack(*warm_start)
    else:
        z0 = np.asarray(warm_start, float).copy()
    if z0.shape != (prob.nz,):
        raise ValueError(f"warm start has shape {z0.shape}, expected ({prob.nz},)")
    # the initial node is pinned by an equality; start it there
    z0[prob.nU: prob.nU + prob.nx] = prob.e_now
    cons = [{"type": "eq", "fun": prob.eq, "jac": prob.eq_jac}]
    if prob.n_ineq:
        cons.append({"type": "ineq", "fun": prob.ineq, "jac": prob.ineq_jac})
    best = {"z": None, "f": np.inf}
    it = [0]

    def feasible(z, tol=1e-6):
        # judged on the untightened constraints
        if np.abs(prob.eq(z)).max() > tol:
            return False
        return not prob.n_ineq or prob.ineq(z, backoff=0.0).min() >= -tol

    def callback(zk):
        it[0] += 1
        f = prob.objective(zk)
        viol = float(np.abs(prob.eq(zk)).max())
        if prob.n_ineq:
            viol = max(viol, -float(prob.ineq(zk, backoff=0.0).min()))
        log.debug("iter=%d objective=%.10g violation=%.3e", it[0], f, viol)
        if viol <= 1e-6 and f < best["f"]:
            best.update(z=zk.copy(), f=f)

    def run(start):
        r = optimize.minimize(prob.objective, start, jac=prob.gradient, method="SLSQP",
                              bounds=prob.bounds(), constraints=cons, callback=callback,
                              options={"maxiter": cfg.max_iter, "ftol": cfg.kkt_tol})
        z_ = np.asarray(r.x, float)
        if cfg.input_mode == "box":
            z_[: prob.nU] = np.clip(z_[: prob.nU], -cfg.u_box, cfg.u_box)
        return r, z_

    res, z = run(z0)
    nit = int(res.nit)
    ok_final = feasible(z)
    if not ok_final and prob.n_ineq:
        # phase 1: maximise the worst inequality margin, then re-solve
        for start in (z0, z):
            zr = _restore(prob, start)
            if zr is None:
                continue
            log.debug("restoration succeeded; re-solving")
            res, z = run(zr)
            nit += int(res.nit)
            ok_final = feasible(z)
            if not ok_final and feasible(zr) and prob.objective(zr) < best["f"]:
                best.update(z=zr, f=prob.objective(zr))
            break
    if res.status == 0 and ok_final:
        status = "optimal"
    elif ok_final:
        status = "optimal" if res.status == 8 and _kkt_residual(prob, z) <= 1e-4 else "max-iter"
    elif best["z"] is not None:
        z = best["z"]
        status = "max-iter"
    elif feasible(_rerolled(prob, z)):
        z = _rerolled(prob, z)
        status = "max-iter"
    else:
        status = "infeasible"
    U, _ = prob.unpack(z)
    E = prob.rollout(U)
    z_roll = prob.pack(U, E)
    defect = float(np.abs(prob.eq(z_roll)).max())
    rmin = float(prob.model.residuals(E[1:] + prob.x_des).min()) if prob.n_res else np.inf
    kkt = _kkt_residual(prob, z)
    J = prob.objective(z_roll)
    log.debug("solve status=%s nit=%s J=%.10g kkt=%.3e", status, nit, J, kkt)
    return SolveResult(U.copy(), E, J, kkt, status, nit, defect, rmin, str(res.message))


def _restore(prob: OcpProblem, z_start, max_iter: int = 200):
    """Feasibility restoration: ``max t`` subject to the shooting defects and
    ``c_ineq(z) >= t``.  Returns a feasible decision vector or ``None``."""
    n = prob.nz
    t0 = float(prob.ineq(z_start).min())
    w0 = np.append(z_start, t0)
    cap = prob.config.backoff

    def f(w):
        return -w[-1]

    def g(w):
        out = np.zeros(n + 1)
        out[-1] = -1.0
        return out

    def eq(w):
        return prob.eq(w[:-1])

    def eq_j(w):
        return np.hstack([prob.eq_jac(w[:-1]), np.zeros((prob.n_eq, 1))])

    def ineq(w):
        return prob.ineq(w[:-1]) - w[-1]

    def ineq_j(w):
        return np.hstack([prob.ineq_jac(w[:-1]), -np.ones((prob.n_ineq, 1))])

    bounds = prob.bounds() + [(None, cap)]
    r = optimize.minimize(f, w0, jac=g, method="SLSQP", bounds=bounds,
                          constraints=[{"type": "eq", "fun": eq, "jac": eq_j},
                                       {"type": "ineq", "fun": ineq, "jac": ineq_j}],
                          options={"maxiter": max_iter, "ftol": 1e-10})
    z = np.asarray(r.x[:-1], float)
    if prob.config.input_mode == "box":
        z[: prob.nU] = np.clip(z[: prob.nU], -prob.config.u_box, prob.config.u_box)
    for cand in (z, _rerolled(prob, z)):
        if np.abs(prob.eq(cand)).max() <= 1e-6 and prob.ineq(cand, backoff=0.0).min() >= -1e-6:
            return cand
    return None


def _rerolled(prob: OcpProblem, z):
    """``z`` with the node states replaced by the rollout of its inputs."""
    U, _ = prob.unpack(z)
    return prob.pack(U, prob.rollout(U))


# ---------------------------------------------------------------------------
# terminal ingredients

def _reduced_map(model: SystemModel, x_des):
    """Tangent map ``Pi`` of ``xi = (x_O, v_O) -> x`` on the grasp manifold at ``x_des``."""
    sysm = model.system
    k = 2 * sysm.d
    h = 1e-6
    cols = []
    for j in range(k):
        xp = np.array(x_des, float)
        xm = xp.copy()
        xp[j] += h
        xm[j] -= h
        cols.append((model.project(xp) - model.project(xm)) / (2 * h))
    return np.column_stack(cols)


def linearize(model: SystemModel, x_des, u_eq, h: float = 1e-6):
    """Continuous-time ``(A, B)`` of the reduced ``(x_O, v_O)`` dynamics."""
    sysm = model.system
    k = 2 * sysm.d
    Pi = _reduced_map(model, x_des)

    def f(xi, u):
        x = np.array(x_des, float)
        x[:k] = xi
        return model.rhs(model.project(x), u)[:k]

    xi0 = np.asarray(x_des, float)[:k]
    A = np.column_stack([(f(xi0 + h * e, u_eq) - f(xi0 - h * e, u_eq)) / (2 * h) for e in np.eye(k)])
    B = np.column_stack([(f(xi0, u_eq + h * e) - f(xi0, u_eq - h * e)) / (2 * h) for e in np.eye(model.nu)])
    return A, B, Pi


@dataclass
class TerminalIngredients:
    """Linear terminal controller ``u_f(e) = u_eq + K e[:2d]`` and the
    validated terminal-ball radius."""

    K: np.ndarray
    u_eq: np.ndarray
    epsilon0: float
    validated: bool
    margins_3a: np.ndarray = field(default_factory=lambda: np.zeros(0))
    margins_3b: np.ndarray = field(default_factory=lambda: np.zeros(0))
    input_margins: np.ndarray = field(default_factory=lambda: np.zeros(0))
    message: str = ""
    u_box: float | None = None

    def controller(self, e) -> np.ndarray:
        e = np.asarray(e, float)
        u = self.u_eq + self.K @ e[: self.K.shape[1]]
        if self.u_box is not None:
            u = np.clip(u, -self.u_box, self.u_box)
        return u

    __call__ = controller


def terminal_gain(model: SystemModel, x_des, config: OcpConfig):
    """ZOH-discretised LQR gain on the reduced coordinates."""
    u_eq = model.equilibrium_input(x_des)
    A, B, Pi = linearize(model, x_des, u_eq)
    k = A.shape[0]
    Ad, Bd = _zoh(A, B, config.h)
    Qr = Pi.T @ config.Qm @ Pi
    Qd = config.h * Qr + 1e-9 * np.eye(k)
    Rd = config.h * config.Rm
    X = linalg.solve_discrete_are(Ad, Bd, Qd, Rd)
    K = -np.linalg.solve(Rd + Bd.T @ X @ Bd, Bd.T @ X @ Ad)
    return K, u_eq, Ad, Bd, Qd, Rd, Pi


def _zoh(A, B, h):
    n, m = B.shape
    M = np.zeros((n + m, n + m))
    M[:n, :n] = A
    M[:n, n:] = B
    E = linalg.expm(M * h)
    return E[:n, :n], E[:n, n:]


def lyapunov_terminal_weight(model: SystemModel, x_des, config: OcpConfig, kappa: float = 2.0,
                             delta: float = 1e-3) -> np.ndarray:
    """Full terminal weight ``P = S^T X S + delta I`` with
    ``A_cl^T X A_cl - X = -kappa (Q_d + K^T R_d K)`` on the reduced
    coordinates ``S e = e[:2d]``; with ``kappa > 1`` the sampled decrease
    condition holds near the origin."""
    K, _, Ad, Bd, Qd, Rd, _ = terminal_gain(model, x_des, config)
    Acl = Ad + Bd @ K
    X = linalg.solve_discrete_lyapunov(Acl.T, kappa * (Qd + K.T @ Rd @ K))
    X = 0.5 * (X + X.T) / config.h
    k = X.shape[0]
    P = delta * np.eye(model.nx)
    P[:k, :k] += X
    return P


def _manifold_state(model: SystemModel, x_des, xi_dir, scale):
    k = xi_dir.size
    x = np.array(x_des, float)
    x[:k] += scale * xi_dir
    return model.project(x)


def _boundary_point(model: SystemModel, x_des, xi_dir, radius, iters: int = 60):
    """Manifold state with ``|x - x_des| = radius`` along ``xi_dir`` (bisection)."""
    lo, hi = 0.0, radius / max(np.linalg.norm(xi_dir), 1e-12)
    while np.linalg.norm(_manifold_state(model, x_des, xi_dir, hi) - x_des) < radius:
        lo, hi = hi, 2 * hi
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if np.linalg.norm(_manifold_state(model, x_des, xi_dir, mid) - x_des) < radius:
            lo = mid
        else:
            hi = mid
    return _manifold_state(model, x_des, xi_dir, hi)


def check_terminal_conditions(model: SystemModel, x_des, config: OcpConfig, tf: TerminalIngredients,
                              radius: float, samples: int = 1000, seed: int = 0, nsub: int = 10,
                              interior: int = 200, stop_on_failure: bool = False):
    """Sampled conditions on the radius-``radius`` ball around ``x_des``.

    3a: the ball is invariant over one period under the held input and the
    path stays in the state set; 3b: ``V(e(h)) - V(e(0)) + int F <= 0``.
    Returns ``(margins_3a, margins_3b, input_margins)`` (all ``<= 0`` pass,
    input margins ``>= 0`` pass).  With ``stop_on_failure`` the arrays end
    at the first failing sample.
    """
    rng = np.random.default_rng(seed)
    k = tf.K.shape[1]
    P = config.Pm
    dt = config.h / nsub
    m3a, m3b, mu = [], [], []
    dirs = rng.standard_normal((samples + interior, k))
    for s_idx, d in enumerate(dirs):
        x0 = _boundary_point(model, x_des, d, radius)
        if s_idx >= samples:  # interior point
            frac = rng.uniform(0.05, 1.0)
            x0 = _boundary_point(model, x_des, d, frac * radius)
        e0 = x0 - x_des
        u = tf.u_eq + tf.K @ e0[:k]
        if config.input_mode == "box":
            mu.append(config.u_box - float(np.abs(u).max()))
        else:
            rad = model.input_radius(x0[None])[0]
            d_ = u.size // rad.size
            mu.append(float(np.min(rad - np.linalg.norm(u.reshape(rad.size, d_), axis=1))))
        x = x0
        integral = 0.0
        worst_state = np.inf
        e_prev = e0
        for _ in range(nsub):
            x = model.project(model.step(x, u, dt))
            e = x - x_des
            integral += 0.5 * dt * (running_cost(e_prev, u, config) + running_cost(e, u, config))
            worst_state = min(worst_state, float(model.residuals(x[None]).min()))
            e_prev = e
        m3a.append(max(np.linalg.norm(e) - radius, -worst_state))
        m3b.append(float(e @ P @ e - e0 @ P @ e0 + integral))
        if stop_on_failure and (m3a[-1] > 0 or m3b[-1] > 0 or mu[-1] < 0):
            break
    return np.array(m3a), np.array(m3b), np.array(mu)


def terminal_ingredients(model: SystemModel, x_des, config: OcpConfig, samples: int = 1000,
                         seed: int = 0, max_halvings: int = 40) -> TerminalIngredients:
    """Linear terminal controller and the largest validated ``epsilon0``
    (halving from ``config.epsilon0``)."""
    K, u_eq, *_ = terminal_gain(model, x_des, config)
    box = config.u_box if config.input_mode == "box" else None
    tf = TerminalIngredients(K, u_eq, 0.0, False, u_box=box)
    eps = config.epsilon0
    last = None
    for _ in range(max_halvings):
        if eps < config.epsilon0_min:
            break
        a, b, mu = check_terminal_conditions(model, x_des, config, tf, eps, samples, seed, stop_on_failure=True)
        last = (a, b, mu)
        if a.max() <= 0 and b.max() <= 0 and mu.min() >= 0:
            return replace(tf, epsilon0=eps, validated=True, margins_3a=a, margins_3b=b,
                           input_margins=mu, message=f"validated at epsilon0={eps:.6g}")
        eps *= 0.5
    a, b, mu = last if last is not None else (np.zeros(0),) * 3
    msg = "terminal-set synthesis failed: no radius >= {:.1e} satisfies the sampled conditions".format(
        config.epsilon0_min)
    return replace(tf, margins_3a=a, margins_3b=b, input_margins=mu, message=msg)


# ---------------------------------------------------------------------------
# receding-horizon helpers

def shift_warm_start(prev: SolveResult, u_f: Callable, config: OcpConfig, model=None, x_des=None):
    """Candidate ``(U, E)``: drop the first interval, append ``u_f`` held at
    the previous terminal state."""
    e_T = prev.e[-1]
    u_new = np.asarray(u_f(e_T), float)
    U = np.vstack([prev.u[1:], u_new[None]])
    if model is not None and x_des is not None:
        e_next = model.step(e_T + x_des, u_new, config.h, config.substeps) - x_des
    else:
        e_next = e_T
    E = np.vstack([prev.e[1:], e_next[None]])
    return U, E


@dataclass
class AdmissibilityReport:
    admissible: bool
    conditions: dict
    first_violation: tuple | None  # (condition, time, detail)
    terminal_applicable: bool


def admissibility_check(u_traj, e0, config: OcpConfig, model, x_des, terminal_radius: float | None = None,
                        nsub: int = 10, tol: float = 1e-6) -> AdmissibilityReport:
    """Check the admissibility conditions of a piecewise-constant input.

    1. piecewise continuity (finite, piecewise-constant values)
    2. ``u in U``
    3. ``e(s) in E`` along the re-integrated trajectory
    4. ``|e(T_p)| <= terminal_radius`` (skipped when no radius is given)
    """
    U = np.atleast_2d(np.asarray(u_traj, float))
    x_des = np.asarray(x_des, float)
    cond = {1: True, 2: True, 3: True, 4: None if terminal_radius is None else True}
    first = None

    def flag(c, t, detail):
        nonlocal first
        cond[c] = False
        if first is None or t < first[1] or (t == first[1] and c < first[0]):
            first = (c, float(t), detail)

    if not np.all(np.isfinite(U)):
        flag(1, 0.0, "non-finite input value")
    for k, u in enumerate(U):
        t = k * config.h
        if config.input_mode == "box":
            over = np.abs(u).max() - config.u_box
            if over > tol:
                flag(2, t, f"|u| exceeds {config.u_box:g} by {over:.3g}")
    x = np.asarray(e0, float) + x_des
    dt = config.h / nsub
    for k, u in enumerate(U):
        if not np.all(np.isfinite(u)):
            break
        if config.input_mode == "ball":
            rad = model.input_radius(x[None])[0]
            d = u.size // rad.size
            over = float(np.max(np.linalg.norm(u.reshape(rad.size, d), axis=1) - rad))
            if over > tol:
                flag(2, k * config.h, f"input ball exceeded by {over:.3g}")
        for j in range(nsub):
            x = model.project(model.step(x, u, dt))
            t = k * config.h + (j + 1) * dt
            r = model.residuals(x[None])[0]
            if r.size and r.min() < -tol:
                name = model.names[int(np.argmin(r))]
                flag(3, t, f"{name} = {r.min():.3g}")
    if terminal_radius is not None:
        n = float(np.linalg.norm(x - x_des))
        if n > terminal_radius + tol:
            flag(4, len(U) * config.h, f"|e(T_p)| = {n:.4g} > {terminal_radius:.4g}")
    ok = all(v is not False for v in cond.values())
    return AdmissibilityReport(ok, cond, first, terminal_radius is not None)


# ---------------------------------------------------------------------------
# derivative checks

@dataclass
class DerivativeReport:
    name: str
    samples: int
    max_rel_error: float
    passed: bool
    seconds: float


def _fd_jacobian(f, z, step):
    f0 = np.atleast_1d(f(z))
    Jm = np.empty((f0.size, z.size))
    for j in range(z.size):
        d = np.zeros_like(z)
        d[j] = step
        Jm[:, j] = (np.atleast_1d(f(z + d)) - np.atleast_1d(f(z - d))) / (2 * step)
    return Jm


def _eq_plain(prob: OcpProblem, z) -> np.ndarray:
    # defects without sensitivities, for finite differencing
    U, E = prob.unpack(z)
    cfg = prob.config
    Xn = np.array([prob.model.step(E[k] + prob.x_des, U[k], cfg.h, cfg.substeps) for k in range(prob.Np)])
    return np.concatenate([E[0] - prob.e_now, (E[1:] - (Xn - prob.x_des)).ravel()])


def _ineq_plain(prob: OcpProblem, z) -> np.ndarray:
    if prob.ball:
        return prob.ineq(z, backoff=0.0)
    U, E = prob.unpack(z)
    parts = [prob.model.residuals(E[1:] + prob.x_des).ravel()]
    if prob.terminal:
        parts.append(np.array([prob.config.epsilon0 ** 2 - E[-1] @ E[-1]]))
    return np.concatenate(parts)


def check_nlp_derivatives(prob: OcpProblem, samples: int = 100, seed: int = 0, step: float = 1e-6,
                          tol: float = 1e-5, u_scale: float = 2.0, v_scale: float = 0.3) -> list[DerivativeReport]:
    """Analytic objective gradient and constraint Jacobians of ``prob`` against
    central differences at random decision vectors.

    Each sample draws inputs within ``u_scale`` of the equilibrium input,
    perturbs the measured object velocity by up to ``v_scale`` and places
    the nodes on the resulting rollout.  The error of one sample is
    ``|analytic - fd|_F / |fd|_F``.
    """
    rng = np.random.default_rng(seed)
    d = getattr(getattr(prob.model, "system", None), "d", 0)
    u_eq = prob.model.equilibrium_input(prob.x_des)
    parts = {"objective gradient": (prob.objective, prob.gradient),
             "equality Jacobian": (lambda z: _eq_plain(prob, z), prob.eq_jac),
             "inequality Jacobian": (lambda z: _ineq_plain(prob, z), prob.ineq_jac)}
    worst = dict.fromkeys(parts, 0.0)
    secs = dict.fromkeys(parts, 0.0)
    box = prob.config.u_box
    for _ in range(samples):
        e0 = prob.e_now.copy()
        if d:
            e0[d: 2 * d] += rng.uniform(-v_scale, v_scale, d)
        U = np.clip(u_eq + rng.uniform(-u_scale, u_scale, (prob.Np, prob.nu)), -box, box)
        z = prob.pack(U, prob.rollout(U, e0))
        for name, (f, df) in parts.items():
            t0 = time.perf_counter()
            A = np.atleast_2d(df(z))
            F = _fd_jacobian(f, z, step)
            err = float(np.linalg.norm(A - F) / max(np.linalg.norm(F), 1e-12))
            worst[name] = max(worst[name], err)
            secs[name] += time.perf_counter() - t0
    return [DerivativeReport(n, samples, worst[n], worst[n] <= tol, secs[n]) for n in parts]
