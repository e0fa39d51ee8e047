"""Pure numpy implementation of the planar hot kernels.

Mirrors ``_kernels.pyx`` function for function.  Every routine accepts
complex input so that derivatives can be taken with the complex step.

Parameter layout per agent (row of ``P``)::

    l1, l2, off1, off2, base_height, m_base, m1, m2, px, py, pz, phi_grasp

``glob = [m_O, I_Oxx, gx, gy, gz, compensate]``.
"""
from __future__ import annotations

import numpy as np

NPAR = 12
CSTEP = 1e-30


def _solve(A, b):
    return np.linalg.solve(A, b[..., None])[..., 0]


def rhs_batch(X, U, P, glob):
    """Planar coupled dynamics for a batch of states ``X (B, nx)`` and inputs ``U (B, nu)``."""
    X = np.asarray(X)
    U = np.asarray(U)
    nb = X.shape[0]
    N = P.shape[0]
    dt = np.result_type(X, U, float)
    v = X[:, 4:8]
    w = v[:, 3]
    m_o, i_o, gx, gy, gz, comp = glob
    gvec = np.array([gx, gy, gz])
    Mt = np.zeros((nb, 4, 4), dt)
    Mt[:, 0, 0] = Mt[:, 1, 1] = Mt[:, 2, 2] = m_o
    Mt[:, 3, 3] = i_o
    ct = np.zeros((nb, 4), dt)
    gt = np.zeros((nb, 4), dt)
    gt[:, :3] = -m_o * gvec
    GTu = np.zeros((nb, 4), dt)
    out = np.empty((nb, 8 + 4 * N), dt)
    out[:, :4] = v
    for k in range(N):
        l1, l2, o1, o2, hb, mb, m1, m2, px, py, pz, _ = P[k]
        q = X[:, 8 + 4 * k: 12 + 4 * k]
        b1 = q[:, 2] + o1
        b2 = b1 + q[:, 3] + o2
        s1, c1, s2, c2 = np.sin(b1), np.cos(b1), np.sin(b2), np.cos(b2)
        ay = -(c2 * py - s2 * pz)
        az = -(s2 * py + c2 * pz)
        G = np.zeros((nb, 4, 4), dt)
        G[:, 0, 0] = G[:, 1, 1] = G[:, 2, 2] = G[:, 3, 3] = 1.0
        G[:, 1, 3] = az
        G[:, 2, 3] = -ay
        vi = np.einsum("bij,bj->bi", G, v)
        J = np.zeros((nb, 4, 4), dt)
        J[:, 0, 0] = J[:, 1, 1] = 1.0
        J[:, 1, 2] = -l1 * c1 - l2 * c2
        J[:, 1, 3] = -l2 * c2
        J[:, 2, 2] = -l1 * s1 - l2 * s2
        J[:, 2, 3] = -l2 * s2
        J[:, 3, 2] = J[:, 3, 3] = 1.0
        Jinv = np.linalg.inv(J)
        qd = np.einsum("bij,bj->bi", Jinv, vi)
        out[:, 8 + 4 * k: 12 + 4 * k] = qd
        w1 = qd[:, 2]
        w2 = qd[:, 2] + qd[:, 3]
        # body point Jacobians (rows x, y, z) for base, link-1 and link-2 midpoints
        Jb = np.zeros((nb, 3, 4), dt)
        Jb[:, 0, 0] = Jb[:, 1, 1] = 1.0
        J1 = Jb.copy()
        J1[:, 1, 2] = -0.5 * l1 * c1
        J1[:, 2, 2] = -0.5 * l1 * s1
        J2 = Jb.copy()
        J2[:, 1, 2] = -l1 * c1 - 0.5 * l2 * c2
        J2[:, 1, 3] = -0.5 * l2 * c2
        J2[:, 2, 2] = -l1 * s1 - 0.5 * l2 * s2
        J2[:, 2, 3] = -0.5 * l2 * s2
        a1 = np.zeros((nb, 3), dt)
        a1[:, 1] = 0.5 * l1 * w1 ** 2 * s1
        a1[:, 2] = -0.5 * l1 * w1 ** 2 * c1
        a2 = np.zeros((nb, 3), dt)
        a2[:, 1] = l1 * w1 ** 2 * s1 + 0.5 * l2 * w2 ** 2 * s2
        a2[:, 2] = -l1 * w1 ** 2 * c1 - 0.5 * l2 * w2 ** 2 * c2
        I1 = m1 * l1 * l1 / 12.0
        I2 = m2 * l2 * l2 / 12.0
        B = (mb * np.einsum("bki,bkj->bij", Jb, Jb) + m1 * np.einsum("bki,bkj->bij", J1, J1)
             + m2 * np.einsum("bki,bkj->bij", J2, J2))
        B[:, 2, 2] += I1 + I2
        B[:, 2, 3] += I2
        B[:, 3, 2] += I2
        B[:, 3, 3] += I2
        n = m1 * np.einsum("bki,bk->bi", J1, a1) + m2 * np.einsum("bki,bk->bi", J2, a2)
        gq = -(mb * np.einsum("bki,k->bi", Jb, gvec) + m1 * np.einsum("bki,k->bi", J1, gvec)
               + m2 * np.einsum("bki,k->bi", J2, gvec))
        JinvT = np.swapaxes(Jinv, 1, 2)
        M = JinvT @ B @ Jinv
        jdq = np.zeros((nb, 4), dt)
        jdq[:, 1] = l1 * w1 ** 2 * s1 + l2 * w2 ** 2 * s2
        jdq[:, 2] = -l1 * w1 ** 2 * c1 - l2 * w2 ** 2 * c2
        gdv = np.zeros((nb, 4), dt)
        gdv[:, 1] = w ** 2 * ay
        gdv[:, 2] = w ** 2 * az
        cv = np.einsum("bij,bj->bi", JinvT, n) - np.einsum("bij,bj->bi", M, jdq)
        gi = np.einsum("bij,bj->bi", JinvT, gq)
        GT = np.swapaxes(G, 1, 2)
        Mt = Mt + GT @ M @ G
        ct = ct + np.einsum("bij,bj->bi", GT, np.einsum("bij,bj->bi", M, gdv) + cv)
        gt = gt + np.einsum("bij,bj->bi", GT, gi)
        GTu = GTu + np.einsum("bij,bj->bi", GT, U[:, 4 * k: 4 * k + 4])
    rhs2 = GTu - ct
    if not comp:
        rhs2 = rhs2 - gt
    out[:, 4:8] = _solve(Mt, rhs2)
    return out


def rhs(x, u, P, glob):
    return rhs_batch(np.asarray(x)[None], np.asarray(u)[None], P, glob)[0]


def _rk4_batch(X, U, dt, nsub, P, glob):
    h = dt / nsub
    for _ in range(nsub):
        k1 = rhs_batch(X, U, P, glob)
        k2 = rhs_batch(X + 0.5 * h * k1, U, P, glob)
        k3 = rhs_batch(X + 0.5 * h * k2, U, P, glob)
        k4 = rhs_batch(X + h * k3, U, P, glob)
        X = X + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
    return X


def rk4(x, u, dt, nsub, P, glob):
    """``nsub`` classical RK4 sub-steps over ``dt`` with constant input."""
    return _rk4_batch(np.asarray(x, float)[None], np.asarray(u, float)[None], dt, nsub, P, glob)[0]


def rk4_sens(x, u, dt, P, glob, nsub=1):
    """``nsub`` RK4 sub-steps and its exact Jacobians ``(x+, dx+/dx, dx+/du)`` by complex step."""
    x = np.asarray(x, float)
    u = np.asarray(u, float)
    nx, nu = x.size, u.size
    X = np.tile(x.astype(complex), (nx + nu + 1, 1))
    U = np.tile(u.astype(complex), (nx + nu + 1, 1))
    idx = np.arange(nx)
    X[idx, idx] += 1j * CSTEP
    U[nx + np.arange(nu), np.arange(nu)] += 1j * CSTEP
    Y = _rk4_batch(X, U, dt, nsub, P, glob)
    D = Y[:-1].imag.T / CSTEP
    return Y[-1].real.copy(), D[:, :nx].copy(), D[:, nx:].copy()


def rk4_sens_many(X, U, dt, P, glob, nsub=1):
    X = np.asarray(X, float)
    U = np.asarray(U, float)
    K, nx = X.shape
    nu = U.shape[1]
    Xn = np.empty((K, nx))
    A = np.empty((K, nx, nx))
    B = np.empty((K, nx, nu))
    for k in range(K):
        Xn[k], A[k], B[k] = rk4_sens(X[k], U[k], dt, P, glob, nsub)
    return Xn, A, B


def project(x, P, glob):
    """Closed-form joint re-synchronisation to the object pose.

    Returns ``(x_projected, ok)``; ``ok`` is False if some end effector pose
    is out of reach (the elbow cosine is then clamped).
    """
    x = np.array(x, dtype=float)
    ok = True
    phi_o = x[3]
    for k in range(P.shape[0]):
        l1, l2, o1, o2, hb, _, _, _, px, py, pz, phig = P[k]
        s = slice(8 + 4 * k, 12 + 4 * k)
        q = x[s]
        b2 = phi_o + phig
        cb, sb = np.cos(b2), np.sin(b2)
        pe = x[:3] + np.array([px, cb * py - sb * pz, sb * py + cb * pz])
        c1 = (pe[2] - hb - l2 * cb) / l1
        if abs(c1) > 1.0:
            ok = False
            c1 = np.clip(c1, -1.0, 1.0)
        base = np.arccos(c1)
        b1_prev = q[2] + o1
        cands = np.array([base, -base])
        cands = cands + 2 * np.pi * np.round((b1_prev - cands) / (2 * np.pi))
        b1 = cands[np.argmin(np.abs(cands - b1_prev))]
        q_new = np.array([pe[0], pe[1] + l1 * np.sin(b1) + l2 * sb, b1 - o1, b2 - b1 - o2])
        x[s] = q_new
    return x, ok
