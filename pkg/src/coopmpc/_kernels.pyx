# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled planar kernels; see ``_kernels_py`` for the reference version."""
import numpy as np
cimport numpy as cnp
from libc.math cimport sin, cos, sinh, cosh, fabs, acos, floor, M_PI

cnp.import_array()

cdef enum:
    MAXA = 16
    NPAR = 12

cdef double CSTEP = 1e-30

ctypedef fused num:
    double
    double complex


cdef inline num _sin(num z) noexcept nogil:
    if num is double:
        return sin(z)
    else:
        return sin(z.real) * cosh(z.imag) + 1j * (cos(z.real) * sinh(z.imag))


cdef inline num _cos(num z) noexcept nogil:
    if num is double:
        return cos(z)
    else:
        return cos(z.real) * cosh(z.imag) - 1j * (sin(z.real) * sinh(z.imag))


cdef inline double _mag(num z) noexcept nogil:
    if num is double:
        return fabs(z)
    else:
        return fabs(z.real)


cdef int _solve4(num* A, num* b, int nrhs) noexcept nogil:
    """In-place Gaussian elimination on a 4x4 ``A`` with ``nrhs`` right-hand
    sides stored row-major in ``b`` (4 x nrhs).  Returns -1 if singular."""
    cdef int i, j, k, p
    cdef num t, f
    for k in range(4):
        p = k
        for i in range(k + 1, 4):
            if _mag(A[i * 4 + k]) > _mag(A[p * 4 + k]):
                p = i
        if _mag(A[p * 4 + k]) == 0.0:
            return -1
        if p != k:
            for j in range(4):
                t = A[k * 4 + j]; A[k * 4 + j] = A[p * 4 + j]; A[p * 4 + j] = t
            for j in range(nrhs):
                t = b[k * nrhs + j]; b[k * nrhs + j] = b[p * nrhs + j]; b[p * nrhs + j] = t
        for i in range(k + 1, 4):
            f = A[i * 4 + k] / A[k * 4 + k]
            for j in range(k, 4):
                A[i * 4 + j] = A[i * 4 + j] - f * A[k * 4 + j]
            for j in range(nrhs):
                b[i * nrhs + j] = b[i * nrhs + j] - f * b[k * nrhs + j]
    for k in range(3, -1, -1):
        for j in range(nrhs):
            t = b[k * nrhs + j]
            for i in range(k + 1, 4):
                t = t - A[k * 4 + i] * b[i * nrhs + j]
            b[k * nrhs + j] = t / A[k * 4 + k]
    return 0


cdef int _rhs(num* x, num* u, const double* P, int N, const double* glob, num* out) noexcept nogil:
    cdef num Mt[16]
    cdef num ct[4]
    cdef num gt[4]
    cdef num GTu[4]
    cdef num J[16]
    cdef num Jinv[16]
    cdef num G[16]
    cdef num B[16]
    cdef num M[16]
    cdef num T[16]
    cdef num Jb[12]
    cdef num J1[12]
    cdef num J2[12]
    cdef num a1[3]
    cdef num a2[3]
    cdef num vi[4]
    cdef num qd[4]
    cdef num n[4]
    cdef num gq[4]
    cdef num jdq[4]
    cdef num gdv[4]
    cdef num cv[4]
    cdef num gi[4]
    cdef num tmp[4]
    cdef num b1, b2, s1, c1, s2, c2, ay, az, w, w1, w2
    cdef double l1, l2, o1, o2, mb, m1, m2, py, pz, I1, I2
    cdef double gvec[3]
    cdef int i, j, k, r
    cdef const double* p
    cdef num* q
    cdef num* v = x + 4
    w = v[3]
    gvec[0] = glob[2]; gvec[1] = glob[3]; gvec[2] = glob[4]
    for i in range(16):
        Mt[i] = 0.0
    Mt[0] = glob[0]; Mt[5] = glob[0]; Mt[10] = glob[0]; Mt[15] = glob[1]
    for i in range(4):
        ct[i] = 0.0; GTu[i] = 0.0
        gt[i] = -glob[0] * gvec[i] if i < 3 else 0.0
        out[i] = v[i]
    for k in range(N):
        p = P + k * NPAR
        q = x + 8 + 4 * k
        l1 = p[0]; l2 = p[1]; o1 = p[2]; o2 = p[3]
        mb = p[5]; m1 = p[6]; m2 = p[7]; py = p[9]; pz = p[10]
        b1 = q[2] + o1
        b2 = b1 + q[3] + o2
        s1 = _sin(b1); c1 = _cos(b1); s2 = _sin(b2); c2 = _cos(b2)
        ay = -(c2 * py - s2 * pz)
        az = -(s2 * py + c2 * pz)
        for i in range(16):
            G[i] = 0.0; J[i] = 0.0; Jinv[i] = 0.0
        G[0] = 1.0; G[5] = 1.0; G[10] = 1.0; G[15] = 1.0
        G[1 * 4 + 3] = az
        G[2 * 4 + 3] = -ay
        vi[0] = v[0]; vi[1] = v[1] + az * w; vi[2] = v[2] - ay * w; vi[3] = w
        J[0] = 1.0; J[5] = 1.0
        J[1 * 4 + 2] = -l1 * c1 - l2 * c2
        J[1 * 4 + 3] = -l2 * c2
        J[2 * 4 + 2] = -l1 * s1 - l2 * s2
        J[2 * 4 + 3] = -l2 * s2
        J[3 * 4 + 2] = 1.0; J[3 * 4 + 3] = 1.0
        Jinv[0] = 1.0; Jinv[5] = 1.0; Jinv[10] = 1.0; Jinv[15] = 1.0
        if _solve4(J, Jinv, 4) != 0:
            return -1
        for i in range(4):
            qd[i] = 0.0
            for j in range(4):
                qd[i] = qd[i] + Jinv[i * 4 + j] * vi[j]
            out[8 + 4 * k + i] = qd[i]
        w1 = qd[2]
        w2 = qd[2] + qd[3]
        for i in range(12):
            Jb[i] = 0.0
        Jb[0] = 1.0; Jb[5] = 1.0
        for i in range(12):
            J1[i] = Jb[i]; J2[i] = Jb[i]
        J1[1 * 4 + 2] = -0.5 * l1 * c1
        J1[2 * 4 + 2] = -0.5 * l1 * s1
        J2[1 * 4 + 2] = -l1 * c1 - 0.5 * l2 * c2
        J2[1 * 4 + 3] = -0.5 * l2 * c2
        J2[2 * 4 + 2] = -l1 * s1 - 0.5 * l2 * s2
        J2[2 * 4 + 3] = -0.5 * l2 * s2
        a1[0] = 0.0
        a1[1] = 0.5 * l1 * w1 * w1 * s1
        a1[2] = -0.5 * l1 * w1 * w1 * c1
        a2[0] = 0.0
        a2[1] = l1 * w1 * w1 * s1 + 0.5 * l2 * w2 * w2 * s2
        a2[2] = -l1 * w1 * w1 * c1 - 0.5 * l2 * w2 * w2 * c2
        I1 = m1 * l1 * l1 / 12.0
        I2 = m2 * l2 * l2 / 12.0
        for i in range(4):
            n[i] = 0.0
            gq[i] = 0.0
            for j in range(4):
                B[i * 4 + j] = 0.0
                for r in range(3):
                    B[i * 4 + j] = B[i * 4 + j] + mb * Jb[r * 4 + i] * Jb[r * 4 + j] \
                        + m1 * J1[r * 4 + i] * J1[r * 4 + j] + m2 * J2[r * 4 + i] * J2[r * 4 + j]
            for r in range(3):
                n[i] = n[i] + m1 * J1[r * 4 + i] * a1[r] + m2 * J2[r * 4 + i] * a2[r]
                gq[i] = gq[i] - (mb * Jb[r * 4 + i] + m1 * J1[r * 4 + i] + m2 * J2[r * 4 + i]) * gvec[r]
        B[2 * 4 + 2] = B[2 * 4 + 2] + I1 + I2
        B[2 * 4 + 3] = B[2 * 4 + 3] + I2
        B[3 * 4 + 2] = B[3 * 4 + 2] + I2
        B[3 * 4 + 3] = B[3 * 4 + 3] + I2
        # M = Jinv^T B Jinv
        for i in range(4):
            for j in range(4):
                T[i * 4 + j] = 0.0
                for r in range(4):
                    T[i * 4 + j] = T[i * 4 + j] + B[i * 4 + r] * Jinv[r * 4 + j]
        for i in range(4):
            for j in range(4):
                M[i * 4 + j] = 0.0
                for r in range(4):
                    M[i * 4 + j] = M[i * 4 + j] + Jinv[r * 4 + i] * T[r * 4 + j]
        jdq[0] = 0.0; jdq[3] = 0.0
        jdq[1] = l1 * w1 * w1 * s1 + l2 * w2 * w2 * s2
        jdq[2] = -l1 * w1 * w1 * c1 - l2 * w2 * w2 * c2
        gdv[0] = 0.0; gdv[3] = 0.0
        gdv[1] = w * w * ay
        gdv[2] = w * w * az
        for i in range(4):
            cv[i] = 0.0
            gi[i] = 0.0
            for r in range(4):
                cv[i] = cv[i] + Jinv[r * 4 + i] * n[r] - M[i * 4 + r] * jdq[r]
                gi[i] = gi[i] + Jinv[r * 4 + i] * gq[r]
        for i in range(4):
            tmp[i] = cv[i]
            for r in range(4):
                tmp[i] = tmp[i] + M[i * 4 + r] * gdv[r]
        # accumulate G^T (.) G and G^T (.)
        for i in range(4):
            for j in range(4):
                T[i * 4 + j] = 0.0
                for r in range(4):
                    T[i * 4 + j] = T[i * 4 + j] + M[i * 4 + r] * G[r * 4 + j]
        for i in range(4):
            for j in range(4):
                for r in range(4):
                    Mt[i * 4 + j] = Mt[i * 4 + j] + G[r * 4 + i] * T[r * 4 + j]
            for r in range(4):
                ct[i] = ct[i] + G[r * 4 + i] * tmp[r]
                gt[i] = gt[i] + G[r * 4 + i] * gi[r]
                GTu[i] = GTu[i] + G[r * 4 + i] * u[4 * k + r]
    for i in range(4):
        out[4 + i] = GTu[i] - ct[i]
        if glob[5] == 0.0:
            out[4 + i] = out[4 + i] - gt[i]
    if _solve4(Mt, out + 4, 1) != 0:
        return -1
    return 0


cdef int _rk4(num* x, num* u, double h, int nsub, const double* P, int N, const double* glob,
              num* y, num* work) noexcept nogil:
    """``y <- nsub`` RK4 steps of size ``h`` from ``x``; ``work`` holds 5*nx."""
    cdef int nx = 8 + 4 * N
    cdef int i, s
    cdef num* k1 = work
    cdef num* k2 = work + nx
    cdef num* k3 = work + 2 * nx
    cdef num* k4 = work + 3 * nx
    cdef num* xt = work + 4 * nx
    for i in range(nx):
        y[i] = x[i]
    for s in range(nsub):
        if _rhs(y, u, P, N, glob, k1) != 0:
            return -1
        for i in range(nx):
            xt[i] = y[i] + 0.5 * h * k1[i]
        if _rhs(xt, u, P, N, glob, k2) != 0:
            return -1
        for i in range(nx):
            xt[i] = y[i] + 0.5 * h * k2[i]
        if _rhs(xt, u, P, N, glob, k3) != 0:
            return -1
        for i in range(nx):
            xt[i] = y[i] + h * k3[i]
        if _rhs(xt, u, P, N, glob, k4) != 0:
            return -1
        for i in range(nx):
            y[i] = y[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])
    return 0


def _check(P, x, u):
    N = P.shape[0]
    if N > MAXA or P.shape[1] != NPAR:
        raise ValueError("bad parameter array")
    if x.shape[0] != 8 + 4 * N or u.shape[0] != 4 * N:
        raise ValueError("state/input dimension mismatch")
    return N


def rhs(double[::1] x, double[::1] u, const double[:, ::1] P, const double[::1] glob):
    cdef int N = _check(P, x, u)
    out = np.empty(x.shape[0])
    cdef double[::1] o = out
    if _rhs(&x[0], &u[0], &P[0, 0], N, &glob[0], &o[0]) != 0:
        raise ZeroDivisionError("singular agent Jacobian or coupled inertia")
    return out


def rk4(double[::1] x, double[::1] u, double dt, int nsub, const double[:, ::1] P, const double[::1] glob):
    cdef int N = _check(P, x, u)
    cdef int nx = x.shape[0]
    out = np.empty(nx)
    work = np.empty(5 * nx)
    cdef double[::1] o = out
    cdef double[::1] wk = work
    if _rk4(&x[0], &u[0], dt / nsub, nsub, &P[0, 0], N, &glob[0], &o[0], &wk[0]) != 0:
        raise ZeroDivisionError("singular agent Jacobian or coupled inertia")
    return out


cdef int _sens(double* x, double* u, double dt, int nsub, const double* P, int N, const double* glob,
               double* xn, double* A, double* B, double complex* cx, double complex* cu,
               double complex* cy, double complex* cwork, double* rwork) noexcept nogil:
    cdef int nx = 8 + 4 * N
    cdef int nu = 4 * N
    cdef int i, j
    if _rk4(x, u, dt / nsub, nsub, P, N, glob, xn, rwork) != 0:
        return -1
    for i in range(nx):
        cx[i] = x[i]
    for i in range(nu):
        cu[i] = u[i]
    for j in range(nx + nu):
        if j < nx:
            cx[j] = x[j] + 1j * CSTEP
        else:
            cu[j - nx] = u[j - nx] + 1j * CSTEP
        if _rk4(cx, cu, dt / nsub, nsub, P, N, glob, cy, cwork) != 0:
            return -1
        for i in range(nx):
            if j < nx:
                A[i * nx + j] = cy[i].imag / CSTEP
            else:
                B[i * nu + j - nx] = cy[i].imag / CSTEP
        if j < nx:
            cx[j] = x[j]
        else:
            cu[j - nx] = u[j - nx]
    return 0


def rk4_sens(double[::1] x, double[::1] u, double dt, const double[:, ::1] P, const double[::1] glob,
             int nsub=1):
    cdef int N = _check(P, x, u)
    cdef int nx = x.shape[0]
    cdef int nu = u.shape[0]
    xn = np.empty(nx)
    A = np.empty((nx, nx))
    B = np.empty((nx, nu))
    cbuf = np.empty(7 * nx + nu, dtype=complex)
    rbuf = np.empty(5 * nx)
    cdef double[::1] xv = xn
    cdef double[:, ::1] Av = A
    cdef double[:, ::1] Bv = B
    cdef double complex[::1] cb = cbuf
    cdef double[::1] rb = rbuf
    cdef int r
    with nogil:
        r = _sens(&x[0], &u[0], dt, nsub, &P[0, 0], N, &glob[0], &xv[0], &Av[0, 0], &Bv[0, 0],
                  &cb[0], &cb[nx], &cb[nx + nu], &cb[2 * nx + nu], &rb[0])
    if r != 0:
        raise ZeroDivisionError("singular agent Jacobian or coupled inertia")
    return xn, A, B


def rk4_sens_many(double[:, ::1] X, double[:, ::1] U, double dt, const double[:, ::1] P,
                  const double[::1] glob, int nsub=1):
    cdef int K = X.shape[0]
    if U.shape[0] != K:
        raise ValueError("state/input batch mismatch")
    cdef int N = _check(P, X[0], U[0])
    cdef int nx = X.shape[1]
    cdef int nu = U.shape[1]
    Xn = np.empty((K, nx))
    A = np.empty((K, nx, nx))
    B = np.empty((K, nx, nu))
    cbuf = np.empty(7 * nx + nu, dtype=complex)
    rbuf = np.empty(5 * nx)
    cdef double[:, ::1] Xv = Xn
    cdef double[:, :, ::1] Av = A
    cdef double[:, :, ::1] Bv = B
    cdef double complex[::1] cb = cbuf
    cdef double[::1] rb = rbuf
    cdef int k, r = 0
    with nogil:
        for k in range(K):
            r = _sens(&X[k, 0], &U[k, 0], dt, nsub, &P[0, 0], N, &glob[0], &Xv[k, 0], &Av[k, 0, 0],
                      &Bv[k, 0, 0], &cb[0], &cb[nx], &cb[nx + nu], &cb[2 * nx + nu], &rb[0])
            if r != 0:
                break
    if r != 0:
        raise ZeroDivisionError("singular agent Jacobian or coupled inertia")
    return Xn, A, B


def project(double[::1] x_in, const double[:, ::1] P, const double[::1] glob):
    cdef int N = P.shape[0]
    if x_in.shape[0] != 8 + 4 * N:
        raise ValueError("state dimension mismatch")
    out = np.array(x_in, dtype=float)
    cdef double[::1] x = out
    cdef int k, o
    cdef double l1, l2, o1, o2, hb, px, py, pz, b2, cb, sb, pex, pey, pez, c1, base, b1p
    cdef double ca, cm, b1
    ok = True
    for k in range(N):
        l1 = P[k, 0]; l2 = P[k, 1]; o1 = P[k, 2]; o2 = P[k, 3]; hb = P[k, 4]
        px = P[k, 8]; py = P[k, 9]; pz = P[k, 10]
        o = 8 + 4 * k
        b2 = x[3] + P[k, 11]
        cb = cos(b2); sb = sin(b2)
        pex = x[0] + px
        pey = x[1] + cb * py - sb * pz
        pez = x[2] + sb * py + cb * pz
        c1 = (pez - hb - l2 * cb) / l1
        if c1 > 1.0 or c1 < -1.0:
            ok = False
            c1 = 1.0 if c1 > 1.0 else -1.0
        base = acos(c1)
        b1p = x[o + 2] + o1
        ca = base + 2.0 * M_PI * _round((b1p - base) / (2.0 * M_PI))
        cm = -base + 2.0 * M_PI * _round((b1p + base) / (2.0 * M_PI))
        b1 = ca if fabs(ca - b1p) <= fabs(cm - b1p) else cm
        x[o] = pex
        x[o + 1] = pey + l1 * sin(b1) + l2 * sb
        x[o + 2] = b1 - o1
        x[o + 3] = b2 - b1 - o2
    return out, ok


cdef inline double _round(double a) noexcept nogil:
    # round half to even, as numpy does
    cdef double f = floor(a)
    cdef double d = a - f
    if d > 0.5:
        return f + 1.0
    if d < 0.5:
        return f
    return f if fmod_even(f) else f + 1.0


cdef inline bint fmod_even(double f) noexcept nogil:
    return floor(f / 2.0) * 2.0 == f
