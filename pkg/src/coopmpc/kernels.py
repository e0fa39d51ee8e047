"""Backend selection for the planar hot kernels.

The compiled extension ``coopmpc._kernels`` is used when it imports; set
``COOPMPC_PURE_PYTHON=1`` to force the numpy fallback.  Both expose
``rhs``, ``rk4``, ``rk4_sens``, ``rk4_sens_many`` and ``project`` with
identical signatures.
"""
from __future__ import annotations

import os

import numpy as np

from . import _kernels_py

NPAR = _kernels_py.NPAR


def _load():
    if os.environ.get("COOPMPC_PURE_PYTHON", "").strip() not in ("", "0"):
        return _kernels_py, "python"
    try:
        from . import _kernels  # type: ignore[attr-defined]
    except ImportError:
        return _kernels_py, "python"
    return _kernels, "cython"


backend, BACKEND = _load()


class PlanarKernel:
    """Packed parameters of a planar :class:`CoupledSystem` bound to a backend."""

    def __init__(self, system, impl=None):
        if not system.planar:
            raise ValueError("the kernels only cover planar agents")
        for a in system.agents:
            if a.n_alpha != 2:
                raise ValueError("the kernels only cover two-link planar arms")
            if abs(a.grasp_offset_orientation[1]) > 0 or abs(a.grasp_offset_orientation[2]) > 0:
                raise ValueError("planar grasps may only carry a roll offset")
        self.system = system
        self.impl = impl if impl is not None else backend
        rows = []
        for a in system.agents:
            rows.append([a.link_lengths[0], a.link_lengths[1], a.joint_offsets[0], a.joint_offsets[1],
                         a.base_height, a.base_mass, a.masses[0], a.masses[1],
                         *a.grasp_offset_position, a.grasp_offset_orientation[0]])
        self.P = np.ascontiguousarray(rows, dtype=float)
        g = system.gravity
        self.glob = np.array([system.obj.mass, system.obj.inertia[0], g[0], g[1], g[2],
                              1.0 if system.gravity_compensation else 0.0])
        self.nx = system.nx
        self.nu = system.nu

    def rhs(self, x, u):
        return self.impl.rhs(np.ascontiguousarray(x, float), np.ascontiguousarray(u, float), self.P, self.glob)

    def rk4(self, x, u, dt, nsub=1):
        return self.impl.rk4(np.ascontiguousarray(x, float), np.ascontiguousarray(u, float),
                             float(dt), int(nsub), self.P, self.glob)

    def rk4_sens(self, x, u, dt, nsub=1):
        return self.impl.rk4_sens(np.ascontiguousarray(x, float), np.ascontiguousarray(u, float),
                                  float(dt), self.P, self.glob, int(nsub))

    def rk4_sens_many(self, X, U, dt, nsub=1):
        return self.impl.rk4_sens_many(np.ascontiguousarray(X, float), np.ascontiguousarray(U, float),
                                       float(dt), self.P, self.glob, int(nsub))

    def project(self, x):
        return self.impl.project(np.ascontiguousarray(x, float), self.P, self.glob)
