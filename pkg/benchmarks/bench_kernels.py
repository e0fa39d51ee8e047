"""Compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat N]

Times the calls the solver makes most often on the bundled scenarios and
checks that both backends agree to 1e-12.
"""
from __future__ import annotations

import argparse
import timeit

import numpy as np

from coopmpc import _kernels_py
from coopmpc.closed_loop import PRESETS
from coopmpc.kernels import BACKEND, PlanarKernel, backend


def cases(kernel, x, u, h):
    X = np.repeat(x[None], 5, axis=0)
    U = np.repeat(u[None], 5, axis=0)
    return {
        "rhs": lambda: kernel.rhs(x, u),
        "rk4 (10 sub-steps)": lambda: kernel.rk4(x, u, h, 10),
        "rk4_sens": lambda: kernel.rk4_sens(x, u, h),
        "rk4_sens_many (5 nodes)": lambda: kernel.rk4_sens_many(X, U, h),
        "project": lambda: kernel.project(x),
    }


def _flat(r):
    if isinstance(r, tuple):
        return np.concatenate([np.ravel(a) for a in r])
    return np.ravel(r)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    if BACKEND != "cython":
        print("compiled kernels unavailable; only the numpy fallback can be timed")
    print(f"{'scenario':10s} {'kernel':26s} {'numpy [us]':>12s} {'cython [us]':>12s} {'speed-up':>9s}")
    for name, make in PRESETS.items():
        sc = make()
        fast = PlanarKernel(sc.system, backend)
        slow = PlanarKernel(sc.system, _kernels_py)
        x, h = sc.x0, sc.config.h
        u = np.linspace(-1.0, 1.0, sc.system.nu)
        fc, sl = cases(fast, x, u, h), cases(slow, x, u, h)
        for key in sl:
            a, b = _flat(sl[key]()), _flat(fc[key]())
            if not np.allclose(a, b, rtol=1e-12, atol=1e-12):
                raise SystemExit(f"{name} {key}: backends disagree by {np.abs(a - b).max():.3e}")
            n = 20 if key.startswith("rk4_sens") else 200
            t_slow = min(timeit.repeat(sl[key], number=n, repeat=args.repeat)) / n * 1e6
            if BACKEND == "cython":
                t_fast = min(timeit.repeat(fc[key], number=n, repeat=args.repeat)) / n * 1e6
                print(f"{name:10s} {key:26s} {t_slow:12.1f} {t_fast:12.1f} {t_slow / t_fast:8.1f}x")
            else:
                print(f"{name:10s} {key:26s} {t_slow:12.1f} {'-':>12s} {'-':>9s}")


if __name__ == "__main__":
    main()
