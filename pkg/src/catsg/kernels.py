"""Numeric hot loops, dispatched to the Cython core when it is built.

Set ``CATSG_PURE_PYTHON=1`` to force the numpy fallback. ``BACKEND`` names
the implementation selected at import time.
"""

import os

import numpy as np

from . import _kernels_py

if os.environ.get("CATSG_PURE_PYTHON", "") not in ("", "0"):
    _impl = _kernels_py
    BACKEND = "python"
else:
    try:
        from . import _core as _impl

        BACKEND = "cython"
    except ImportError:
        _impl = _kernels_py
        BACKEND = "python"


def rk4_oscillator(params, init, n_steps, dt, substeps=16, backend=None):
    """RK4 integration of a batch of oscillators.

    ``params`` is (n, 8): m0, gamma0, k0, alpha, beta, eta, omega_gamma, lam.
    ``init`` is (n, 2): x0, v0. Returns position, velocity, acceleration,
    each (n, n_steps), sampled every ``dt`` with ``substeps`` RK4 steps in
    between grid points.
    """
    impl = _pick(backend)
    params = np.ascontiguousarray(params, dtype=np.float64)
    init = np.ascontiguousarray(init, dtype=np.float64)
    return impl.rk4_oscillator(params, init, int(n_steps), float(dt), int(substeps))


def rbf_kernel_mean(a, b, sigma, backend=None):
    """Mean Gaussian kernel value between the rows of ``a`` and ``b``."""
    impl = _pick(backend)
    a = np.ascontiguousarray(a, dtype=np.float64)
    b = np.ascontiguousarray(b, dtype=np.float64)
    return float(impl.rbf_kernel_mean(a, b, float(sigma)))


def lowess_curve(xs, ys, grid, frac, backend=None):
    impl = _pick(backend)
    return impl.lowess_curve(
        np.ascontiguousarray(xs, dtype=np.float64),
        np.ascontiguousarray(ys, dtype=np.float64),
        np.ascontiguousarray(grid, dtype=np.float64),
        float(frac),
    )


def available_backends():
    out = ["python"]
    try:
        from . import _core  # noqa: F401

        out.insert(0, "cython")
    except ImportError:
        pass
    return out


def _pick(backend):
    if backend is None:
        return _impl
    if backend == "python":
        return _kernels_py
    if backend == "cython":
        from . import _core

        return _core
    raise ValueError(f"unknown kernel backend {backend!r}")
