# cython: language_level=3
"""Compiled hot loops. Semantics mirror ``catsg._kernels_py`` exactly."""

import numpy as np
cimport numpy as cnp
from libc.math cimport sin, exp, sqrt, fabs, ceil

cnp.import_array()


cdef inline void _coeffs(const double[:] p, double t, double* m, double* g, double* k) noexcept nogil:
    # p = (m0, gamma0, k0, alpha, beta, eta, omega_gamma, lam)
    m[0] = p[0] + p[3] * t
    g[0] = p[1] + p[4] * sin(p[6] * t)
    k[0] = p[2] * (1.0 - p[5] * (1.0 - exp(-p[7] * t)))


cdef inline double _accel(const double[:] p, double t, double x, double v) noexcept nogil:
    cdef double m, g, k
    _coeffs(p, t, &m, &g, &k)
    return -(g * v + k * x) / m


def rk4_oscillator(double[:, ::1] params, double[:, ::1] init, Py_ssize_t n_steps,
                   double dt, Py_ssize_t substeps):
    """Integrate m x'' + g x' + k x = 0 with fixed-step RK4.

    Returns (position, velocity, acceleration), each (n, n_steps).
    """
    cdef Py_ssize_t n = params.shape[0]
    pos_a = np.empty((n, n_steps), dtype=np.float64)
    vel_a = np.empty((n, n_steps), dtype=np.float64)
    acc_a = np.empty((n, n_steps), dtype=np.float64)
    cdef double[:, ::1] pos = pos_a
    cdef double[:, ::1] vel = vel_a
    cdef double[:, ::1] acc = acc_a
    cdef double h = dt / substeps
    cdef double x, v, t, k1x, k1v, k2x, k2v, k3x, k3v, k4x, k4v
    cdef Py_ssize_t i, j, s
    with nogil:
        for i in range(n):
            x = init[i, 0]
            v = init[i, 1]
            pos[i, 0] = x
            vel[i, 0] = v
            acc[i, 0] = _accel(params[i], 0.0, x, v)
            for j in range(1, n_steps):
                for s in range(substeps):
                    t = (j - 1) * dt + s * h
                    k1x = v
                    k1v = _accel(params[i], t, x, v)
                    k2x = v + 0.5 * h * k1v
                    k2v = _accel(params[i], t + 0.5 * h, x + 0.5 * h * k1x, k2x)
                    k3x = v + 0.5 * h * k2v
                    k3v = _accel(params[i], t + 0.5 * h, x + 0.5 * h * k2x, k3x)
                    k4x = v + h * k3v
                    k4v = _accel(params[i], t + h, x + h * k3x, k4x)
                    x = x + h / 6.0 * (k1x + 2.0 * k2x + 2.0 * k3x + k4x)
                    v = v + h / 6.0 * (k1v + 2.0 * k2v + 2.0 * k3v + k4v)
                pos[i, j] = x
                vel[i, j] = v
                acc[i, j] = _accel(params[i], j * dt, x, v)
    return pos_a, vel_a, acc_a


def rbf_kernel_mean(double[:, ::1] a, double[:, ::1] b, double sigma):
    """Mean of exp(-|a_i - b_j|^2 / (2 sigma^2)) over all (i, j)."""
    cdef Py_ssize_t n = a.shape[0], m = b.shape[0], d = a.shape[1]
    cdef Py_ssize_t i, j, l
    cdef double total = 0.0, row, sq, diff
    cdef double scale = 1.0 / (2.0 * sigma * sigma)
    with nogil:
        for i in range(n):
            row = 0.0
            for j in range(m):
                sq = 0.0
                for l in range(d):
                    diff = a[i, l] - b[j, l]
                    sq = sq + diff * diff
                row = row + exp(-sq * scale)
            total = total + row
    return total / (n * m)


def lowess_curve(double[::1] xs, double[::1] ys, double[::1] grid, double frac):
    """Tricube-weighted local linear fit evaluated at each grid point."""
    cdef Py_ssize_t n = xs.shape[0], g = grid.shape[0]
    cdef Py_ssize_t q = <Py_ssize_t>ceil(frac * n)
    if q < 2:
        q = 2
    if q > n:
        q = n
    out_a = np.empty(g, dtype=np.float64)
    cdef double[::1] out = out_a
    dist_a = np.empty(n, dtype=np.float64)
    cdef double[::1] dist = dist_a
    cdef Py_ssize_t i, j
    cdef double x0, hbw, u, w, sw, swx, swy, swxx, swxy, mx, my, vxx, vxy
    for i in range(g):
        x0 = grid[i]
        for j in range(n):
            dist[j] = fabs(xs[j] - x0)
        hbw = np.partition(dist_a, q - 1)[q - 1]
        with nogil:
            if hbw <= 0.0:
                hbw = 1e-300
            hbw = hbw * 1.000001
            sw = 0.0
            swx = 0.0
            swy = 0.0
            for j in range(n):
                u = dist[j] / hbw
                if u < 1.0:
                    w = 1.0 - u * u * u
                    w = w * w * w
                    sw = sw + w
                    swx = swx + w * xs[j]
                    swy = swy + w * ys[j]
            mx = swx / sw
            my = swy / sw
            vxx = 0.0
            vxy = 0.0
            for j in range(n):
                u = dist[j] / hbw
                if u < 1.0:
                    w = 1.0 - u * u * u
                    w = w * w * w
                    vxx = vxx + w * (xs[j] - mx) * (xs[j] - mx)
                    vxy = vxy + w * (xs[j] - mx) * (ys[j] - my)
            if vxx > 1e-12 * sw * (fabs(mx) * fabs(mx) + 1.0):
                out[i] = my + vxy / vxx * (x0 - mx)
            else:
                out[i] = my
    return out_a
