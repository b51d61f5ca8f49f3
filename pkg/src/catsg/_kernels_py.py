"""Pure numpy implementations of the compiled kernels in ``_core.pyx``."""

import math

import numpy as np


def _coeffs(p, t):
    m = p[:, 0] + p[:, 3] * t
    g = p[:, 1] + p[:, 4] * np.sin(p[:, 6] * t)
    k = p[:, 2] * (1.0 - p[:, 5] * (1.0 - np.exp(-p[:, 7] * t)))
    return m, g, k


def _accel(p, t, x, v):
    m, g, k = _coeffs(p, t)
    return -(g * v + k * x) / m


def rk4_oscillator(params, init, n_steps, dt, substeps):
    params = np.ascontiguousarray(params, dtype=np.float64)
    init = np.ascontiguousarray(init, dtype=np.float64)
    n = params.shape[0]
    pos = np.empty((n, n_steps))
    vel = np.empty((n, n_steps))
    acc = np.empty((n, n_steps))
    x = init[:, 0].copy()
    v = init[:, 1].copy()
    pos[:, 0], vel[:, 0] = x, v
    acc[:, 0] = _accel(params, 0.0, x, v)
    h = dt / substeps
    for j in range(1, n_steps):
        for s in range(substeps):
            t = (j - 1) * dt + s * h
            k1x = v
            k1v = _accel(params, t, x, v)
            k2x = v + 0.5 * h * k1v
            k2v = _accel(params, t + 0.5 * h, x + 0.5 * h * k1x, k2x)
            k3x = v + 0.5 * h * k2v
            k3v = _accel(params, t + 0.5 * h, x + 0.5 * h * k2x, k3x)
            k4x = v + h * k3v
            k4v = _accel(params, t + h, x + h * k3x, k4x)
            x = x + h / 6.0 * (k1x + 2.0 * k2x + 2.0 * k3x + k4x)
            v = v + h / 6.0 * (k1v + 2.0 * k2v + 2.0 * k3v + k4v)
        pos[:, j], vel[:, j] = x, v
        acc[:, j] = _accel(params, j * dt, x, v)
    return pos, vel, acc


def rbf_kernel_mean(a, b, sigma, chunk_elems=4_000_000):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = 1.0 / (2.0 * sigma * sigma)
    rows = max(1, chunk_elems // max(1, b.shape[0] * a.shape[1]))
    total = 0.0
    for i in range(0, a.shape[0], rows):
        diff = a[i:i + rows, None, :] - b[None, :, :]
        total += np.exp(-np.einsum("ijk,ijk->ij", diff, diff) * scale).sum()
    return total / (a.shape[0] * b.shape[0])


def lowess_curve(xs, ys, grid, frac):
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    grid = np.asarray(grid, dtype=np.float64)
    n = xs.shape[0]
    q = min(n, max(2, int(math.ceil(frac * n))))
    out = np.empty(grid.shape[0])
    for i, x0 in enumerate(grid):
        dist = np.abs(xs - x0)
        hbw = np.partition(dist, q - 1)[q - 1]
        if hbw <= 0.0:
            hbw = 1e-300
        hbw *= 1.000001
        u = dist / hbw
        w = np.where(u < 1.0, (1.0 - u**3) ** 3, 0.0)
        sw = w.sum()
        mx = (w * xs).sum() / sw
        my = (w * ys).sum() / sw
        vxx = (w * (xs - mx) ** 2).sum()
        vxy = (w * (xs - mx) * (ys - my)).sum()
        if vxx > 1e-12 * sw * (abs(mx) ** 2 + 1.0):
            out[i] = my + vxy / vxx * (x0 - mx)
        else:
            out[i] = my
    return out
