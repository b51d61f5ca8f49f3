"""Split-dependence diagnostics and significance aggregation."""

import csv
import math
from dataclasses import dataclass

import numpy as np
from scipy import special, stats

from . import kernels


def _by_split(x, c, splits):
    x, c = np.asarray(x, dtype=np.float64).ravel(), np.asarray(c, dtype=np.float64).ravel()
    splits = np.asarray(splits).ravel()
    if not (len(x) == len(c) == len(splits)):
        raise ValueError("x, c and split labels must have equal length")
    names = list(dict.fromkeys(splits.tolist()))
    return {s: (x[splits == s], c[splits == s]) for s in names}


def lowess_diagnostic(x, c, splits, frac=0.3, grid_size=50, backend=None):
    """Local linear (tricube) fits of x on a scalar context, one per split.

    All curves share a grid spanning the pooled context range; grid points
    outside a split's own range are NaN. Returns rows of
    (split, c, fit).
    """
    if not 0 < frac <= 1:
        raise ValueError(f"frac must lie in (0, 1], got {frac}")
    groups = _by_split(x, c, splits)
    c_all = np.asarray(c, dtype=np.float64).ravel()
    if c_all.size == 0 or np.ptp(c_all) == 0:
        raise ValueError("context is constant; no local neighborhoods to fit")
    grid = np.linspace(c_all.min(), c_all.max(), grid_size)
    rows = []
    for name, (xs, cs) in groups.items():
        if len(xs) < 2:
            raise ValueError(f"split {name!r} has {len(xs)} point(s); need at least 2")
        if np.ptp(cs) == 0:
            raise ValueError(f"context is constant within split {name!r}")
        fit = kernels.lowess_curve(cs, xs, grid, frac, backend)
        inside = (grid >= cs.min()) & (grid <= cs.max())
        rows.extend((name, float(g), float(f) if ok else math.nan) for g, f, ok in zip(grid, fit, inside))
    return rows


def bin_edges(c_train, n_bins=10):
    """Interior edges from the train range; outer bins are open."""
    c_train = np.asarray(c_train, dtype=np.float64).ravel()
    if n_bins < 1:
        raise ValueError("n_bins must be >= 1")
    if n_bins == 1:
        return np.array([-np.inf, np.inf])
    inner = np.linspace(c_train.min(), c_train.max(), n_bins + 1)[1:-1]
    return np.concatenate([[-np.inf], inner, [np.inf]])


@dataclass
class BinStat:
    bin: int
    lo: float
    hi: float
    split: str
    mean: float
    se: float
    count: int


def binned_means(x, c, splits, edges):
    """Mean, standard error and count of x per (context bin, split).

    Empty bins are reported with count 0 and NaN statistics.
    """
    edges = np.asarray(edges, dtype=np.float64)
    out = []
    for name, (xs, cs) in _by_split(x, c, splits).items():
        idx = np.searchsorted(edges[1:-1], cs, side="right")
        for b in range(len(edges) - 1):
            v = xs[idx == b]
            n = len(v)
            mean = float(v.mean()) if n else math.nan
            se = float(v.std(ddof=1) / math.sqrt(n)) if n > 1 else math.nan
            out.append(BinStat(b, float(edges[b]), float(edges[b + 1]), str(name), mean, se, n))
    return out


def welch(mean_a, std_a, mean_b, std_b, n_a, n_b=None):
    """Welch t statistic, degrees of freedom and two-sided p-value."""
    n_b = n_a if n_b is None else n_b
    if n_a < 2 or n_b < 2:
        raise ValueError("Welch test needs n >= 2 per group")
    va, vb = std_a**2 / n_a, std_b**2 / n_b
    if va + vb == 0:
        raise ZeroDivisionError("both groups have zero variance")
    t = (mean_a - mean_b) / math.sqrt(va + vb)
    df = (va + vb) ** 2 / (va**2 / (n_a - 1) + vb**2 / (n_b - 1))
    return t, df, float(2.0 * stats.t.sf(abs(t), df))


def combine_z(zs):
    zs = np.asarray(zs, dtype=np.float64)
    if zs.size == 0:
        raise ValueError("no tasks to combine")
    z = float(zs.sum() / math.sqrt(zs.size))
    return z, float(special.erfc(abs(z) / math.sqrt(2.0)))


@dataclass
class StoufferResult:
    z: float
    p: float
    task_z: list
    notes: list


def stouffer_combine(tasks):
    """Combine per-task Welch tests into one signed Stouffer Z.

    ``tasks`` holds tuples (mean_a, std_a, mean_b, std_b, n) or
    (mean_a, std_a, mean_b, std_b, n_a, n_b). Tasks with zero variance on
    both sides are skipped with a note.
    """
    zs, notes = [], []
    for i, task in enumerate(tasks):
        try:
            t, df, p = welch(*task)
        except ZeroDivisionError:
            notes.append(f"task {i}: zero variance in both groups, skipped")
            continue
        # signed normal score with the same two-sided p: isf(p / 2) computed without cancellation
        zs.append(math.copysign(float(stats.norm.isf(stats.t.sf(abs(t), df))), t))
    z, p = combine_z(zs)
    return StoufferResult(z=z, p=p, task_z=zs, notes=notes)


def write_lowess_csv(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["split", "c", "fit"])
        w.writerows(rows)


def write_bins_csv(bins, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bin", "lo", "hi", "split", "mean", "se", "count"])
        for b in bins:
            w.writerow([b.bin, b.lo, b.hi, b.split, b.mean, b.se, b.count])
