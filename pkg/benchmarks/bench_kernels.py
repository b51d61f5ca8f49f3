"""Time the Cython core against the numpy fallback on each hot kernel.

    python benchmarks/bench_kernels.py [--repeat 5] [--json out.json]
"""

import argparse
import json
import timeit

import numpy as np

from catsg import kernels


def _oscillator_inputs(rng, n):
    params = np.column_stack([
        rng.uniform(1, 3, n), rng.uniform(0.1, 0.5, n), rng.uniform(1, 4, n), rng.uniform(0, 0.1, n),
        rng.uniform(0, 0.1, n), rng.uniform(0, 0.3, n), rng.uniform(0.5, 2, n), rng.uniform(0, 0.05, n),
    ])
    return params, rng.uniform(-2, 2, (n, 2))


def cases(rng):
    params, init = _oscillator_inputs(rng, 1000)
    a, b = rng.normal(size=(1000, 64)), rng.normal(size=(1000, 64))
    xs = rng.uniform(0, 1, 2000)
    ys = np.sin(6 * xs) + 0.1 * rng.normal(size=2000)
    grid = np.linspace(0, 1, 100)
    return {
        "rk4_oscillator (1000 x 64 steps x 16 substeps)":
            lambda be: kernels.rk4_oscillator(params, init, 64, 0.25, 16, backend=be),
        "rbf_kernel_mean (1000 x 1000, d=64)":
            lambda be: kernels.rbf_kernel_mean(a, b, 8.0, backend=be),
        "lowess_curve (2000 points, 100 grid)":
            lambda be: kernels.lowess_curve(xs, ys, grid, 0.3, backend=be),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--json", help="also write results to this file")
    args = ap.parse_args()
    backends = kernels.available_backends()
    rng = np.random.default_rng(0)
    results = {}
    print(f"{'kernel':50s}" + "".join(f"{b:>12s}" for b in backends) + ("     speedup" if len(backends) > 1 else ""))
    for name, fn in cases(rng).items():
        row = {}
        for be in backends:
            fn(be)  # warm-up
            row[be] = min(timeit.repeat(lambda: fn(be), number=1, repeat=args.repeat))
        results[name] = row
        line = f"{name:50s}" + "".join(f"{row[b] * 1e3:10.2f}ms" for b in backends)
        if len(backends) > 1:
            line += f"{row['python'] / row['cython']:11.1f}x"
        print(line)
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(results, fh, indent=2)


if __name__ == "__main__":
    main()
