"""Time every hot kernel under the numba and numpy backends.

    python benchmarks/bench_kernels.py [--repeat 5]
"""
import argparse
import time

import numpy as np

from evresid import kernels
from evresid._accel import HAVE_NUMBA


def cases(rng):
    n = 200_000
    yield "voxel_scatter", kernels.voxel_scatter, (
        rng.integers(0, 128, n), rng.integers(0, 96, n), rng.uniform(0, 1, n), rng.choice([-1.0, 1.0], n), 2, 96, 128)
    yield "splat", kernels.splat, (rng.uniform(0, 127, n), rng.uniform(0, 95, n), np.ones((n, 1)), 96, 128)
    maps = rng.standard_normal((768, 24, 32))
    cx, cy = rng.uniform(0, 31, (768, 49)), rng.uniform(0, 23, (768, 49))
    yield "gather_maps", kernels.gather_maps, (maps, cx, cy)
    yield "gather_maps_backward", kernels.gather_maps_backward, (maps, cx, cy, rng.standard_normal((768, 49)))
    prev = rng.uniform(-1, 1, 128 * 96)
    yield "crossings", lambda *a, **k: kernels.crossings(*a[:2], a[2].copy(), *a[3:], **k), (
        prev, prev + rng.normal(0, 0.3, prev.size), prev.copy(), 0.1, 0.0, 1.0)
    ys, xs = np.mgrid[0:96, 0:128].astype(float)
    yield "render_blobs", kernels.render_blobs, (
        xs, ys, rng.uniform(0, 128, 60), rng.uniform(0, 96, 60), rng.standard_normal(60), 3.0)


def best_of(fn, args, use_numba, repeat):
    fn(*args, use_numba=use_numba)  # warm-up / compile
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn(*args, use_numba=use_numba)
        times.append(time.perf_counter() - t)
    return min(times)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    print(f"{'kernel':<22}{'numpy ms':>10}{'numba ms':>10}{'speedup':>9}")
    for name, fn, fargs in cases(rng):
        t_np = best_of(fn, fargs, False, args.repeat)
        if HAVE_NUMBA:
            t_nb = best_of(fn, fargs, True, args.repeat)
            print(f"{name:<22}{t_np * 1e3:>10.2f}{t_nb * 1e3:>10.2f}{t_np / t_nb:>8.1f}x")
        else:
            print(f"{name:<22}{t_np * 1e3:>10.2f}{'-':>10}{'-':>9}")


if __name__ == "__main__":
    main()
