import os
import subprocess
import sys

import numpy as np
import pytest

from evresid import kernels
from evresid._accel import HAVE_NUMBA

needs_numba = pytest.mark.skipif(not HAVE_NUMBA, reason="numba not installed")


def both(fn, *args, **kw):
    return fn(*args, use_numba=False, **kw), fn(*args, use_numba=True, **kw)


@needs_numba
@pytest.mark.parametrize("seed", range(3))
def test_voxel_scatter_parity(seed):
    r = np.random.default_rng(seed)
    n = 2000
    args = (r.integers(0, 20, n), r.integers(0, 16, n), r.uniform(0, 1, n), r.choice([-1.0, 1.0], n), 3, 16, 20)
    a, b = both(kernels.voxel_scatter, *args)
    assert a.tobytes() == b.tobytes()


@needs_numba
@pytest.mark.parametrize("seed", range(3))
def test_splat_parity(seed):
    r = np.random.default_rng(seed)
    n = 1500
    a, b = both(kernels.splat, r.uniform(-2, 22, n), r.uniform(-2, 18, n), r.standard_normal((n, 3)), 16, 20)
    assert a.tobytes() == b.tobytes()


@needs_numba
@pytest.mark.parametrize("seed", range(3))
def test_gather_parity(seed):
    r = np.random.default_rng(seed)
    maps = r.standard_normal((12, 7, 9))
    cx, cy = r.uniform(-2, 10, (12, 25)), r.uniform(-2, 8, (12, 25))
    a, b = both(kernels.gather_maps, maps, cx, cy)
    assert a.tobytes() == b.tobytes()
    g = r.standard_normal((12, 25))
    ga, gb = both(kernels.gather_maps_backward, maps, cx, cy, g)
    for x, y in zip(ga, gb):
        np.testing.assert_allclose(x, y, rtol=0, atol=1e-12)


@needs_numba
def test_crossings_parity():
    r = np.random.default_rng(4)
    prev, new = r.uniform(-1, 1, 500), r.uniform(-1, 1, 500)
    ref_a, ref_b = prev.copy(), prev.copy()
    a = kernels.crossings(prev, new, ref_a, 0.1, 0.0, 10.0, use_numba=False)
    b = kernels.crossings(prev, new, ref_b, 0.1, 0.0, 10.0, use_numba=True)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x, y) if x.dtype.kind != "f" else np.testing.assert_allclose(x, y, atol=1e-9)
    np.testing.assert_array_equal(ref_a, ref_b)


@needs_numba
def test_render_blobs_parity():
    r = np.random.default_rng(5)
    ys, xs = np.mgrid[0:20, 0:24].astype(float)
    args = (xs, ys, r.uniform(0, 24, 30), r.uniform(0, 20, 30), r.standard_normal(30), 2.5)
    (va, ca), (vb, cb) = both(kernels.render_blobs, *args)
    np.testing.assert_allclose(va, vb, atol=1e-12)
    np.testing.assert_allclose(ca, cb, atol=1e-12)


def test_disable_flag_selects_numpy():
    code = "from evresid._accel import backend; print(backend())"
    env = dict(os.environ, EVRESID_DISABLE_NUMBA="1")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "numpy"
