import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, strategies as st

from xctbench import kernels

needs_ext = pytest.mark.skipif("cython" not in kernels.available_backends(), reason="extension not built")


def _angles(rng, k):
    a = rng.uniform(0, np.pi, k)
    return np.cos(a), np.sin(a)


@needs_ext
@pytest.mark.parametrize("seed", range(10))
def test_project_backends_agree(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(4, 20))
    img = rng.random((n, n))
    c, s = _angles(rng, 7)
    n_det = int(rng.integers(n, 2 * n))
    a = kernels.project(img, c, s, n_det, backend="python")
    b = kernels.project(img, c, s, n_det, backend="cython")
    assert np.allclose(a, b, rtol=1e-12, atol=1e-12)


@needs_ext
@pytest.mark.parametrize("seed", range(10))
def test_backproject_backends_agree(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(4, 20))
    c, s = _angles(rng, 5)
    filt = rng.standard_normal((5, int(rng.integers(n, 2 * n))))
    a = kernels.backproject(filt, c, s, n, backend="python")
    b = kernels.backproject(filt, c, s, n, backend="cython")
    assert np.allclose(a, b, rtol=1e-12, atol=1e-12)


def _im2col_loops(xp, k, stride):
    nb, nc, hp, wp = xp.shape
    ho, wo = (hp - k) // stride + 1, (wp - k) // stride + 1
    out = np.zeros((nb, nc * k * k, ho * wo))
    for b in range(nb):
        for c in range(nc):
            for di in range(k):
                for dj in range(k):
                    for i in range(ho):
                        for j in range(wo):
                            out[b, (c * k + di) * k + dj, i * wo + j] = xp[b, c, i * stride + di, j * stride + dj]
    return out


@given(st.integers(0, 10_000), st.integers(1, 3), st.integers(1, 2))
def test_im2col_matches_loops_and_col2im_is_adjoint(seed, k, stride):
    rng = np.random.default_rng(seed)
    xp = rng.standard_normal((2, 3, 6, 5))
    ref = _im2col_loops(xp, k, stride)
    for be in kernels.available_backends():
        cols = kernels.im2col(xp, k, stride, backend=be)
        assert np.array_equal(cols, ref)
        g = rng.standard_normal(cols.shape)
        back = kernels.col2im(g, 3, 6, 5, k, stride, backend=be)
        assert np.sum(cols * g) == pytest.approx(np.sum(xp * back), rel=1e-10, abs=1e-10)


def test_backend_selection():
    assert kernels.get_backend("python") is kernels._fallback
    with pytest.raises(ValueError):
        kernels.get_backend("fortran")
    env = dict(os.environ, XCTBENCH_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", "from xctbench import kernels; print(kernels.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"
