"""The jitted kernels and their numpy twins must agree."""
import numpy as np
import pytest

from atdn import kernels
from atdn._accel import NUMBA_AVAILABLE

pytestmark = pytest.mark.skipif(not NUMBA_AVAILABLE, reason="numba not installed")


def naive_im2col(x, kh, kw, stride, pad):
    n, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    out = np.zeros((n, c * kh * kw, oh * ow), dtype=x.dtype)
    for b in range(n):
        for ci in range(c):
            for i in range(kh):
                for j in range(kw):
                    row = (ci * kh + i) * kw + j
                    for y in range(oh):
                        for z in range(ow):
                            out[b, row, y * ow + z] = xp[b, ci, y * stride + i, z * stride + j]
    return out


@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1), (3, 2)])
def test_im2col_paths_match_loop(rng, stride, pad):
    x = rng.normal(size=(2, 3, 9, 8)).astype(np.float32)
    ref = naive_im2col(x, 3, 2, stride, pad)
    assert np.array_equal(kernels.im2col_np(x, 3, 2, stride, pad), ref)
    assert np.array_equal(kernels.im2col_nb(x, 3, 2, stride, pad), ref)


@pytest.mark.parametrize("stride,pad", [(1, 0), (2, 1)])
def test_col2im_is_adjoint_of_im2col(rng, stride, pad):
    x = rng.normal(size=(2, 2, 7, 6))
    cols = kernels.im2col_np(x, 3, 3, stride, pad)
    g = rng.normal(size=cols.shape)
    for col2im in (kernels.col2im_np, kernels.col2im_nb):
        back = col2im(g, x.shape, 3, 3, stride, pad)
        assert np.sum(cols * g) == pytest.approx(np.sum(x * back), rel=1e-12)
    assert np.allclose(kernels.col2im_np(g, x.shape, 3, 3, stride, pad),
                       kernels.col2im_nb(g, x.shape, 3, 3, stride, pad), atol=1e-12)


def test_segment_error_paths_agree(rng):
    from atdn.geometry import axis_angle_to_matrix
    n = 300
    rg = np.stack([axis_angle_to_matrix([0, 0.01 * i, 0]) for i in range(n)])
    tg = np.cumsum(rng.uniform(0.5, 1.5, size=(n, 3)), axis=0)
    re = np.stack([axis_angle_to_matrix(rng.normal(scale=0.01, size=3)) @ r for r in rg])
    te = tg + rng.normal(scale=0.1, size=tg.shape)
    dist = np.concatenate([[0], np.cumsum(np.linalg.norm(np.diff(tg, axis=0), axis=1))])
    lengths = np.array([10.0, 50.0, 100.0, 400.0])
    a = kernels.segment_errors_np(rg, tg, re, te, dist, lengths, 3)
    b = kernels.segment_errors_nb(rg, tg, re, te, dist, lengths, 3)
    assert np.array_equal(a[2], b[2])
    assert np.allclose(a[0], b[0], rtol=0, atol=1e-12)
    assert np.allclose(a[1], b[1], rtol=0, atol=1e-12)


def test_value_noise_paths_agree(rng):
    xs, ys = rng.uniform(-50, 50, size=(2, 40, 40))
    a = kernels.value_noise_np(xs, ys, 7, 3)
    b = kernels.value_noise_nb(xs, ys, 7, 3)
    assert np.array_equal(a, b)
    assert 0.0 <= a.min() and a.max() <= 1.0
    assert not np.array_equal(a, kernels.value_noise_np(xs, ys, 8, 3))


def test_env_flag_selects_numpy_path():
    import os
    import subprocess
    import sys
    code = "from atdn import kernels; print(kernels.im2col is kernels.im2col_np)"
    env = {**os.environ, "ATDN_DISABLE_NUMBA": "1"}
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "True"
