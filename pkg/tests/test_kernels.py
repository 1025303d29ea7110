"""Both kernel backends must agree; the env flag picks one."""
import os
import subprocess
import sys

import numpy as np
import pytest

from atta import kernels


@pytest.mark.parametrize("shape", [(1, 1, 1), (3, 5, 2), (8, 8, 16), (16, 7, 3)])
def test_im2col_matches(shape, rng):
    x = rng.standard_normal(shape).astype(np.float32)
    np.testing.assert_array_equal(kernels.im2col3x3_np(x), kernels.im2col3x3_nb(x))


def test_im2col_against_direct_convolution(rng):
    x = rng.standard_normal((5, 6, 2)).astype(np.float32)
    w = rng.standard_normal((3, 3, 2, 4)).astype(np.float32)
    out = (kernels.im2col3x3(x) @ w.reshape(-1, 4)).reshape(5, 6, 4)
    xp = np.pad(x, ((1, 1), (1, 1), (0, 0)))
    ref = np.zeros((5, 6, 4))
    for i in range(5):
        for j in range(6):
            ref[i, j] = np.einsum("abc,abco->o", xp[i:i + 3, j:j + 3], w)
    np.testing.assert_allclose(out, ref, rtol=1e-5, atol=1e-5)


@pytest.mark.parametrize("h,w,c", [(1, 1, 1), (4, 3, 2), (8, 8, 5)])
def test_col2im_is_adjoint_of_im2col(h, w, c, rng):
    x = rng.standard_normal((h, w, c))
    cols = rng.standard_normal((h * w, 9 * c))
    for im2col, col2im in ((kernels.im2col3x3_np, kernels.col2im3x3_np),
                           (kernels.im2col3x3_nb, kernels.col2im3x3_nb)):
        lhs = (im2col(x) * cols).sum()
        rhs = (x * col2im(cols, h, w, c)).sum()
        assert lhs == pytest.approx(rhs, rel=1e-10)
    np.testing.assert_allclose(kernels.col2im3x3_np(cols, h, w, c), kernels.col2im3x3_nb(cols, h, w, c),
                               rtol=1e-12, atol=1e-12)


def test_channel_stats_match(rng):
    z = (rng.standard_normal((300, 7)) * 3 + 5).astype(np.float32)
    m1, s1 = kernels.channel_stats_np(z)
    m2, s2 = kernels.channel_stats_nb(z)
    np.testing.assert_allclose(m1, m2, rtol=1e-12)
    np.testing.assert_allclose(s1, s2, rtol=1e-10)
    np.testing.assert_allclose(s1, z.astype(np.float64).std(axis=0), rtol=1e-10)


def test_bn_relu_kernels_match(rng):
    z = rng.standard_normal((200, 6)).astype(np.float32)
    mean = z.mean(axis=0)
    inv = (1 / np.sqrt(z.var(axis=0) + 1e-5)).astype(np.float32)
    gamma = rng.random(6).astype(np.float32) + 0.5
    beta = rng.standard_normal(6).astype(np.float32)
    f_np = kernels.bn_relu_train_forward_np(z, mean, inv, gamma, beta)
    f_nb = kernels.bn_relu_train_forward_nb(z, mean, inv, gamma, beta)
    for a, b in zip(f_np, f_nb):
        np.testing.assert_allclose(a, b, rtol=1e-5, atol=1e-6)
    dout = rng.standard_normal(z.shape).astype(np.float32)
    b_np = kernels.bn_relu_train_backward_np(dout, *f_np, inv, gamma)
    b_nb = kernels.bn_relu_train_backward_nb(dout, *f_np, inv, gamma)
    for a, b in zip(b_np, b_nb):
        np.testing.assert_allclose(a, b, rtol=1e-4, atol=1e-5)


def test_em_step_match(rng):
    x = np.r_[rng.normal(-1, 0.5, 400), rng.normal(2, 0.3, 100)]
    args = (x, np.array([0.4, 0.6]), np.array([-0.5, 1.0]), np.array([1.0, 0.7]))
    for a, b in zip(kernels.em_step_np(*args), kernels.em_step_nb(*args)):
        np.testing.assert_allclose(a, b, rtol=1e-10)


@pytest.mark.parametrize("flag,expected", [("1", "numpy"), ("0", "numba")])
def test_env_flag_selects_backend(flag, expected):
    env = dict(os.environ, ATTA_DISABLE_NUMBA=flag)
    out = subprocess.run([sys.executable, "-c", "from atta import kernels; print(kernels.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == expected
