"""The numba and numpy kernel paths compute the same thing."""

import json
import os
import subprocess
import sys

import numpy as np
import pytest

from fmgteleop.autodiff import kernels

needs_numba = pytest.mark.skipif(not kernels.NUMBA_AVAILABLE, reason="numba not installed")


@needs_numba
@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_im2col_col2im_paths_agree_bitwise(dtype):
    rng = np.random.default_rng(0)
    for kh, kw, sh, sw in [(3, 3, 1, 1), (2, 3, 2, 1), (4, 4, 2, 2), (1, 1, 1, 1)]:
        oh, ow = 5, 4
        hp, wp = (oh - 1) * sh + kh, (ow - 1) * sw + kw
        xpad = rng.normal(size=(2, 3, hp, wp)).astype(dtype)
        a = kernels.im2col2d_numpy(xpad, kh, kw, sh, sw, oh, ow)
        b = kernels.im2col2d_numba(xpad, kh, kw, sh, sw, oh, ow)
        assert np.array_equal(a, b)
        cols = rng.normal(size=a.shape).astype(dtype)
        a = kernels.col2im2d_numpy(cols, 2, 3, hp, wp, kh, kw, sh, sw, oh, ow)
        b = kernels.col2im2d_numba(cols, 2, 3, hp, wp, kh, kw, sh, sw, oh, ow)
        assert np.array_equal(a, b)


def test_col2im_is_adjoint_of_im2col():
    rng = np.random.default_rng(1)
    xpad = rng.normal(size=(2, 3, 9, 8))
    cols = kernels.im2col2d(xpad, 3, 2, 2, 2, 4, 4)
    g = rng.normal(size=cols.shape)
    back = kernels.col2im2d(g, 2, 3, 9, 8, 3, 2, 2, 2, 4, 4)
    assert np.vdot(cols, g) == pytest.approx(np.vdot(xpad, back), rel=1e-12)


@needs_numba
@pytest.mark.parametrize("dtype,rtol", [(np.float64, 1e-12), (np.float32, 1e-4)])
def test_batchnorm_paths_agree(dtype, rtol):
    rng = np.random.default_rng(2)
    x3 = rng.normal(3.0, 2.0, size=(16, 5, 30)).astype(dtype)
    m = x3.shape[0] * x3.shape[2]
    for a, b in zip(kernels.bn_moments_numpy(x3), kernels.bn_moments_numba(x3)):
        np.testing.assert_allclose(a, b, rtol=rtol)
    mean, var = kernels.bn_moments_numpy(x3)
    inv = (1.0 / np.sqrt(var + 1e-5)).astype(dtype)
    scale, shift = rng.normal(size=5).astype(dtype), rng.normal(size=5).astype(dtype)
    for a, b in zip(kernels.bn_normalize_numpy(x3, mean, inv, scale, shift),
                    kernels.bn_normalize_numba(x3, mean, inv, scale, shift)):
        np.testing.assert_allclose(a, b, rtol=rtol, atol=rtol)
    g3 = rng.normal(size=x3.shape).astype(dtype)
    xhat = kernels.bn_normalize_numpy(x3, mean, inv, scale, shift)[0]
    k = (scale * inv / m).astype(dtype)
    for a, b in zip(kernels.bn_backward_numpy(g3, xhat, k, dtype(m)), kernels.bn_backward_numba(g3, xhat, k, dtype(m))):
        np.testing.assert_allclose(a, b, rtol=rtol, atol=rtol * np.abs(a).max())


def test_bn_moments_match_numpy_reductions():
    x3 = np.random.default_rng(3).normal(size=(4, 3, 7))
    mean, var = kernels.bn_moments(x3)
    per = np.moveaxis(x3, 1, 0).reshape(3, -1)
    np.testing.assert_allclose(mean, per.mean(1), rtol=1e-12)
    np.testing.assert_allclose(var, per.var(1), rtol=1e-12)


_PROBE = (
    "import json\nimport numpy as np\n"
    "from fmgteleop.autodiff import kernels\n"
    "from fmgteleop.models import ModelSpec, build_model\n"
    "m = build_model(ModelSpec('tcn', H=12, dims={'enc_channels': 4, 'temporal_channels': 8, 'kernel_size': 3}))\n"
    "X = np.random.default_rng(0).normal(0, 50, (5, 12, 4, 7))\n"
    "print(kernels.BACKEND)\n"
    "print(json.dumps(m.predict_batch(X).astype(float).ravel().tolist()))\n"
)


def _probe(flag):
    env = dict(os.environ, FMGTELEOP_DISABLE_NUMBA=flag)
    out = subprocess.run([sys.executable, "-c", _PROBE], env=env, capture_output=True, text=True, check=True)
    backend, values = out.stdout.strip().splitlines()
    return backend, np.array(json.loads(values))


@needs_numba
def test_env_flag_selects_backend_and_results_match():
    b_on, y_on = _probe("0")
    b_off, y_off = _probe("1")
    assert (b_on, b_off) == ("numba", "numpy")
    np.testing.assert_allclose(y_on, y_off, rtol=0, atol=1e-3)
