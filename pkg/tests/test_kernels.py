import os
import subprocess
import sys

import numpy as np
import pytest

from docclean import _pykernels, kernels

compiled = pytest.importorskip("docclean._ckernels", reason="compiled kernels not built")


@pytest.mark.parametrize("cin,cout", [(3, 16), (16, 16), (16, 32), (32, 64), (64, 64), (16, 1), (16, 3), (5, 24), (7, 80), (2, 130)])
def test_conv_backends_agree_float32(cin, cout):
    rng = np.random.default_rng(cin * 1000 + cout)
    x = rng.standard_normal((2, 9, 13, cin)).astype(np.float32)
    k = rng.standard_normal((3, 3, cin, cout)).astype(np.float32)
    b = rng.standard_normal(cout).astype(np.float32)
    ref = _pykernels.conv3x3(x.astype(np.float64), k.astype(np.float64), b.astype(np.float64))
    np.testing.assert_allclose(compiled.conv3x3(x, k, b), ref, rtol=1e-5, atol=1e-4)
    np.testing.assert_allclose(_pykernels.conv3x3(x, k, b), ref, rtol=1e-5, atol=1e-4)
    dy = rng.standard_normal((2, 9, 13, cout)).astype(np.float32)
    gref = _pykernels.conv3x3_kernel_grad(x.astype(np.float64), dy.astype(np.float64))
    np.testing.assert_allclose(compiled.conv3x3_kernel_grad(x, dy), gref, rtol=1e-4, atol=1e-3)


def test_conv_backends_agree_float64_exactly_enough():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((1, 6, 5, 4))
    k = rng.standard_normal((3, 3, 4, 6))
    np.testing.assert_allclose(compiled.conv3x3(x, k), _pykernels.conv3x3(x, k), rtol=1e-12, atol=1e-12)
    dy = rng.standard_normal((1, 6, 5, 6))
    np.testing.assert_allclose(compiled.conv3x3_kernel_grad(x, dy), _pykernels.conv3x3_kernel_grad(x, dy),
                               rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_bn_backends_agree(dtype):
    rng = np.random.default_rng(2)
    x2 = (rng.standard_normal((500, 7)) * 3 + 2).astype(dtype)
    dy2 = rng.standard_normal((500, 7)).astype(dtype)
    m1, v1 = compiled.bn_stats(x2)
    m2, v2 = _pykernels.bn_stats(x2)
    np.testing.assert_allclose(m1, m2, rtol=1e-6)
    np.testing.assert_allclose(v1, v2, rtol=1e-6)
    scale, shift = rng.standard_normal(7), rng.standard_normal(7)
    np.testing.assert_allclose(compiled.bn_apply(x2, scale, shift), _pykernels.bn_apply(x2, scale, shift), rtol=1e-5, atol=1e-5)
    inv = 1 / np.sqrt(v2 + 1e-3)
    for a, b in zip(compiled.bn_grad_sums(dy2, x2, m2, inv), _pykernels.bn_grad_sums(dy2, x2, m2, inv)):
        np.testing.assert_allclose(a, b, rtol=1e-5, atol=1e-4)
    a, b, c = rng.standard_normal((3, 7))
    np.testing.assert_allclose(compiled.bn_input_grad(dy2, x2, m2, a, b, c),
                               _pykernels.bn_input_grad(dy2, x2, m2, a, b, c), rtol=1e-5, atol=1e-5)


def test_compiled_conv_is_deterministic():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((2, 16, 16, 16)).astype(np.float32)
    k = rng.standard_normal((3, 3, 16, 32)).astype(np.float32)
    assert np.array_equal(compiled.conv3x3(x, k), compiled.conv3x3(x, k))


def test_flip_transpose_gives_input_gradient():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((1, 5, 5, 2))
    k = rng.standard_normal((3, 3, 2, 3))
    dy = rng.standard_normal((1, 5, 5, 3))
    # <conv(x, k), dy> == <x, conv(dy, flip_transpose(k))>
    lhs = np.sum(kernels.conv3x3(x, k) * dy)
    rhs = np.sum(x * kernels.conv3x3(dy, kernels.flip_transpose(k)))
    assert abs(lhs - rhs) < 1e-10


def _backend_in_subprocess(value):
    env = dict(os.environ, DOCCLEAN_BACKEND=value)
    out = subprocess.run([sys.executable, "-c", "from docclean import kernels; print(kernels.BACKEND)"],
                         env=env, capture_output=True, text=True)
    return out.returncode, out.stdout.strip()


def test_backend_selection_env():
    assert _backend_in_subprocess("python") == (0, "python")
    assert _backend_in_subprocess("compiled") == (0, "compiled")
    assert _backend_in_subprocess("auto") == (0, "compiled")
    assert _backend_in_subprocess("bogus")[0] != 0
