import os
import subprocess
import sys

import numpy as np
import pytest

from veribnb import _kernels as K
from oracles import direct_conv

pytestmark = pytest.mark.skipif(not K.HAS_NUMBA, reason="numba not installed")


def _relax_inputs(rng, B=5, n=7):
    lam = rng.normal(size=(B, n))
    lam[:, 0] = 0.0
    up = rng.uniform(0, 1, (B, n))
    return lam, up, rng.normal(size=(B, n)), rng.uniform(0, 1, (B, n)), \
        rng.choice([-1.0, 0.0, 1.0], size=(B, n)), rng.uniform(0, 1, (B, n))


def test_interval_affine_backends_agree(rng):
    W, b = rng.normal(size=(6, 4)), rng.normal(size=6)
    lo = rng.normal(size=(3, 4))
    hi = lo + rng.uniform(0, 1, (3, 4))
    for a, c in zip(K.interval_affine_numpy(W, b, lo, hi), K.interval_affine_numba(W, b, lo, hi)):
        np.testing.assert_allclose(a, c, rtol=1e-13, atol=1e-13)


def test_relax_backward_backends_agree(rng):
    lam, up, ub, low, sign, beta = _relax_inputs(rng)
    for a, c in zip(K.relax_backward_numpy(lam, up, ub, low, sign, beta),
                    K.relax_backward_numba(lam, up, ub, low, sign, beta)):
        np.testing.assert_allclose(a, c, rtol=1e-13, atol=1e-13)
    g = rng.normal(size=lam.shape)
    for a, c in zip(K.relax_backward_grad_numpy(g, lam, up, ub, low, sign),
                    K.relax_backward_grad_numba(g, lam, up, ub, low, sign)):
        np.testing.assert_allclose(a, c, rtol=1e-13, atol=1e-13)


def test_box_linear_min_backends_agree(rng):
    c = rng.normal(size=(4, 5))
    c[0, 0] = 0.0
    lo = rng.normal(size=(4, 5))
    hi = lo + 1.0
    va, xa = K.box_linear_min_numpy(c, lo, hi)
    vb, xb = K.box_linear_min_numba(c, lo, hi)
    np.testing.assert_allclose(va, vb, rtol=1e-13)
    np.testing.assert_allclose(np.sum(c * xa, axis=1), np.sum(c * xb, axis=1), rtol=1e-13)


@pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1)])
def test_conv_to_dense_backends_agree(rng, stride, padding):
    kernel = rng.normal(size=(2, 3, 3, 3))
    Wa = K.conv_to_dense_numpy(kernel, 3, 5, 5, stride, padding)
    Wb = K.conv_to_dense_numba(kernel, 3, 5, 5, stride, padding)
    np.testing.assert_array_equal(Wa, Wb)
    x = rng.normal(size=(3, 5, 5))
    np.testing.assert_allclose(Wa @ x.ravel(), direct_conv(x, kernel, np.zeros(2), stride, padding), atol=1e-12)


def test_env_flag_selects_numpy_backend():
    env = {**os.environ, "VERIBNB_NUMBA": "0"}
    out = subprocess.run([sys.executable, "-c", "from veribnb import _kernels as K; print(K.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "numpy"
