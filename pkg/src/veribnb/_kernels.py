"""Hot numeric kernels with a numba path and a pure-numpy fallback.

The backend is chosen once at import time. Set ``VERIBNB_NUMBA=0`` to force
the numpy implementations (useful for debugging and for environments without
numba). Both implementations share signatures and are kept importable under
``*_numpy`` / ``*_numba`` names so they can be compared directly.

All batched kernels take 2-D C-contiguous float64 arrays with the batch on the
leading axis.
"""
import os

import numpy as np

try:
    import numba
    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAS_NUMBA = False

USE_NUMBA = HAS_NUMBA and os.environ.get("VERIBNB_NUMBA", "1").strip().lower() not in ("0", "false", "no", "off")
BACKEND = "numba" if USE_NUMBA else "numpy"


# --------------------------------------------------------------------------
# numpy implementations
# --------------------------------------------------------------------------

def interval_affine_numpy(W, b, lo, hi):
    """Interval image of ``x -> W x + b`` for each row box ``[lo[i], hi[i]]``."""
    Wp = np.maximum(W, 0.0)
    Wn = np.minimum(W, 0.0)
    out_lo = lo @ Wp.T + hi @ Wn.T + b
    out_hi = hi @ Wp.T + lo @ Wn.T + b
    return out_lo, out_hi


def relax_backward_numpy(lam, up_slope, up_bias, low_slope, sign, beta):
    lam_pos = np.maximum(lam, 0.0)
    lam_neg = np.minimum(lam, 0.0)
    mu = up_slope * lam_pos + low_slope * lam_neg + sign * beta
    bias_term = np.sum(lam_pos * up_bias, axis=1)
    return mu, bias_term


def relax_backward_grad_numpy(g_mu, lam, up_slope, up_bias, low_slope, sign):
    pos = lam > 0.0
    neg = lam < 0.0
    g_low = g_mu * np.where(neg, lam, 0.0)
    g_beta = g_mu * sign
    # value = ... - sum(lam_pos * up_bias): contributes -up_bias where lam > 0
    g_lam = np.where(pos, g_mu * up_slope - up_bias, 0.0) + np.where(neg, g_mu * low_slope, 0.0)
    return g_low, g_beta, g_lam


def box_linear_min_numpy(c, lo, hi):
    """Row-wise ``min_{x in [lo, hi]} c . x`` and a minimiser."""
    x = np.where(c > 0.0, lo, hi)
    return np.sum(c * x, axis=1), x


def conv_to_dense_numpy(kernel, in_c, in_h, in_w, stride, padding):
    out_c, _, kh, kw = kernel.shape
    out_h = (in_h + 2 * padding - kh) // stride + 1
    out_w = (in_w + 2 * padding - kw) // stride + 1
    W = np.zeros((out_c * out_h * out_w, in_c * in_h * in_w))
    oc, oy, ox, ic, ky, kx = np.meshgrid(
        np.arange(out_c), np.arange(out_h), np.arange(out_w),
        np.arange(in_c), np.arange(kh), np.arange(kw), indexing="ij")
    iy = oy * stride - padding + ky
    ix = ox * stride - padding + kx
    ok = (iy >= 0) & (iy < in_h) & (ix >= 0) & (ix < in_w)
    rows = (oc * out_h + oy) * out_w + ox
    cols = (ic * in_h + iy) * in_w + ix
    np.add.at(W, (rows[ok], cols[ok]), kernel[oc[ok], ic[ok], ky[ok], kx[ok]])
    return W


# --------------------------------------------------------------------------
# numba implementations
# --------------------------------------------------------------------------

if HAS_NUMBA:

    @numba.njit(cache=True)
    def interval_affine_numba(W, b, lo, hi):
        n_batch, n_in = lo.shape
        n_out = W.shape[0]
        out_lo = np.empty((n_batch, n_out))
        out_hi = np.empty((n_batch, n_out))
        for r in range(n_batch):
            for i in range(n_out):
                acc_lo = b[i]
                acc_hi = b[i]
                for j in range(n_in):
                    w = W[i, j]
                    if w >= 0.0:
                        acc_lo += w * lo[r, j]
                        acc_hi += w * hi[r, j]
                    else:
                        acc_lo += w * hi[r, j]
                        acc_hi += w * lo[r, j]
                out_lo[r, i] = acc_lo
                out_hi[r, i] = acc_hi
        return out_lo, out_hi

    @numba.njit(cache=True)
    def relax_backward_numba(lam, up_slope, up_bias, low_slope, sign, beta):
        n_batch, n = lam.shape
        mu = np.empty((n_batch, n))
        bias_term = np.zeros(n_batch)
        for r in range(n_batch):
            acc = 0.0
            for i in range(n):
                v = lam[r, i]
                m = sign[r, i] * beta[r, i]
                if v > 0.0:
                    m += up_slope[r, i] * v
                    acc += v * up_bias[r, i]
                elif v < 0.0:
                    m += low_slope[r, i] * v
                mu[r, i] = m
            bias_term[r] = acc
        return mu, bias_term

    @numba.njit(cache=True)
    def relax_backward_grad_numba(g_mu, lam, up_slope, up_bias, low_slope, sign):
        n_batch, n = lam.shape
        g_low = np.zeros((n_batch, n))
        g_beta = np.empty((n_batch, n))
        g_lam = np.zeros((n_batch, n))
        for r in range(n_batch):
            for i in range(n):
                g = g_mu[r, i]
                v = lam[r, i]
                g_beta[r, i] = g * sign[r, i]
                if v > 0.0:
                    g_lam[r, i] = g * up_slope[r, i] - up_bias[r, i]
                elif v < 0.0:
                    g_low[r, i] = g * v
                    g_lam[r, i] = g * low_slope[r, i]
        return g_low, g_beta, g_lam

    @numba.njit(cache=True)
    def box_linear_min_numba(c, lo, hi):
        n_batch, n = c.shape
        val = np.zeros(n_batch)
        x = np.empty((n_batch, n))
        for r in range(n_batch):
            acc = 0.0
            for i in range(n):
                if c[r, i] > 0.0:
                    x[r, i] = lo[r, i]
                else:
                    x[r, i] = hi[r, i]
                acc += c[r, i] * x[r, i]
            val[r] = acc
        return val, x

    @numba.njit(cache=True)
    def conv_to_dense_numba(kernel, in_c, in_h, in_w, stride, padding):
        out_c, _, kh, kw = kernel.shape
        out_h = (in_h + 2 * padding - kh) // stride + 1
        out_w = (in_w + 2 * padding - kw) // stride + 1
        W = np.zeros((out_c * out_h * out_w, in_c * in_h * in_w))
        for oc in range(out_c):
            for oy in range(out_h):
                for ox in range(out_w):
                    row = (oc * out_h + oy) * out_w + ox
                    for ic in range(in_c):
                        for ky in range(kh):
                            iy = oy * stride - padding + ky
                            if iy < 0 or iy >= in_h:
                                continue
                            for kx in range(kw):
                                ix = ox * stride - padding + kx
                                if ix < 0 or ix >= in_w:
                                    continue
                                W[row, (ic * in_h + iy) * in_w + ix] += kernel[oc, ic, ky, kx]
        return W

else:  # pragma: no cover
    interval_affine_numba = interval_affine_numpy
    relax_backward_numba = relax_backward_numpy
    relax_backward_grad_numba = relax_backward_grad_numpy
    box_linear_min_numba = box_linear_min_numpy
    conv_to_dense_numba = conv_to_dense_numpy


# above this many multiply-adds BLAS beats the scalar loop
INTERVAL_AFFINE_NUMBA_MAX = 1 << 15


def _interval_affine_dispatch(W, b, lo, hi):
    if lo.shape[0] * W.size <= INTERVAL_AFFINE_NUMBA_MAX:
        return interval_affine_numba(W, b, lo, hi)
    return interval_affine_numpy(W, b, lo, hi)


if USE_NUMBA:
    interval_affine = _interval_affine_dispatch
    relax_backward = relax_backward_numba
    relax_backward_grad = relax_backward_grad_numba
    box_linear_min = box_linear_min_numba
    conv_to_dense = conv_to_dense_numba
else:
    interval_affine = interval_affine_numpy
    relax_backward = relax_backward_numpy
    relax_backward_grad = relax_backward_grad_numpy
    box_linear_min = box_linear_min_numpy
    conv_to_dense = conv_to_dense_numpy
