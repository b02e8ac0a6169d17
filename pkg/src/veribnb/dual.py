"""Planet relaxation coefficients and the beta-CROWN dual bound.

For a canonical network the dual bound is computed by one backward sweep::

    lam_{n-1} = -W_n^T
    mu_k      = up_slope_k * [lam_k]_+ + alpha_k * [lam_k]_- + s_k * beta_k
    lam_{k-1} = W_k^T mu_k
    d_P       = min_{x in box} (-mu_1^T W_1 x) + b_n
                - sum_k ([lam_k]_+ . up_bias_k + mu_k . b_k)

Any ``alpha`` in [0, 1] and ``beta >= 0`` gives a valid lower bound on the
network output over the box intersected with the split constraints. The hot
path (``dual_value_and_grad``) works on batches: every array carries a leading
batch axis so that many subproblems, or all neurons of one layer when
computing intermediate bounds, share one sweep.

Hidden layers are 0-based; ``lam[k]`` multiplies the post-activation ``x_k``.
"""
from collections import Counter
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import _kernels
from . import autodiff as ad
from .intervals import Box, BoundsCache
from .network import Network

# Number of backward sweeps / layer visits performed. Used to check that UPB
# scoring costs a single sweep.
SWEEP_STATS = Counter()


@dataclass
class RelaxationCoeffs:
    """Per hidden layer: upper line slope/bias, fixed lower slope, sign and ambiguity mask."""
    up_slope: list
    up_bias: list
    low_fixed: list
    sign: list
    ambiguous: list

    @property
    def n_layers(self):
        return len(self.up_slope)


@dataclass
class DualState:
    alpha: list
    beta: list
    value: float = -np.inf
    lambda_bar: Optional[list] = None
    mu_bar: Optional[list] = None
    history: list = field(default_factory=list)

    def copy(self):
        return DualState([a.copy() for a in self.alpha], [b.copy() for b in self.beta], self.value)


def _coeffs_layer(l, u):
    l = np.asarray(l, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    off = u <= 0.0
    on = (l >= 0.0) & ~off  # l == u == 0 counts as off
    amb = ~off & ~on
    width = np.where(amb, u - l, 1.0)
    up_slope = np.where(amb, u / width, np.where(on, 1.0, 0.0))
    up_bias = np.where(amb, -l * u / width, 0.0)
    low_fixed = np.where(on, 1.0, 0.0)
    sign = on.astype(np.float64) - off.astype(np.float64)
    return up_slope, up_bias, low_fixed, sign, amb


def compute_coeffs(bounds, ub=None):
    """Relaxation coefficients from a ``BoundsCache`` or from (lb list, ub list).

    Arrays may be 1-D (one subproblem) or 2-D (a batch).
    """
    if isinstance(bounds, BoundsCache):
        lbs, ubs = bounds.hidden_lb, bounds.hidden_ub
    else:
        lbs, ubs = bounds, ub
    parts = [_coeffs_layer(l, u) for l, u in zip(lbs, ubs)]
    return RelaxationCoeffs(*(list(p) for p in zip(*parts))) if parts else RelaxationCoeffs([], [], [], [], [])


def init_alpha(lbs, ubs):
    """Area-minimising lower slope: 1 where ``u >= -l``, else 0."""
    return [np.where(np.asarray(u) >= -np.asarray(l), 1.0, 0.0) for l, u in zip(lbs, ubs)]


def init_beta(lbs):
    return [np.zeros_like(np.asarray(l, dtype=np.float64)) for l in lbs]


def _low_slope(coeffs, alpha, k):
    return np.where(coeffs.ambiguous[k], alpha[k], coeffs.low_fixed[k])


def _c2(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def dual_value_and_grad(weights, biases, rows, row_bias, coeffs, alpha, beta, lo, hi, need_grad=True):
    """Batched dual objective and its gradient w.r.t. ``alpha`` and ``beta``.

    ``weights``/``biases`` are the affine layers producing the hidden layers
    that feed the objective; ``rows`` (B, h_last) and ``row_bias`` (B,) define
    the objective ``rows . x_last + row_bias``. All coefficient, alpha and
    beta arrays are (B, h_k); ``lo``/``hi`` are (B, d).
    Returns ``(value, g_alpha, g_beta, lams, mus)``.
    """
    m = len(weights)
    SWEEP_STATS["sweeps"] += 1
    lam = _c2(-rows)
    value = np.array(row_bias, dtype=np.float64, copy=True)
    lams = [None] * m
    mus = [None] * m
    lows = [None] * m
    for k in range(m - 1, -1, -1):
        SWEEP_STATS["layers"] += 1
        low = _c2(_low_slope(coeffs, alpha, k))
        mu, bias_term = _kernels.relax_backward(lam, _c2(coeffs.up_slope[k]), _c2(coeffs.up_bias[k]),
                                                low, _c2(coeffs.sign[k]), _c2(beta[k]))
        value -= bias_term + mu @ biases[k]
        lams[k], mus[k], lows[k] = lam, mu, low
        lam = mu @ weights[k]
    box_val, x_star = _kernels.box_linear_min(_c2(-lam), _c2(lo), _c2(hi))
    value += box_val
    if not need_grad:
        return value, None, None, lams, mus
    g_alpha, g_beta = [None] * m, [None] * m
    g_lam = -x_star
    for k in range(m):
        g_mu = g_lam @ weights[k].T - biases[k]
        g_low, g_b, g_lam = _kernels.relax_backward_grad(_c2(g_mu), lams[k], _c2(coeffs.up_slope[k]),
                                                         _c2(coeffs.up_bias[k]), lows[k], _c2(coeffs.sign[k]))
        g_alpha[k] = np.where(coeffs.ambiguous[k], g_low, 0.0)
        g_beta[k] = np.where(coeffs.sign[k] != 0, g_b, 0.0)
    return value, g_alpha, g_beta, lams, mus


def _objective_rows(net: Network, batch):
    if not net.canonical:
        raise ValueError("dual bounding needs a canonical (single-output) network")
    rows = np.broadcast_to(net.weights[-1][0], (batch, net.weights[-1].shape[1]))
    return rows, np.full(batch, net.biases[-1][0])


def _batched(arrs, batch):
    return [np.ascontiguousarray(np.broadcast_to(a, (batch,) + np.shape(a)[-1:])) for a in arrs]


def dual_backward(net: Network, coeffs: RelaxationCoeffs, alpha, beta):
    """One backward sweep for a single subproblem: ``(lambda_bar, mu_bar)``.

    ``lambda_bar`` is ``[lam_0, ..., lam_{n-2}, lam_input]``: one entry per
    hidden layer followed by the multiplier of the network input.
    """
    rows, row_bias = _objective_rows(net, 1)
    co = _batch_coeffs(coeffs, 1)
    a = _batched(alpha, 1)
    b = _batched(beta, 1)
    zeros = np.zeros((1, net.input_dim))
    _, _, _, lams, mus = dual_value_and_grad(net.weights[:-1], net.biases[:-1], rows, row_bias, co, a, b,
                                             zeros, zeros, need_grad=False)
    lam_in = mus[0] @ net.weights[0] if mus else -rows
    return [l[0] for l in lams] + [lam_in[0]], [m_[0] for m_ in mus]


def dual_objective(net: Network, coeffs: RelaxationCoeffs, lambda_bar, mu_bar, box: Box):
    """``d_P`` from the multipliers of ``dual_backward`` (inner box minimisation in closed form)."""
    c = -lambda_bar[-1]
    val = float(np.sum(np.minimum(c * box.lo, c * box.hi))) + float(net.biases[-1][0])
    for k in range(len(mu_bar)):
        val -= float(np.maximum(lambda_bar[k], 0.0) @ coeffs.up_bias[k]) + float(mu_bar[k] @ net.biases[k])
    return val


def dual_objective_tape(net: Network, coeffs: RelaxationCoeffs, alpha, beta, box: Box):
    """The same objective built from autodiff primitives (reference gradient path).

    ``alpha`` and ``beta`` are lists of 1-D Tensors.
    """
    lam = ad.Tensor(-net.weights[-1][0])
    value = ad.Tensor(float(net.biases[-1][0]))
    for k in range(len(net.weights) - 2, -1, -1):
        amb = coeffs.ambiguous[k]
        low = ad.mul(alpha[k], amb.astype(np.float64)) + ad.Tensor(np.where(amb, 0.0, coeffs.low_fixed[k]))
        lam_pos, lam_neg = ad.relu(lam), ad.neg_part(lam)
        mu = ad.mul(coeffs.up_slope[k], lam_pos) + ad.mul(low, lam_neg) + ad.mul(coeffs.sign[k], beta[k])
        value = value - ad.sum_(ad.mul(lam_pos, coeffs.up_bias[k])) - ad.sum_(ad.mul(mu, net.biases[k]))
        lam = ad.affine(ad.transpose(net.weights[k]), mu)
    c = -lam
    value = value + ad.sum_(ad.minimum(ad.mul(c, box.lo), ad.mul(c, box.hi)))
    return value


def _batch_coeffs(coeffs, batch):
    return RelaxationCoeffs(_batched(coeffs.up_slope, batch), _batched(coeffs.up_bias, batch),
                            _batched(coeffs.low_fixed, batch), _batched(coeffs.sign, batch),
                            [np.ascontiguousarray(np.broadcast_to(a, (batch,) + np.shape(a)[-1:]))
                             for a in coeffs.ambiguous])


def ascend(weights, biases, rows, row_bias, coeffs, alpha, beta, lo, hi, iters, lr, decay=0.98,
           optimize_beta=True, adam=(0.9, 0.999, 1e-8)):
    """Projected Adam ascent on (alpha, beta); keeps the best value per batch row.

    Returns ``(best_value, best_alpha, best_beta, history)`` where ``history``
    holds the per-row best-so-far value after each evaluation.
    """
    b1, b2, eps = adam
    alpha = [np.clip(a, 0.0, 1.0) for a in alpha]
    beta = [np.maximum(b, 0.0) for b in beta]
    m_a = [np.zeros_like(a) for a in alpha]
    v_a = [np.zeros_like(a) for a in alpha]
    m_b = [np.zeros_like(b) for b in beta]
    v_b = [np.zeros_like(b) for b in beta]
    best = np.full(rows.shape[0], -np.inf)
    best_alpha = [a.copy() for a in alpha]
    best_beta = [b.copy() for b in beta]
    history = []
    for t in range(iters + 1):
        need_grad = t < iters
        value, g_alpha, g_beta, _, _ = dual_value_and_grad(weights, biases, rows, row_bias, coeffs,
                                                           alpha, beta, lo, hi, need_grad=need_grad)
        improved = value > best
        if np.any(improved):
            best = np.where(improved, value, best)
            for k in range(len(alpha)):
                best_alpha[k][improved] = alpha[k][improved]
                best_beta[k][improved] = beta[k][improved]
        history.append(best.copy())
        if not need_grad:
            break
        step = lr * decay ** t
        bc1, bc2 = 1 - b1 ** (t + 1), 1 - b2 ** (t + 1)
        for k in range(len(alpha)):
            m_a[k] = b1 * m_a[k] + (1 - b1) * g_alpha[k]
            v_a[k] = b2 * v_a[k] + (1 - b2) * g_alpha[k] ** 2
            alpha[k] = np.clip(alpha[k] + step * (m_a[k] / bc1) / (np.sqrt(v_a[k] / bc2) + eps), 0.0, 1.0)
            if optimize_beta:
                m_b[k] = b1 * m_b[k] + (1 - b1) * g_beta[k]
                v_b[k] = b2 * v_b[k] + (1 - b2) * g_beta[k] ** 2
                beta[k] = np.maximum(beta[k] + step * (m_b[k] / bc1) / (np.sqrt(v_b[k] / bc2) + eps), 0.0)
    return best, best_alpha, best_beta, history


def optimize_dual_batch(net: Network, lbs, ubs, box: Box, alpha, beta, iters, lr=0.1, decay=0.98):
    """Bound a batch of subproblems of a canonical network.

    ``lbs``/``ubs``/``alpha``/``beta`` are per-hidden-layer (B, h_k) arrays.
    """
    batch = lbs[0].shape[0] if lbs else alpha[0].shape[0] if alpha else 1
    coeffs = compute_coeffs(lbs, ubs)
    rows, row_bias = _objective_rows(net, batch)
    lo = np.broadcast_to(box.lo, (batch, box.lo.size))
    hi = np.broadcast_to(box.hi, (batch, box.hi.size))
    return ascend(net.weights[:-1], net.biases[:-1], rows, row_bias, coeffs,
                  [np.array(a, dtype=np.float64) for a in alpha], [np.array(b, dtype=np.float64) for b in beta],
                  lo, hi, iters, lr, decay)


def optimize_dual(net: Network, bounds: BoundsCache, box: Box = None, init: DualState = None,
                  iters=20, lr=0.1, decay=0.98):
    """Maximise the dual bound of one subproblem; returns the best ``DualState``.

    Starts from ``init`` when given (warm start), else from the area-minimising
    alpha and zero beta.
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    box = bounds.box if box is None else box
    lbs, ubs = bounds.hidden_lb, bounds.hidden_ub
    if init is None:
        alpha, beta = init_alpha(lbs, ubs), init_beta(lbs)
    else:
        alpha, beta = init.alpha, init.beta
    best, a, b, hist = optimize_dual_batch(net, [l[None] for l in lbs], [u[None] for u in ubs], box,
                                           [x[None] for x in alpha], [x[None] for x in beta], iters, lr, decay)
    return DualState([x[0] for x in a], [x[0] for x in b], float(best[0]), history=[float(h[0]) for h in hist])


def intermediate_bounds_alpha_crown(net: Network, box: Box, iters=5, lr=1.0, decay=0.98):
    """Pre-activation bounds for every layer by optimising alpha (beta = 0) per neuron.

    All neurons of one layer, lower and upper bounds together, are optimised as
    one batch. Results are intersected with IBP run on the refined bounds, so
    the returned intervals are sound and never looser than that IBP pass.
    """
    pre_lb, pre_ub = [], []
    d = box.lo.size
    for i, (W, b) in enumerate(zip(net.weights, net.biases)):
        if i == 0:
            l_ibp, u_ibp = _kernels.interval_affine(W, b, box.lo[None, :].copy(), box.hi[None, :].copy())
        else:
            l_ibp, u_ibp = _kernels.interval_affine(W, b, np.maximum(pre_lb[-1], 0.0)[None, :].copy(),
                                                    np.maximum(pre_ub[-1], 0.0)[None, :].copy())
        l_ibp, u_ibp = l_ibp[0], u_ibp[0]
        m = W.shape[0]
        rows = np.concatenate([W, -W]) if i > 0 else None
        if i == 0:
            # no relaxation before the first layer: the affine box minimum is exact
            lo, hi = box.lo[None, :], box.hi[None, :]
            c = np.concatenate([W, -W])
            vals, _ = _kernels.box_linear_min(_c2(c), _c2(np.broadcast_to(lo, (2 * m, d))),
                                              _c2(np.broadcast_to(hi, (2 * m, d))))
            vals = vals + np.concatenate([b, -b])
        else:
            batch = 2 * m
            lbs = [np.broadcast_to(l, (batch, l.size)) for l in pre_lb]
            ubs = [np.broadcast_to(u, (batch, u.size)) for u in pre_ub]
            coeffs = _batch_coeffs(compute_coeffs(pre_lb, pre_ub), batch)
            alpha = [np.ascontiguousarray(a) for a in init_alpha(lbs, ubs)]
            beta = [np.zeros((batch, l.size)) for l in pre_lb]
            vals, _, _, _ = ascend(net.weights[:i], net.biases[:i], rows, np.concatenate([b, -b]), coeffs,
                                   alpha, beta, np.broadcast_to(box.lo, (batch, d)),
                                   np.broadcast_to(box.hi, (batch, d)), iters, lr, decay, optimize_beta=False)
        pre_lb.append(np.maximum(vals[:m], l_ibp))
        pre_ub.append(np.minimum(-vals[m:], u_ibp))
    return BoundsCache(box, pre_lb, pre_ub)
