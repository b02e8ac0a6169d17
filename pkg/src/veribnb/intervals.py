"""Interval bound propagation, input boxes and the Planet-hull area."""
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import _kernels
from . import autodiff as ad
from .network import Network, PropertySpec


class InfeasibleSplit(ValueError):
    """A split forces a neuron to the sign its bounds already exclude."""


class EmptyBoxError(ValueError):
    pass


@dataclass(frozen=True)
class Box:
    lo: np.ndarray
    hi: np.ndarray
    radius: Optional[float] = None  # l_inf radius the box was built with, before clipping

    def __post_init__(self):
        if self.lo.shape != self.hi.shape or np.any(self.lo > self.hi):
            raise EmptyBoxError("box needs lo <= hi elementwise")

    @property
    def center(self):
        return 0.5 * (self.lo + self.hi)

    @property
    def step_radius(self):
        """Radius used to scale attack steps."""
        if self.radius is not None:
            return self.radius
        return float(np.max(self.hi - self.lo)) / 2.0

    def contains(self, x, tol=0.0):
        x = np.asarray(x)
        return bool(np.all(x >= self.lo - tol) and np.all(x <= self.hi + tol))

    def project(self, x):
        return np.clip(x, self.lo, self.hi)

    def sample(self, n, rng):
        return self.lo + (self.hi - self.lo) * rng.random((n, self.lo.size))


@dataclass
class BoundsCache:
    """Pre-activation intervals ``[pre_lb[k], pre_ub[k]]`` for every affine layer."""
    box: Box
    pre_lb: list
    pre_ub: list

    @property
    def hidden_lb(self):
        return self.pre_lb[:-1]

    @property
    def hidden_ub(self):
        return self.pre_ub[:-1]

    def ambiguous(self):
        return [(l < 0) & (u > 0) for l, u in zip(self.hidden_lb, self.hidden_ub)]

    def n_ambiguous(self):
        return int(sum(m.sum() for m in self.ambiguous()))


def clip_to_range(lo, hi, input_range):
    rlo, rhi = (np.asarray(v, dtype=np.float64) for v in input_range)
    lo, hi = np.maximum(lo, rlo), np.minimum(hi, rhi)
    if np.any(lo > hi):
        raise EmptyBoxError("perturbation box does not intersect the valid input range")
    return lo, hi


def make_input_box(prop: PropertySpec, scale=1.0):
    """``[x - scale*eps, x + scale*eps]`` intersected with the valid input range.

    Normalisation is folded into the network at load time, so the box stays in
    raw data units.
    """
    if scale < 1:
        raise ValueError("box scale must be >= 1")
    x = np.asarray(prop.center, dtype=np.float64)
    r = scale * prop.epsilon
    lo, hi = clip_to_range(x - r, x + r, prop.input_range)
    return Box(lo, hi, radius=r)


def _apply_splits(k, lb, ub, splits):
    for (layer, neuron), sign in splits.items():
        if layer != k:
            continue
        if sign > 0:
            if ub[neuron] < 0:
                raise InfeasibleSplit(f"neuron ({layer}, {neuron}) is stably off")
            lb[neuron] = max(lb[neuron], 0.0)
        else:
            if lb[neuron] > 0:
                raise InfeasibleSplit(f"neuron ({layer}, {neuron}) is stably on")
            ub[neuron] = min(ub[neuron], 0.0)


def ibp_forward(net: Network, box: Box, splits=None):
    """All pre-activation bounds in one forward sweep of interval arithmetic.

    ``splits`` maps ``(layer, neuron)`` to ``+1`` / ``-1``; the clamp is applied
    to the pre-activation interval before the ReLU.
    """
    splits = splits or {}
    lo, hi = box.lo[None, :], box.hi[None, :]
    pre_lb, pre_ub = [], []
    last = net.n_layers - 1
    for k, (W, b) in enumerate(zip(net.weights, net.biases)):
        l, u = _kernels.interval_affine(W, b, np.ascontiguousarray(lo), np.ascontiguousarray(hi))
        l, u = l[0], u[0]
        if k < last:
            _apply_splits(k, l, u, splits)
        pre_lb.append(l)
        pre_ub.append(u)
        lo, hi = np.maximum(l, 0.0)[None, :], np.maximum(u, 0.0)[None, :]
    return BoundsCache(box, pre_lb, pre_ub)


def ibp_batch(net: Network, lo, hi):
    """IBP over a batch of boxes (rows of ``lo``/``hi``); returns per-layer (B, n_k) arrays."""
    lo = np.ascontiguousarray(lo, dtype=np.float64)
    hi = np.ascontiguousarray(hi, dtype=np.float64)
    pre_lb, pre_ub = [], []
    for W, b in zip(net.weights, net.biases):
        lo, hi = _kernels.interval_affine(W, b, lo, hi)
        pre_lb.append(lo)
        pre_ub.append(hi)
        lo, hi = np.maximum(lo, 0.0), np.maximum(hi, 0.0)
    return pre_lb, pre_ub


def hull_area(bounds: BoundsCache, layers=None):
    """``1/2 * sum_k sum_i [-l_k]_+ [u_k]_+`` over the selected layers (default: all)."""
    idx = range(len(bounds.pre_lb)) if layers is None else layers
    return 0.5 * float(sum(np.sum(np.maximum(-bounds.pre_lb[k], 0.0) * np.maximum(bounds.pre_ub[k], 0.0))
                           for k in idx))


# -- differentiable versions (used by the trainer) ---------------------------------

def ibp_tape(params, lo, hi):
    """IBP on the autodiff tape.

    ``params`` is ``[W_1, b_1, ..., W_n, b_n]`` as Tensors; ``lo``/``hi`` are
    (B, d) arrays. Returns lists of pre-activation bound Tensors, each (B, n_k).
    """
    n = len(params) // 2
    l, u = ad.as_tensor(lo), ad.as_tensor(hi)
    pre_lb, pre_ub = [], []
    for k in range(n):
        W, b = params[2 * k], params[2 * k + 1]
        Wp, Wn = ad.relu(W), ad.neg_part(W)
        nl = ad.affine(Wp, l, b) + ad.affine(Wn, u)
        nu = ad.affine(Wp, u, b) + ad.affine(Wn, l)
        pre_lb.append(nl)
        pre_ub.append(nu)
        l, u = ad.relu(nl), ad.relu(nu)
    return pre_lb, pre_ub


def hull_area_tape(pre_lb, pre_ub):
    """Per-sample hull area, a (B,) Tensor: ``1/2 * sum over layers and neurons``."""
    total = None
    for l, u in zip(pre_lb, pre_ub):
        term = ad.sum_(ad.relu(-l) * ad.relu(u), axis=1)
        total = term if total is None else total + term
    return ad.scale(total, 0.5)
