"""Gradient attacks: PGD for training, MI-FGSM for counterexample search.

Step sizes are relative to the box radius: ``step_size=0.25`` moves each
coordinate by ``0.25 * eps`` per iteration.
"""
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .intervals import Box
from .network import Network, evaluate, forward_tape


@dataclass(frozen=True)
class AttackConfig:
    steps: int = 8
    step_size: float = 0.25
    restarts: int = 1
    momentum_decay: float = 1.0
    seed: int = 0
    random_init: bool = True

    def __post_init__(self):
        if self.steps < 1 or self.step_size <= 0 or self.restarts < 1:
            raise ValueError("attack needs steps >= 1, step_size > 0 and restarts >= 1")


# MI-FGSM settings tried at verification time: steps x relative step x momentum
DEFAULT_MIFGSM_GRID = tuple(AttackConfig(steps=s, step_size=a, momentum_decay=m, restarts=4)
                            for s in (20, 50) for a in (0.1, 0.25) for m in (0.5, 1.0))


def _params(net):
    return net.params() if isinstance(net, Network) else list(net)


def input_gradient(net, x, loss_fn, y):
    """Per-sample losses (B,) and their gradients w.r.t. the inputs (B, d)."""
    xt = ad.Tensor(x, requires_grad=True)
    losses = loss_fn(forward_tape(_params(net), xt), y)
    (g,) = ad.gradient(ad.sum_(losses), [xt])
    return losses.data.copy(), g


def cross_entropy_loss(logits, y):
    return ad.cross_entropy(logits, y, reduction="none")


def _rows(box: Box, n):
    lo, hi = np.atleast_2d(box.lo), np.atleast_2d(box.hi)
    if lo.shape[0] == 1 and n > 1:
        lo, hi = np.repeat(lo, n, axis=0), np.repeat(hi, n, axis=0)
    return lo, hi


def pgd_attack(net, loss_fn, box: Box, y, cfg: AttackConfig = AttackConfig(), rng=None, eps=None):
    """Sign-gradient ascent on ``loss_fn`` projected onto the box.

    ``box`` may hold one box or one box per sample (rows of ``lo``/``hi``);
    ``y`` is the matching label array. Returns, per sample, the visited iterate
    with the largest loss.
    """
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    y = np.atleast_1d(np.asarray(y))
    lo, hi = _rows(box, y.size)
    radius = box.step_radius if eps is None else eps
    step = cfg.step_size * radius
    best_x = 0.5 * (lo + hi)
    best_v = np.full(y.size, -np.inf)
    for _ in range(cfg.restarts):
        x = lo + (hi - lo) * rng.random(lo.shape) if cfg.random_init else 0.5 * (lo + hi)
        for t in range(cfg.steps + 1):
            v, g = input_gradient(net, x, loss_fn, y)
            better = v > best_v
            best_v = np.where(better, v, best_v)
            best_x = np.where(better[:, None], x, best_x)
            if t == cfg.steps:
                break
            x = np.clip(x + step * np.sign(g), lo, hi)
    return best_x if np.ndim(box.lo) == 2 or y.size > 1 else best_x[0]


def _output_and_grad(net: Network, x):
    xt = ad.Tensor(x, requires_grad=True)
    out = forward_tape(net.params(), xt)
    (g,) = ad.gradient(ad.sum_(out), [xt])
    return out.data[:, 0].copy(), g


def mifgsm_run(net: Network, box: Box, cfg: AttackConfig, rng, objective=None):
    """One MI-FGSM configuration with ``cfg.restarts`` parallel starts.

    Minimises the canonical output (or ``objective(x) -> (values, grads)``).
    Returns ``(best_point, best_value)``.
    """
    objective = objective or (lambda z: _output_and_grad(net, z))
    n = cfg.restarts
    lo, hi = np.repeat(box.lo[None], n, axis=0), np.repeat(box.hi[None], n, axis=0)
    step = cfg.step_size * box.step_radius
    x = lo + (hi - lo) * rng.random(lo.shape) if cfg.random_init else 0.5 * (lo + hi)
    g_acc = np.zeros_like(x)
    best_v, best_x = np.inf, x[0]
    for t in range(cfg.steps + 1):
        v, g = objective(x)
        i = int(np.argmin(v))
        if v[i] < best_v:
            best_v, best_x = float(v[i]), x[i].copy()
        if t == cfg.steps or best_v <= 0:
            break
        # descent on the output: ascend on its negation
        grad = -g
        norm = np.abs(grad).sum(axis=1, keepdims=True)
        g_acc = cfg.momentum_decay * g_acc + np.divide(grad, norm, out=np.zeros_like(grad), where=norm > 0)
        x = np.clip(x + step * np.sign(g_acc), lo, hi)
    return best_x, best_v


def mifgsm_attack(net: Network, box: Box, grid=DEFAULT_MIFGSM_GRID, objective=None, seed=0, rounds=1):
    """Run MI-FGSM over a grid of settings, stopping at the first violation.

    Returns the point with the lowest canonical output found.
    """
    if isinstance(grid, AttackConfig):
        grid = (grid,)
    rng = np.random.default_rng(seed)
    best_x, best_v = box.center, np.inf
    for _ in range(rounds):
        for cfg in grid:
            x, v = mifgsm_run(net, box, cfg, rng, objective)
            if v < best_v:
                best_x, best_v = x, v
            if best_v <= 0:
                return best_x
    return best_x


def check_counterexample(net: Network, x, box: Box) -> bool:
    """True iff ``x`` lies in the box and the canonical output there is <= 0."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != box.lo.shape or not box.contains(x):
        return False
    return bool(evaluate(net, x)[0] <= 0.0)
