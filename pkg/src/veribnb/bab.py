"""Complete verification of canonical networks by ReLU branch-and-bound.

Bounding uses the beta-CROWN dual (``dual.optimize_dual_batch``) warm-started
from the parent; intermediate bounds are computed once at the root with
alpha-CROWN and never updated. Counterexamples come from MI-FGSM at the root,
and from exact LPs on leaves where every ReLU is fixed.
"""
import heapq
import itertools
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.optimize import linprog

from . import dual
from .attacks import DEFAULT_MIFGSM_GRID, check_counterexample, mifgsm_attack
from .intervals import Box, make_input_box
from .network import Network, PropertySpec, canonicalize, evaluate

log = logging.getLogger(__name__)

BRANCHERS = ("upb", "random", "max_area")


class NoAmbiguousNeuron(ValueError):
    pass


@dataclass
class BabConfig:
    timeout_s: float = 60.0
    batch_size: int = 16
    brancher: str = "upb"
    root_iters: int = 20
    child_iters: int = 5
    dual_lr: float = 0.1
    dual_decay: float = 0.98
    ib_iters: int = 5
    ib_lr: float = 1.0
    ib_decay: float = 0.98
    slack: float = 1e-6
    attack_grid: tuple = DEFAULT_MIFGSM_GRID
    attack_rounds: int = 1
    early_termination: bool = True
    ema_decay: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.brancher not in BRANCHERS:
            raise ValueError(f"unknown brancher {self.brancher!r}; choose from {BRANCHERS}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class Subproblem:
    splits: tuple
    lbs: list
    ubs: list
    dual: dual.DualState
    lb: float = -math.inf
    depth: int = 0

    def ambiguous(self):
        return [(l < 0) & (u > 0) for l, u in zip(self.lbs, self.ubs)]

    def n_ambiguous(self):
        return int(sum(m.sum() for m in self.ambiguous()))


@dataclass
class VerificationResult:
    status: str  # "verified" | "falsified" | "timeout"
    counterexample: Optional[np.ndarray] = None
    wall_time: float = 0.0
    n_subproblems: int = 0
    trace: list = field(default_factory=list)  # (t, global_lb)
    final_lb: float = -math.inf
    final_ub: float = math.inf
    note: str = ""


# -- branching -------------------------------------------------------------------

def _pick(scores, masks):
    flat = np.concatenate([np.where(m, s, -np.inf) for s, m in zip(scores, masks)])
    if flat.size == 0 or not np.isfinite(flat).any():
        raise NoAmbiguousNeuron("subproblem has no ambiguous neuron")
    idx = int(np.argmax(flat))  # first maximum: lowest (layer, index)
    for k, s in enumerate(scores):
        if idx < s.size:
            return k, idx
        idx -= s.size
    raise AssertionError("unreachable")


def area_scores(lbs, ubs):
    """``[-l]_+ [u]_+ / (u - l)`` per neuron (zero for stable neurons)."""
    out = []
    for l, u in zip(lbs, ubs):
        amb = (l < 0) & (u > 0)
        width = np.where(amb, u - l, 1.0)
        out.append(np.where(amb, np.maximum(-l, 0.0) * np.maximum(u, 0.0) / width, 0.0))
    return out


def upb_scores(net: Network, sub: Subproblem):
    """Upper-Planet-bias scores from one dual backward sweep at the subproblem's duals."""
    coeffs = dual.compute_coeffs(sub.lbs, sub.ubs)
    lam, _ = dual.dual_backward(net, coeffs, sub.dual.alpha, sub.dual.beta)
    return [a * np.maximum(lk, 0.0) for a, lk in zip(area_scores(sub.lbs, sub.ubs), lam[:-1])]


def branch_upb(net: Network, sub: Subproblem):
    return _pick(upb_scores(net, sub), sub.ambiguous())


def branch_baseline(sub: Subproblem, kind, rng=None):
    masks = sub.ambiguous()
    if kind == "max_area":
        return _pick(area_scores(sub.lbs, sub.ubs), masks)
    if kind == "random":
        cands = [(k, int(i)) for k, m in enumerate(masks) for i in np.flatnonzero(m)]
        if not cands:
            raise NoAmbiguousNeuron("subproblem has no ambiguous neuron")
        return cands[int(rng.integers(len(cands)))]
    raise ValueError(f"unknown baseline brancher {kind!r}")


def split(sub: Subproblem, layer, neuron):
    """Children with the neuron forced active (lb := 0) and inactive (ub := 0)."""
    if not (sub.lbs[layer][neuron] < 0 < sub.ubs[layer][neuron]):
        raise ValueError(f"neuron ({layer}, {neuron}) is not ambiguous in this subproblem")
    children = []
    for sign in (1, -1):
        lbs = [l.copy() for l in sub.lbs]
        ubs = [u.copy() for u in sub.ubs]
        if sign > 0:
            lbs[layer][neuron] = 0.0
        else:
            ubs[layer][neuron] = 0.0
        state = sub.dual.copy()
        state.beta[layer][neuron] = 0.0
        state.alpha[layer][neuron] = 1.0 if sign > 0 else 0.0
        children.append(Subproblem(sub.splits + ((layer, neuron, sign),), lbs, ubs, state, sub.lb, sub.depth + 1))
    return children[0], children[1]


# -- early termination ---------------------------------------------------------------

@dataclass
class EarlyTerminationState:
    decay: float = 0.5
    ema: Optional[float] = None
    n_batches: int = 0
    global_lb: float = -math.inf
    time_per_batch: float = 0.0
    queue_len: int = 0
    batch_size: int = 1

    def update(self, improvement, global_lb, batch_time, queue_len):
        self.ema = improvement if self.ema is None else self.decay * self.ema + (1 - self.decay) * improvement
        self.n_batches += 1
        self.time_per_batch = batch_time if self.n_batches == 1 else \
            self.decay * self.time_per_batch + (1 - self.decay) * batch_time
        self.global_lb = global_lb
        self.queue_len = queue_len


def projected_time(state: EarlyTerminationState):
    """Estimated seconds until the lower bound crosses zero and the queue drains."""
    if state.global_lb > 0:
        return 0.0
    if not state.ema or state.ema <= 0:
        return math.inf
    batches = -state.global_lb / state.ema + state.queue_len / state.batch_size
    return batches * state.time_per_batch


def early_termination_check(state: EarlyTerminationState, elapsed, timeout):
    if state.global_lb > 0 or state.n_batches < 2 or not math.isfinite(timeout):
        return False
    return elapsed + projected_time(state) > timeout


# -- leaves with every ReLU fixed -----------------------------------------------------

def solve_fixed_leaf(net: Network, sub: Subproblem, box: Box, slack):
    """Exact minimum over a leaf whose ReLUs are all fixed.

    Returns ``(lb, x)``: ``lb`` is a dual bound evaluated at the LP
    multipliers (``inf`` if the leaf is empty) and ``x`` the LP minimiser.
    """
    coeffs = dual.compute_coeffs(sub.lbs, sub.ubs)
    A, c = net.weights[0].copy(), net.biases[0].copy()
    rows, rhs, where = [], [], []
    for k in range(net.n_layers - 1):
        s = coeffs.sign[k]
        for i in range(s.size):
            # on: -(A x + c) <= 0 ; off: A x + c <= 0
            rows.append(-s[i] * A[i])
            rhs.append(s[i] * c[i])
            where.append((k, i))
        on = (s > 0).astype(np.float64)
        A = net.weights[k + 1] @ (on[:, None] * A)
        c = net.weights[k + 1] @ (on * c) + net.biases[k + 1]
    res = linprog(A[0], A_ub=np.array(rows) if rows else None, b_ub=np.array(rhs) if rows else None,
                  bounds=list(zip(box.lo, box.hi)), method="highs")
    if res.status == 2:
        return math.inf, None
    if res.status != 0:
        return -math.inf, None
    beta = [np.zeros_like(l) for l in sub.lbs]
    for (k, i), m in zip(where, res.ineqlin.marginals):
        beta[k][i] = max(-m, 0.0)
    alpha = [np.where(s > 0, 1.0, 0.0) for s in coeffs.sign]
    lam, mu = dual.dual_backward(net, coeffs, alpha, beta)
    lb = dual.dual_objective(net, coeffs, lam, mu, box) - slack
    sub.dual = dual.DualState(alpha, beta, lb + slack)
    return lb, np.clip(res.x, box.lo, box.hi)


# -- main loop -------------------------------------------------------------------------

def verify(net: Network, prop, cfg: BabConfig = BabConfig(), box: Box = None):
    """Decide whether the canonical network is strictly positive on the property box."""
    if not net.canonical:
        raise ValueError("verify expects a canonical network; see verify_property")
    t0 = time.perf_counter()
    box = make_input_box(prop) if box is None else box
    rng = np.random.default_rng(cfg.seed)
    trace = []

    def done(status, **kw):
        kw.setdefault("trace", trace)
        wall = time.perf_counter() - t0
        if wall > cfg.timeout_s and status != "timeout":
            # an answer that arrives after the deadline does not count
            status = "timeout"
            kw.pop("counterexample", None)
            kw["note"] = "deadline passed"
        return VerificationResult(status, wall_time=wall, **kw)

    x_adv = mifgsm_attack(net, box, cfg.attack_grid, seed=cfg.seed, rounds=cfg.attack_rounds)
    best_ub = float(evaluate(net, x_adv)[0])
    if check_counterexample(net, x_adv, box):
        return done("falsified", counterexample=x_adv, final_ub=best_ub)
    if time.perf_counter() - t0 > cfg.timeout_s:
        return done("timeout", final_ub=best_ub)

    bounds = dual.intermediate_bounds_alpha_crown(net, box, cfg.ib_iters, cfg.ib_lr, cfg.ib_decay)
    lbs, ubs = [l.copy() for l in bounds.hidden_lb], [u.copy() for u in bounds.hidden_ub]
    root = Subproblem((), lbs, ubs, dual.DualState(dual.init_alpha(lbs, ubs), dual.init_beta(lbs)))
    output_lb = float(bounds.pre_lb[-1][0]) - cfg.slack

    n_sub = 0
    if root.n_ambiguous() == 0:
        root.lb, x = solve_fixed_leaf(net, root, box, cfg.slack)
    else:
        _bound([root], net, box, cfg.root_iters, cfg)
    root.lb = max(root.lb, output_lb)
    trace.append((time.perf_counter() - t0, root.lb))
    if root.lb > 0:
        return done("verified", final_lb=root.lb, final_ub=best_ub)
    if root.n_ambiguous() == 0:
        return _fixed_leaf_outcome(net, root, box, x, done, n_sub, best_ub)

    counter = itertools.count()
    queue = [(root.lb, next(counter), root)]
    et = EarlyTerminationState(decay=cfg.ema_decay, batch_size=cfg.batch_size)
    pruned_lb = math.inf
    while queue:
        elapsed = time.perf_counter() - t0
        if elapsed > cfg.timeout_s:
            return done("timeout", n_subproblems=n_sub, final_lb=queue[0][0], final_ub=best_ub)
        t_batch = time.perf_counter()
        parents = [heapq.heappop(queue)[2] for _ in range(min(cfg.batch_size, len(queue)))]
        children = []
        for sub in parents:
            if cfg.brancher == "upb":
                layer, neuron = branch_upb(net, sub)
            else:
                layer, neuron = branch_baseline(sub, cfg.brancher, rng)
            children.extend(split(sub, layer, neuron))
        n_sub += len(children)

        open_children = [c for c in children if c.n_ambiguous() > 0]
        if open_children:
            _bound(open_children, net, box, cfg.child_iters, cfg)
        for c in children:
            if c.n_ambiguous() > 0:
                continue
            c.lb, x = solve_fixed_leaf(net, c, box, cfg.slack)
            if x is not None:
                best_ub = min(best_ub, float(evaluate(net, x)[0]))
            if c.lb <= 0:
                if x is not None and check_counterexample(net, x, box):
                    return done("falsified", counterexample=x, n_subproblems=n_sub, final_lb=c.lb,
                                final_ub=float(evaluate(net, x)[0]))
                log.warning("leaf with all ReLUs fixed has bound %.3g but no certified counterexample", c.lb)
                return done("timeout", n_subproblems=n_sub, final_lb=c.lb, final_ub=best_ub,
                            note="undecided fixed leaf")
        for c in children:
            if c.lb <= 0:
                heapq.heappush(queue, (c.lb, next(counter), c))
            else:
                pruned_lb = min(pruned_lb, c.lb)

        # improvement measured on the lowest-bound parent of this batch
        worst = parents[0]
        finite = [c.lb for c in children[:2] if math.isfinite(c.lb)]
        improvement = (min(finite) if finite else 0.0) - worst.lb
        global_lb = queue[0][0] if queue else pruned_lb
        now = time.perf_counter()
        trace.append((now - t0, global_lb))
        et.update(max(improvement, 0.0), global_lb, now - t_batch, len(queue))
        if queue and cfg.early_termination and early_termination_check(et, now - t0, cfg.timeout_s):
            return done("timeout", n_subproblems=n_sub, final_lb=global_lb, final_ub=best_ub,
                        note="early termination")
    return done("verified", n_subproblems=n_sub, final_lb=pruned_lb, final_ub=best_ub)


def _fixed_leaf_outcome(net, sub, box, x, done, n_sub, best_ub):
    if sub.lb > 0:
        return done("verified", n_subproblems=n_sub, final_lb=sub.lb, final_ub=best_ub)
    if x is not None and check_counterexample(net, x, box):
        return done("falsified", counterexample=x, n_subproblems=n_sub, final_lb=sub.lb,
                    final_ub=float(evaluate(net, x)[0]))
    return done("timeout", n_subproblems=n_sub, final_lb=sub.lb, final_ub=best_ub, note="undecided fixed leaf")


def _bound(subs, net, box, iters, cfg):
    """Batched dual bounding; child bounds never drop below the parent's."""
    n_hidden = net.n_layers - 1
    lbs = [np.stack([s.lbs[k] for s in subs]) for k in range(n_hidden)]
    ubs = [np.stack([s.ubs[k] for s in subs]) for k in range(n_hidden)]
    alpha = [np.stack([s.dual.alpha[k] for s in subs]) for k in range(n_hidden)]
    beta = [np.stack([s.dual.beta[k] for s in subs]) for k in range(n_hidden)]
    best, a, b, _ = dual.optimize_dual_batch(net, lbs, ubs, box, alpha, beta, iters, cfg.dual_lr, cfg.dual_decay)
    for j, s in enumerate(subs):
        s.dual = dual.DualState([x[j].copy() for x in a], [x[j].copy() for x in b], float(best[j]))
        s.lb = max(float(best[j]) - cfg.slack, s.lb)


# -- properties over several target labels --------------------------------------------

@dataclass
class PropertyResult:
    status: str
    wall_time: float
    n_subproblems: int
    final_lb: float
    final_ub: float
    counterexample: Optional[np.ndarray] = None
    trace: list = field(default_factory=list)
    runs: list = field(default_factory=list)


def verify_property(net: Network, prop: PropertySpec, cfg: BabConfig = BabConfig()):
    """One canonical run per target label; stops at the first falsified margin."""
    t0 = time.perf_counter()
    targets = [None] if prop.c is not None else prop.targets(net.output_dim)
    runs, trace = [], []
    status = "verified"
    for target in targets:
        remaining = cfg.timeout_s - (time.perf_counter() - t0)
        run_cfg = BabConfig(**{**cfg.__dict__, "timeout_s": max(remaining, 0.0)})
        cnet = canonicalize(net, prop, target_label=target) if target is not None else canonicalize(net, prop)
        if remaining <= 0:
            res = VerificationResult("timeout")
        else:
            res = verify(cnet, prop, run_cfg)
        offset = time.perf_counter() - t0 - res.wall_time
        trace += [(t + offset, lb) for t, lb in res.trace]
        runs.append(res)
        if res.status == "falsified":
            status = "falsified"
            break
        if res.status == "timeout":
            status = "timeout"
    falsified = [r for r in runs if r.status == "falsified"]
    return PropertyResult(
        status=status, wall_time=time.perf_counter() - t0,
        n_subproblems=sum(r.n_subproblems for r in runs),
        final_lb=min(r.final_lb for r in runs), final_ub=min(r.final_ub for r in runs),
        counterexample=falsified[0].counterexample if falsified else None, trace=trace, runs=runs)
