"""Acceptance suite: one test per criterion, each reporting a PASS/FAIL line.

The lines are collected in ``REPORT`` and printed in the terminal summary
(see conftest). Tolerances and sizes are pinned here.
"""
import math
import time

import numpy as np
import pytest

from veribnb import asset_path, autodiff as ad, dual
from veribnb.attacks import AttackConfig, pgd_attack
from veribnb.bab import BabConfig, Subproblem, upb_scores, verify
from veribnb.bench import run_benchmark, summarize
from veribnb.data import two_moons
from veribnb.intervals import Box, BoundsCache, hull_area, ibp_forward, make_input_box
from veribnb.network import Network, PropertySpec, evaluate, load_network, load_properties, pre_activations
from veribnb.train import (Schedules, TrainConfig, attack_points, desk_config, evaluate_model, ibpr_loss, init_params,
                           pgd_baseline, train)
from oracles import exact_min, planet_area_quad, random_net, stable_affine_min, stable_net

pytestmark = pytest.mark.acceptance

REPORT = []


def report(n, title, ok, detail):
    REPORT.append(f"[{'PASS' if ok else 'FAIL'}] criterion {n:>2}: {title} ({detail})")
    assert ok, REPORT[-1]


def _random_arch(r, max_layers=4, max_width=32):
    n_aff = int(r.integers(2, max_layers + 1))
    return [int(r.integers(2, 6))] + [int(r.integers(2, max_width + 1)) for _ in range(n_aff - 1)] + [1]


def _rel(a, b):
    a, b = np.concatenate([np.ravel(x) for x in a]), np.concatenate([np.ravel(x) for x in b])
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-12))


def _fd(f, theta, h=1e-6):
    out = []
    for i, base in enumerate(theta):
        g = np.zeros_like(base)
        for j in range(base.size):
            vals = []
            for s in (h, -h):
                pert = [t.copy() for t in theta]
                pert[i].reshape(-1)[j] += s
                vals.append(f(pert))
            g.reshape(-1)[j] = (vals[0] - vals[1]) / (2 * h)
        out.append(g)
    return out


def test_c01_ibp_soundness():
    r = np.random.default_rng(101)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(100):
        net = random_net(r, _random_arch(r), canonical=False)
        c = r.normal(size=net.input_dim)
        box = Box(c - r.uniform(0.05, 1.0), c + r.uniform(0.05, 1.0))
        b = ibp_forward(net, box)
        for k, z in enumerate(pre_activations(net, box.sample(10_000, r))):
            worst = max(worst, float(np.max(b.pre_lb[k] - z)), float(np.max(z - b.pre_ub[k])))
    dt = time.perf_counter() - t0
    report(1, "IBP soundness, 100 nets x 1e4 samples", worst <= 1e-9 and dt < 120,
           f"max violation {worst:.2e} <= 1e-9, {dt:.1f}s < 120s")


def test_c02_weak_duality():
    r = np.random.default_rng(202)
    worst_s = worst_a = -math.inf
    for _ in range(100):
        net = random_net(r, _random_arch(r, max_width=16))
        c = r.normal(size=net.input_dim)
        box = Box(c - 0.5, c + 0.5)
        bounds = ibp_forward(net, box)
        co = dual.compute_coeffs(bounds)
        sampled = float(evaluate(net, box.sample(10_000, r))[:, 0].min())
        x = pgd_attack(net, lambda out, y: ad.sum_(out, axis=1), box, np.array([0]),
                       AttackConfig(steps=20, step_size=0.1, restarts=3), rng=r)
        attacked = float(evaluate(net, x)[0])
        for _ in range(20):
            alpha = [r.random(l.size) for l in bounds.hidden_lb]
            beta = [r.exponential(size=l.size) for l in bounds.hidden_lb]
            lam, mu = dual.dual_backward(net, co, alpha, beta)
            d = dual.dual_objective(net, co, lam, mu, box)
            worst_s, worst_a = max(worst_s, d - sampled), max(worst_a, d - attacked)
    report(2, "weak duality, 100 nets x 20 (alpha, beta)", worst_s <= 1e-6 and worst_a <= 1e-6,
           f"max d_P - sampled min {worst_s:.2e}, max d_P - PGD value {worst_a:.2e}, tol 1e-6")


def test_c03_stable_exactness():
    r = np.random.default_rng(303)
    worst = 0.0
    for _ in range(100):
        d = int(r.integers(2, 6))
        lo = r.normal(size=d)
        hi = lo + r.uniform(0.1, 1.0, d)
        net, bounds = stable_net(r, [d] + _random_arch(r, max_width=12)[1:], lo, hi)
        co = dual.compute_coeffs(bounds)
        alpha = [r.random(l.size) for l in bounds.hidden_lb]
        lam, mu = dual.dual_backward(net, co, alpha, [np.zeros(l.size) for l in bounds.hidden_lb])
        got = dual.dual_objective(net, co, lam, mu, Box(lo, hi))
        worst = max(worst, abs(got - stable_affine_min(net, bounds, lo, hi)))
    report(3, "dual exact on stable nets, 100 instances", worst < 1e-8, f"max |d_P - exact| {worst:.2e} < 1e-8")


def _oracle_props(n, seed):
    r = np.random.default_rng(seed)
    out = []
    while len(out) < n:
        h1 = int(r.integers(2, 9))
        h2 = int(r.integers(2, 17 - h1))
        net = random_net(r, [2, h1, h2, 1])
        x0 = r.uniform(-1, 1, 2)
        if evaluate(net, x0)[0] <= 0:
            net = Network.from_arrays(net.weights[:-1] + (-net.weights[-1],), net.biases[:-1] + (-net.biases[-1],),
                                      canonical=True)
        prop = PropertySpec(x0, float(r.uniform(0.05, 0.8)), 0, 1, input_range=(-10, 10))
        box = make_input_box(prop)
        lo, hi = exact_min(net, box.lo, box.hi)
        if abs(lo) < 1e-4 or abs(hi) < 1e-4 or lo < 0 < hi:
            continue  # margin too thin to call either way
        out.append((net, prop, "verified" if lo > 0 else "falsified"))
    return out


def test_c04_bab_matches_oracle():
    props = _oracle_props(50, seed=404)
    agree, slowest = 0, 0.0
    n_true = sum(t == "verified" for _, _, t in props)
    for net, prop, truth in props:
        res = verify(net, prop, BabConfig(timeout_s=10.0))
        agree += res.status == truth
        slowest = max(slowest, res.wall_time)
    report(4, "BaB decisions vs input-splitting oracle, 50 props", agree == 50 and slowest < 10,
           f"{agree}/50 agree ({n_true} robust), slowest {slowest:.2f}s < 10s")


def test_c05_hull_area_identity():
    r = np.random.default_rng(505)
    worst = 0.0
    for _ in range(1000):
        l, u = -r.uniform(1e-3, 10), r.uniform(1e-3, 10)
        if r.random() < 0.1:  # stable pairs integrate to zero
            l, u = (abs(l), abs(l) + u) if r.random() < 0.5 else (-abs(l) - u, -abs(l))
        got = hull_area(BoundsCache(None, [np.array([l])], [np.array([u])]))
        ref = planet_area_quad(l, u)
        worst = max(worst, abs(got - ref) / ref if ref else abs(got))
    report(5, "hull area vs quadrature, 1000 pairs", worst < 1e-6, f"max rel err {worst:.2e} < 1e-6")


def test_c06_gradient_fidelity():
    r = np.random.default_rng(606)
    cfg = TrainConfig(total_steps=10, mixing_steps=6, epsilon_ver=0.08, alpha=1.5, reg_weight=0.5, l1_weight=1e-3)
    worst_loss = worst_dual = 0.0
    for _ in range(100):
        params = init_params([2, 6, 6, 2], seed=int(r.integers(1 << 30)))
        params = [p + r.normal(size=p.shape) * 0.2 for p in params]  # generic: no zero weights or biases
        x = r.uniform(0.2, 0.8, (5, 2))
        y = r.integers(0, 2, 5)
        x_adv = np.clip(x + r.uniform(-0.05, 0.05, x.shape), 0, 1)
        step = int(r.integers(1, 10))
        f = lambda th: ibpr_loss([ad.Tensor(t) for t in th], (x, y), step, cfg, x_adv=x_adv)[0].item()
        leaves = [ad.Tensor(p, requires_grad=True) for p in params]
        g = ad.gradient(ibpr_loss(leaves, (x, y), step, cfg, x_adv=x_adv)[0], leaves)
        worst_loss = max(worst_loss, _rel(g, _fd(f, params)))

        net = random_net(r, [3, 6, 5, 1])
        c = r.normal(size=3)
        box = Box(c - 0.6, c + 0.6)
        bounds = ibp_forward(net, box)
        co = dual.compute_coeffs(bounds)
        nh = len(bounds.hidden_lb)
        theta = [r.uniform(0.05, 0.95, l.size) for l in bounds.hidden_lb] + \
                [r.uniform(0.1, 2.0, l.size) for l in bounds.hidden_lb]
        rows, row_bias = dual._objective_rows(net, 1)
        _, g_a, g_b, _, _ = dual.dual_value_and_grad(
            net.weights[:-1], net.biases[:-1], rows, row_bias, dual._batch_coeffs(co, 1),
            [t[None] for t in theta[:nh]], [t[None] for t in theta[nh:]], box.lo[None], box.hi[None])
        fd = _fd(lambda th: dual.dual_objective_tape(net, co, [ad.Tensor(t) for t in th[:nh]],
                                                     [ad.Tensor(t) for t in th[nh:]], box).item(), theta)
        # coordinates that do not enter d_P (alpha of stable, beta of ambiguous neurons) have zero derivative
        worst_dual = max(worst_dual, _rel([a[0] for a in g_a] + [b[0] for b in g_b], fd))
    report(6, "analytic vs central-difference gradients, 100 points each",
           worst_loss < 1e-4 and worst_dual < 1e-4,
           f"ibpr_loss max rel err {worst_loss:.2e}, d_P max rel err {worst_dual:.2e}, tol 1e-4")


def test_c07_upb_on_desk_suite():
    net = load_network(asset_path("desk_model.json"))
    props = load_properties(asset_path("desk_props.json"))
    summary = {s["brancher"]: s for s in summarize(
        run_benchmark(net, props, ["upb", "random", "max_area"], BabConfig(timeout_s=10.0)))}
    upb, rnd, area = (summary[b]["mean_subproblems"] for b in ("upb", "random", "max_area"))
    report(7, "UPB mean subproblems on the desk suite", upb <= rnd and upb <= 1.1 * area,
           f"upb {upb:.1f} <= random {rnd:.1f} and <= 1.1 x max_area {area:.1f}, "
           f"over {summary['upb']['n_in_subproblem_mean']} common properties")


@pytest.mark.slow
def test_c08_training_efficacy():
    t0 = time.perf_counter()
    tr, te = two_moons(600, 0.1, seed=7, dim=50).train_test_split(0.25, seed=0)
    cfg = desk_config(epsilon_ver=0.05, hidden=(128, 128, 128), reg_weight=2e-2, lr=0.1)
    bab = BabConfig(timeout_s=2.0)
    ibpr = evaluate_model(train(cfg, tr).network, te, cfg.epsilon_ver, bab)
    pgd = evaluate_model(train(pgd_baseline(cfg), tr).network, te, cfg.epsilon_ver, bab)
    dt = time.perf_counter() - t0
    gap = 100 * (ibpr.verified_acc - pgd.verified_acc)
    drop = 100 * (pgd.natural_acc - ibpr.natural_acc)
    report(8, "IBP-R vs PGD training on 50-d two-moons, eps 0.05", gap >= 10 and drop <= 5 and dt < 900,
           f"verified {100 * ibpr.verified_acc:.1f}% vs {100 * pgd.verified_acc:.1f}% (gap {gap:.1f}pp >= 10), "
           f"natural {100 * ibpr.natural_acc:.1f}% vs {100 * pgd.natural_acc:.1f}% (drop {drop:.1f}pp <= 5), "
           f"{dt:.0f}s < 900s")


def test_c09_masking_zero_gradient():
    data = two_moons(200, 0.2, seed=9)
    cfg = desk_config(masking=True, total_steps=60, mixing_steps=20, batch_size=40, epsilon_ver=0.08)
    rng = np.random.default_rng(cfg.seed)
    sched = Schedules.of(cfg)
    arrays = init_params([2, *cfg.hidden, 2], cfg.seed)
    n_masked = worst = 0
    n_batches = 0
    for step in range(cfg.total_steps):
        idx = rng.choice(len(data), cfg.batch_size, replace=False)
        x, y = data.inputs[idx], data.labels[idx]
        theta = [ad.Tensor(a, requires_grad=True) for a in arrays]
        x_adv = attack_points(theta, x, y, sched.eps_train(step), cfg, rng)
        loss, diag = ibpr_loss(theta, (x, y), step, cfg, x_adv=x_adv)
        if diag["reg_terms"] is not None:
            n_batches += 1
            wrong = np.argmax(evaluate(Network.from_arrays(arrays[0::2], arrays[1::2]), x_adv), axis=1) != y
            for i in np.flatnonzero(wrong):
                g = ad.gradient(ad.sum_(diag["reg_terms"] * ad.Tensor(np.eye(len(y))[i])), theta)
                worst = max(worst, max(float(np.max(np.abs(gi))) for gi in g))
                n_masked += 1
        grads = ad.gradient(loss, theta)
        arrays = [a - cfg.lr * g for a, g in zip(arrays, grads)]
    report(9, "masked samples carry zero regulariser gradient", worst == 0.0 and n_masked > 0,
           f"{n_masked} masked samples over {n_batches} batches, max |grad| {worst:.1e} == 0")


def test_c10_upb_single_sweep():
    r = np.random.default_rng(1010)
    ok, seen = True, []
    for sizes in ([2, 8, 1], [3, 8, 8, 1], [4, 6, 6, 6, 6, 1]):
        net = random_net(r, sizes)
        box = Box(-np.ones(sizes[0]), np.ones(sizes[0]))
        b = ibp_forward(net, box)
        lbs, ubs = [l.copy() for l in b.hidden_lb], [u.copy() for u in b.hidden_ub]
        sub = Subproblem((), lbs, ubs, dual.DualState(dual.init_alpha(lbs, ubs), dual.init_beta(lbs)))
        dual.SWEEP_STATS.clear()
        upb_scores(net, sub)
        seen.append((dual.SWEEP_STATS["sweeps"], dual.SWEEP_STATS["layers"], len(sizes) - 2))
        ok &= seen[-1][0] == 1 and seen[-1][1] == seen[-1][2]
    report(10, "UPB scoring is one backward sweep", ok,
           ", ".join(f"sweeps {s} layers {l}/{h}" for s, l, h in seen))
