"""IBP-R training: attack loss on an enlarged box plus a Planet-area regulariser.

The loss at a given step is::

    kappa * [CE(f(x_adv), y) + reg_weight * sum_k [-l_k]_+ . [u_k]_+]
        + (1 - kappa) * CE(f(x), y) + l1_weight * |theta|_1

where ``x_adv`` is a PGD point in the box of radius ``eps_train`` around ``x``
and ``l_k, u_k`` are IBP bounds over that same box. Both ``kappa`` and
``eps_train`` ramp linearly during the mixing phase.
"""
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .attacks import (AttackConfig, DEFAULT_MIFGSM_GRID, check_counterexample, cross_entropy_loss,
                      mifgsm_attack, pgd_attack)
from .bab import BabConfig, verify_property
from .data import Dataset
from .intervals import Box, hull_area_tape, ibp_tape, make_input_box
from .network import (Network, PropertySpec, canonicalize, evaluate, forward_tape, load_network,
                      network_to_dict)

log = logging.getLogger(__name__)


class TrainingDiverged(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    """Hyper-parameters. Defaults target small-radius image training; ``desk_config`` is the two-moons setting."""
    epsilon_ver: float = 2 / 255
    alpha: float = 2.1            # box enlargement used during training
    reg_weight: float = 1e-4      # coefficient of sum [-l]_+ [u]_+ (i.e. rho / 2)
    l1_weight: float = 2e-5
    lr: float = 1e-2
    lr_decay: float = 0.95
    batch_size: int = 100
    total_steps: int = 800
    mixing_steps: int = 600
    attack: AttackConfig = AttackConfig(steps=8, step_size=0.25)
    masking: bool = False
    seed: int = 0
    hidden: tuple = (16, 16)
    kappa_ramp: bool = True       # False keeps kappa at 1 from the first step

    def __post_init__(self):
        if self.alpha < 1:
            raise ValueError("alpha must be >= 1")
        if not 0 <= self.mixing_steps <= self.total_steps:
            raise ValueError("need 0 <= mixing_steps <= total_steps")
        if self.epsilon_ver < 0 or self.reg_weight < 0 or self.l1_weight < 0:
            raise ValueError("epsilon_ver, reg_weight and l1_weight must be non-negative")
        if self.lr <= 0 or not 0 < self.lr_decay <= 1 or self.batch_size < 1:
            raise ValueError("need lr > 0, 0 < lr_decay <= 1 and batch_size >= 1")

    @classmethod
    def from_dict(cls, doc, base=None):
        """Build from a JSON-style dict; ``base`` supplies values for missing keys."""
        doc = dict(doc)
        unknown = set(doc) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown training options: {sorted(unknown)}")
        if isinstance(doc.get("attack"), dict):
            doc["attack"] = AttackConfig(**doc["attack"])
        if "hidden" in doc:
            doc["hidden"] = tuple(doc["hidden"])
        return replace(base, **doc) if base is not None else cls(**doc)

    def to_dict(self):
        doc = asdict(self)
        doc["hidden"] = list(self.hidden)
        return doc


def desk_config(**overrides):
    """Two-moons setting used by the regression and acceptance runs."""
    base = TrainConfig(epsilon_ver=0.02, alpha=1.5, reg_weight=1e-2, l1_weight=1e-5, lr=0.5,
                       lr_decay=0.95, batch_size=50, total_steps=1200, mixing_steps=600,
                       hidden=(16, 16))
    return replace(base, **overrides)


def pgd_baseline(cfg: TrainConfig):
    """Plain PGD adversarial training with the same budget."""
    return replace(cfg, reg_weight=0.0, alpha=1.0, kappa_ramp=False)


@dataclass(frozen=True)
class Schedules:
    mixing_steps: int
    eps_max: float
    kappa_ramp: bool = True

    @classmethod
    def of(cls, cfg: TrainConfig):
        return cls(cfg.mixing_steps, cfg.alpha * cfg.epsilon_ver, cfg.kappa_ramp)

    def _frac(self, step):
        if self.mixing_steps == 0:
            return 1.0
        return min(max(step / self.mixing_steps, 0.0), 1.0)

    def kappa(self, step):
        return self._frac(step) if self.kappa_ramp else 1.0

    def eps_train(self, step):
        return self._frac(step) * self.eps_max


def init_params(sizes, seed=0):
    """He-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    params = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = math.sqrt(6.0 / fan_in)
        params.append(rng.uniform(-bound, bound, (fan_out, fan_in)))
        params.append(np.zeros(fan_out))
    return params


def params_to_network(params, **meta):
    arrays = [p.data if isinstance(p, ad.Tensor) else p for p in params]
    return Network.from_arrays(arrays[0::2], arrays[1::2], **meta)


def _train_box(x, eps, input_range=(0.0, 1.0)):
    lo = np.clip(x - eps, *input_range)
    hi = np.clip(x + eps, *input_range)
    return lo, hi


def regularizer_terms(params, lo, hi, mask=None):
    """Per-sample Planet-area regulariser ``sum_k [-l_k]_+ . [u_k]_+`` over all layers.

    With ``mask`` the (B,) result is multiplied by it elementwise, so a masked
    sample contributes nothing, gradient included.
    """
    pre_lb, pre_ub = ibp_tape(params, lo, hi)
    terms = ad.scale(hull_area_tape(pre_lb, pre_ub), 2.0)
    if mask is not None:
        terms = terms * ad.Tensor(np.asarray(mask, np.float64))
    return terms


def attack_points(params, x, y, eps, cfg: TrainConfig, rng):
    if eps <= 0:
        return x.copy()
    lo, hi = _train_box(x, eps)
    net = [ad.Tensor(p.data if isinstance(p, ad.Tensor) else p) for p in params]
    return pgd_attack(net, cross_entropy_loss, Box(lo, hi), y, cfg.attack, rng=rng, eps=eps)


def ibpr_loss(params, batch, step, cfg: TrainConfig, x_adv=None, rng=None):
    """Training objective at ``step``; returns ``(loss Tensor, diagnostics)``.

    ``x_adv`` overrides the PGD point (handy for tests). Diagnostics hold the
    schedule values, the loss components and the per-sample regulariser
    Tensor under ``"reg_terms"``.
    """
    if not 0 <= step < cfg.total_steps:
        raise ValueError(f"step {step} outside [0, {cfg.total_steps})")
    x, y = batch
    x = np.asarray(x, np.float64)
    y = np.asarray(y)
    sched = Schedules.of(cfg)
    kappa, eps = sched.kappa(step), sched.eps_train(step)
    if x_adv is None:
        x_adv = attack_points(params, x, y, eps, cfg, rng or np.random.default_rng(cfg.seed + step))

    natural = ad.cross_entropy(forward_tape(params, x), y)
    terms = [ad.scale(natural, 1.0 - kappa)] if kappa < 1 else []
    diag = {"kappa": kappa, "eps_train": eps, "natural_loss": natural.item()}
    adv_loss = reg_mean = masked = 0.0
    reg_terms = None
    if kappa > 0:
        logits_adv = forward_tape(params, x_adv)
        adv = ad.cross_entropy(logits_adv, y)
        inner = adv
        adv_loss = adv.item()
        if cfg.reg_weight > 0:
            mask = None
            if cfg.masking:
                mask = (np.argmax(logits_adv.data, axis=1) == y).astype(np.float64)
                masked = float(1.0 - mask.mean())
            lo, hi = _train_box(x, eps)
            reg_terms = regularizer_terms(params, lo, hi, mask)
            reg = ad.mean(reg_terms)
            reg_mean = reg.item()
            inner = inner + ad.scale(reg, cfg.reg_weight)
        terms.append(ad.scale(inner, kappa))
    if cfg.l1_weight > 0:
        l1 = None
        for p in params:
            s = ad.sum_(ad.abs_(p))
            l1 = s if l1 is None else l1 + s
        terms.append(ad.scale(l1, cfg.l1_weight))
    loss = terms[0]
    for t in terms[1:]:
        loss = loss + t
    diag.update(adv_loss=adv_loss, reg_mean=reg_mean, masked_fraction=masked, loss=loss.item(),
                reg_terms=reg_terms)
    return loss, diag


METRIC_FIELDS = ("step", "epoch", "lr", "kappa", "eps_train", "loss", "natural_loss", "adv_loss",
                 "reg_mean", "masked_fraction")


@dataclass
class TrainResult:
    params: list
    metrics: list          # one dict per step, keys METRIC_FIELDS
    config: TrainConfig
    n_classes: int
    wall_time: float = 0.0
    lr: float = 0.0

    @property
    def network(self):
        return params_to_network(self.params)

    def epoch_log(self):
        """Mean natural and adversarial loss per epoch."""
        out = {}
        for row in self.metrics:
            out.setdefault(row["epoch"], []).append(row)
        return [{"epoch": e, "natural_loss": float(np.mean([r["natural_loss"] for r in rows])),
                 "adv_loss": float(np.mean([r["adv_loss"] for r in rows]))} for e, rows in out.items()]


def train(cfg: TrainConfig, data: Dataset, params=None):
    """Mini-batch SGD on ``ibpr_loss``; the learning rate decays once per epoch after mixing."""
    if len(data) == 0:
        raise ValueError("training data is empty")
    t0 = time.perf_counter()
    rng = np.random.default_rng(cfg.seed)
    sizes = [data.dim, *cfg.hidden, data.n_classes]
    arrays = init_params(sizes, cfg.seed) if params is None else [np.array(p, np.float64) for p in params]
    per_epoch = math.ceil(len(data) / cfg.batch_size)
    lr = cfg.lr
    metrics = []
    order = rng.permutation(len(data))
    for step in range(cfg.total_steps):
        epoch, pos = divmod(step, per_epoch)
        if pos == 0 and step > 0:
            order = rng.permutation(len(data))
            if step > cfg.mixing_steps:
                lr *= cfg.lr_decay
        idx = order[pos * cfg.batch_size:(pos + 1) * cfg.batch_size]
        theta = [ad.Tensor(a, requires_grad=True) for a in arrays]
        try:
            loss, diag = ibpr_loss(theta, (data.inputs[idx], data.labels[idx]), step, cfg, rng=rng)
            grads = ad.gradient(loss, theta)
        except (ad.NonFiniteError, FloatingPointError) as exc:
            raise TrainingDiverged(f"non-finite value at step {step} (epoch {epoch}, lr {lr:.3g}): {exc}") from exc
        if not math.isfinite(loss.item()):
            raise TrainingDiverged(f"non-finite loss at step {step} (epoch {epoch}, lr {lr:.3g})")
        arrays = [a - lr * g for a, g in zip(arrays, grads)]
        metrics.append({"step": step, "epoch": epoch, "lr": lr,
                        **{k: diag[k] for k in METRIC_FIELDS[3:]}})
        if step % max(per_epoch, 1) == 0:
            log.debug("step %d loss %.4f nat %.4f adv %.4f reg %.4g", step, diag["loss"],
                      diag["natural_loss"], diag["adv_loss"], diag["reg_mean"])
    return TrainResult(arrays, metrics, cfg, data.n_classes, time.perf_counter() - t0, lr)


# -- evaluation ------------------------------------------------------------------------

@dataclass
class EvalResult:
    natural_acc: float
    robust_acc: float
    verified_acc: float
    n: int
    statuses: list = field(default_factory=list)
    wall_time: float = 0.0


def evaluate_model(net: Network, data: Dataset, eps_ver, bab_cfg: BabConfig = BabConfig(),
                   attack_grid=DEFAULT_MIFGSM_GRID, seed=0):
    """Natural, attack-robust and verified accuracy at radius ``eps_ver``.

    Only correctly classified points are attacked, and only points that
    survive the attack are passed to the verifier, so the three accuracies are
    ordered by construction.
    """
    t0 = time.perf_counter()
    pred = np.argmax(evaluate(net, data.inputs), axis=1)
    correct = pred == data.labels
    n = len(data)
    statuses = ["misclassified" if not c else None for c in correct]
    if eps_ver <= 0:
        statuses = [s or "verified" for s in statuses]
        acc = float(correct.mean())
        return EvalResult(acc, acc, acc, n, statuses, time.perf_counter() - t0)
    robust = verified = 0
    for i in np.flatnonzero(correct):
        prop = PropertySpec(data.inputs[i], eps_ver, int(data.labels[i]), "all", data.input_range)
        if _attacked(net, prop, attack_grid, seed):
            statuses[i] = "falsified"
            continue
        robust += 1
        res = verify_property(net, prop, replace(bab_cfg, seed=seed))
        statuses[i] = res.status
        verified += res.status == "verified"
    return EvalResult(float(correct.mean()), robust / n, verified / n, n, statuses, time.perf_counter() - t0)


def _attacked(net, prop, grid, seed):
    box = make_input_box(prop)
    for target in prop.targets(net.output_dim):
        cnet = canonicalize(net, prop, target_label=target)
        x = mifgsm_attack(cnet, box, grid, seed=seed)
        if check_counterexample(cnet, x, box):
            return True
    return False


# -- checkpoints -------------------------------------------------------------------------

def save_checkpoint(path, result: TrainResult):
    doc = network_to_dict(result.network)
    doc["training_state"] = {"step": len(result.metrics), "lr": result.lr, "seed": result.config.seed,
                             "optimizer": "sgd", "config": result.config.to_dict()}
    Path(path).write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")


def load_checkpoint(path):
    """Returns ``(network, training_state)``."""
    net = load_network(path)
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    return net, doc.get("training_state", {})
