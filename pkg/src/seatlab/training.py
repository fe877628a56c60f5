"""Adversarial training: objectives, optimizer, schedule and the epoch loop.

Methods: ``seat`` and ``seat_fl`` (single-step with the linearity
regularizer, the latter with a flooded outer loss), and the baselines
``fgsm_at``, ``rs_fgsm``, ``pgd_at``, ``trades`` and ``natural``.
"""
from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import attacks
from .attacks import AttackSpec, memoized_logits, objective_and_grad, project, uniform_init
from .data import Dataset
from .engine import DTYPE, Node, NonFiniteError, gradient, leaf, ops
from .linearity import anchor_gradient, linearity_error_node
from .models import Model, ModelSpec, cross_entropy, kl_divergence, margin_loss, one_hot

log = logging.getLogger(__name__)

METHODS = ("seat", "seat_fl", "fgsm_at", "rs_fgsm", "pgd_at", "trades", "natural")


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    method: str = "seat"
    epochs: int = 30
    batch_size: int = 128
    lr: float = 0.2
    momentum: float = 0.9
    weight_decay: float = 5e-4
    schedule: str = "cyclic"
    eps: float = 8 / 255
    alpha: float | None = None
    lam: float = 0.5
    flood: float = 0.3
    beta: float = 6.0
    inner_loss: str = "margin"
    outer_loss: str = "ce"
    pgd_steps: int = 10
    pgd_alpha: float | None = None
    trades_steps: int = 10
    trades_alpha: float | None = None
    seed: int = 0
    val_size: int = 1000
    val_steps: int = 20
    val_alpha: float | None = None
    xi_samples: int | None = None
    augment: bool = False

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.lam < 0 or self.flood < 0 or self.beta < 0:
            raise ValueError("lam, flood and beta must be >= 0")
        if self.schedule not in ("cyclic", "constant"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if self.inner_loss not in ("ce", "margin") or self.outer_loss not in ("ce", "margin"):
            raise ValueError("inner_loss and outer_loss must be 'ce' or 'margin'")

    @property
    def step_size(self) -> float:
        if self.alpha is not None:
            return self.alpha
        return self.eps if self.method == "fgsm_at" else 1.25 * self.eps

    def with_(self, **kw) -> "TrainConfig":
        return replace(self, **kw)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class MetricRecord:
    epoch: int
    sa: float
    ra_pgd20: float
    acc_fgsm: float
    mean_xi: float
    train_loss: float
    lr: float

    CSV_FIELDS = ("epoch", "sa", "ra_pgd20", "acc_fgsm", "mean_xi", "train_loss", "lr")


@dataclass
class OptimizerState:
    buffers: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros(cls, params: dict[str, np.ndarray]) -> "OptimizerState":
        return cls({k: np.zeros_like(v) for k, v in params.items()})


@dataclass
class TrainResult:
    model: Model
    history: list[MetricRecord]
    batch_log: list[dict] = field(default_factory=list)
    checkpoints: list = field(default_factory=list)
    seconds: float = 0.0


# -- small pieces ---------------------------------------------------------------------

def sgd_step(params, grads, state: OptimizerState, lr, momentum=0.9, weight_decay=5e-4):
    """v <- momentum * v + g + wd * theta;  theta <- theta - lr * v."""
    out = {}
    lr, mu, wd = DTYPE(lr), DTYPE(momentum), DTYPE(weight_decay)
    for name, theta in params.items():
        g = grads[name]
        if g.shape != theta.shape or state.buffers[name].shape != theta.shape:
            raise ValueError(f"shape mismatch for {name}")
        v = mu * state.buffers[name] + g + wd * theta
        state.buffers[name] = v
        out[name] = theta - lr * v
    state.step += 1
    return out


def cyclic_lr(step, total_steps, peak):
    """Triangular one-cycle schedule: 0 -> peak at the midpoint -> 0."""
    if not 0 <= step < total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps})")
    t = step / total_steps
    return peak * (2 * t if t <= 0.5 else 2 * (1 - t))


def flood(loss, b):
    """|L - b| + b."""
    if b < 0:
        raise ValueError("flood level must be >= 0")
    return abs(loss - b) + b


def flood_node(loss: Node, b) -> Node:
    return ops.absolute(loss - b) + b


def linearity_regularizer_node(loss_fn, x: Node, delta: Node, lam, anchor=None, adv=None):
    """lam * batch mean of the per-sample linearity error."""
    return lam * ops.mean(linearity_error_node(loss_fn, x, delta, anchor, adv))


def _model_loss_fns(model, yl):
    logits = memoized_logits(model)
    return logits, (lambda z: cross_entropy(logits(z), yl))


def linearity_regularizer(model: Model, x, y, delta, lam=0.5, with_grad=False):
    """Value of J for a batch, optionally with its parameter gradients (double backprop)."""
    x = np.asarray(x, dtype=DTYPE)
    n = x.shape[0]

    def build(m):
        xl, dl, yl = m.input_leaf("x", n), m.input_leaf("delta", n), m.label_leaf("y", n)
        _, ce = _model_loss_fns(m, yl)
        j = linearity_regularizer_node(ce, xl, dl, leaf("lam", ()))
        if not with_grad:
            return j
        grads = gradient(j, list(m.param_leaves().values()))
        return [j] + list(grads.values())

    prog = model.program(("J", with_grad, n), build)
    out = model.run(prog, x=x, delta=np.asarray(delta, dtype=DTYPE),
                    y=one_hot(np.asarray(y), model.num_classes), lam=np.float32(lam))
    if not with_grad:
        return float(out)
    return float(out[0]), dict(zip(model.params, out[1:]))


# -- outer objectives ------------------------------------------------------------------

def _plain_grads(model, x_in, oh):
    n = x_in.shape[0]

    def build(m):
        xl, yl = m.input_leaf("x", n), m.label_leaf("y", n)
        loss = ops.mean(cross_entropy(m.logits_node(xl), yl))
        return [loss] + list(gradient(loss, list(m.param_leaves().values())).values())

    out = model.run(model.program(("train_plain", n), build), x=x_in, y=oh)
    return float(out[0]), dict(zip(model.params, out[1:]))


def _seat_grads(model, x, delta, oh, lam, b, use_flood, outer_loss):
    n = x.shape[0]

    def build(m):
        xl, dl, yl = m.input_leaf("x", n), m.input_leaf("delta", n), m.label_leaf("y", n)
        lam_l, b_l = leaf("lam", ()), leaf("b", ())
        logits, ce = _model_loss_fns(m, yl)
        z = xl + dl
        adv_ce = cross_entropy(logits(z), yl)
        outer_adv = adv_ce if outer_loss == "ce" else margin_loss(logits(z), yl)
        risk = ops.mean(outer_adv)
        if use_flood:
            risk = flood_node(risk, b_l)
        anchor = anchor_gradient(ce, xl)
        xi = linearity_error_node(ce, xl, dl, anchor, adv_ce)
        total = risk + lam_l * ops.mean(xi)
        grads = gradient(total, list(m.param_leaves().values()))
        return [total, risk, ops.mean(adv_ce), ops.mean(anchor[0]), ops.mean(xi)] + list(
            grads.values())

    key = ("train_seat", use_flood, outer_loss, n)
    out = model.run(model.program(key, build), x=x, delta=delta, y=oh,
                    lam=np.float32(lam), b=np.float32(b))
    stats = dict(loss=float(out[0]), risk=float(out[1]), adv_loss=float(out[2]),
                 clean_loss=float(out[3]), xi=float(out[4]))
    return stats, dict(zip(model.params, out[5:]))


def _trades_inner(model, x, eps, alpha, steps, rng):
    n = x.shape[0]

    def build(m):
        xl, al = m.input_leaf("x", n), m.input_leaf("xadv", n)
        kl = kl_divergence(m.logits_node(xl), m.logits_node(al))
        return gradient(ops.reduce_sum(kl), [al])[al]

    prog = model.program(("trades_inner", n), build)
    delta = project(DTYPE(0.001) * rng.standard_normal(x.shape).astype(DTYPE), x, eps)
    for _ in range(steps):
        g = model.run(prog, x=x, xadv=x + delta)
        delta = project(delta + DTYPE(alpha) * np.sign(g), x, eps)
    return delta


def _trades_grads(model, x, x_adv, oh, beta):
    n = x.shape[0]

    def build(m):
        xl, al, yl = m.input_leaf("x", n), m.input_leaf("xadv", n), m.label_leaf("y", n)
        beta_l = leaf("beta", ())
        clean_logits = m.logits_node(xl)
        loss = ops.mean(cross_entropy(clean_logits, yl)) + beta_l * ops.mean(
            kl_divergence(clean_logits, m.logits_node(al)))
        return [loss] + list(gradient(loss, list(m.param_leaves().values())).values())

    out = model.run(model.program(("train_trades", n), build), x=x, xadv=x_adv, y=oh,
                    beta=np.float32(beta))
    return float(out[0]), dict(zip(model.params, out[1:]))


# -- batch steps ------------------------------------------------------------------------

def _check_finite(value, where):
    if not np.isfinite(value):
        raise TrainingError(f"non-finite loss {value} at {where}")


def seat_batch_step(model: Model, x, y, cfg: TrainConfig, state: OptimizerState, lr, rng,
                    init=None):
    """One SEAT / SEAT-FL update.  Returns the updated model and batch statistics."""
    x = np.asarray(x, dtype=DTYPE)
    oh = one_hot(np.asarray(y), model.num_classes)
    delta = attacks.seat_inner(model, x, y, cfg.eps, cfg.step_size, cfg.lam, rng,
                               cfg.inner_loss, init=init)
    stats, grads = _seat_grads(model, x, delta, oh, cfg.lam, cfg.flood,
                               cfg.method == "seat_fl", cfg.outer_loss)
    _check_finite(stats["loss"], "seat step")
    params = sgd_step(model.params, grads, state, lr, cfg.momentum, cfg.weight_decay)
    return model.with_params(params), stats


def batch_step(model: Model, x, y, cfg: TrainConfig, state: OptimizerState, lr, rng):
    """One update of ``cfg.method`` on a batch."""
    if cfg.method in ("seat", "seat_fl"):
        return seat_batch_step(model, x, y, cfg, state, lr, rng)
    x = np.asarray(x, dtype=DTYPE)
    oh = one_hot(np.asarray(y), model.num_classes)
    if cfg.method == "trades":
        delta = _trades_inner(model, x, cfg.eps, cfg.trades_alpha or cfg.eps / 4,
                              cfg.trades_steps, rng)
        loss, grads = _trades_grads(model, x, x + delta, oh, cfg.beta)
        stats = dict(loss=loss)
    else:
        if cfg.method == "natural":
            delta = np.zeros_like(x)
        elif cfg.method == "fgsm_at":
            _, g = objective_and_grad(model, x, oh, "ce")
            delta = project(DTYPE(cfg.step_size) * np.sign(g), x, cfg.eps)
        elif cfg.method == "rs_fgsm":
            delta = attacks.rs_fgsm(model, x, y, cfg.eps, cfg.step_size, rng, "ce")
        else:
            spec = AttackSpec("pgd", eps=cfg.eps, alpha=cfg.pgd_alpha, steps=cfg.pgd_steps)
            delta = attacks.pgd(model, x, y, spec, rng)
        loss, grads = _plain_grads(model, x + delta, oh)
        stats = dict(loss=loss)
    _check_finite(stats["loss"], f"{cfg.method} step")
    params = sgd_step(model.params, grads, state, lr, cfg.momentum, cfg.weight_decay)
    return model.with_params(params), stats


# -- evaluation during training -------------------------------------------------------

def epoch_metrics(model: Model, val: Dataset, train_set: Dataset, cfg: TrainConfig, epoch,
                  train_loss, lr, batch_size=256):
    from . import diagnostics

    rng = np.random.default_rng([cfg.seed, epoch, 7])
    pgd_spec = AttackSpec("pgd", eps=cfg.eps, alpha=cfg.val_alpha, steps=cfg.val_steps)
    acc = diagnostics.accuracy_battery(
        model, val, {"pgd": pgd_spec, "fgsm": AttackSpec("fgsm", eps=cfg.eps)}, rng,
        batch_size)
    xi_set = train_set if cfg.xi_samples is None else train_set.head(cfg.xi_samples)
    mean_xi = diagnostics.mean_linearity_error(model, xi_set, cfg.eps, batch_size)
    return MetricRecord(epoch=epoch, sa=acc["clean"], ra_pgd20=acc["pgd"], acc_fgsm=acc["fgsm"],
                        mean_xi=mean_xi, train_loss=train_loss, lr=lr)


def train(cfg: TrainConfig, dataset: Dataset, model_spec: ModelSpec | None = None,
          val: Dataset | None = None, checkpoint_dir=None, on_epoch=None,
          config_digest: str = "") -> TrainResult:
    """Train ``cfg.epochs`` epochs; the last ``cfg.val_size`` samples are held out when
    ``val`` is not given."""
    from . import data

    start = time.perf_counter()
    if len(dataset) == 0:
        raise TrainingError("empty dataset")
    if val is None:
        if cfg.val_size >= len(dataset):
            raise TrainingError("validation slice would consume the whole training set")
        dataset, val = dataset.split_tail(cfg.val_size)
    spec = model_spec or ModelSpec(input_shape=dataset.images.shape[1:],
                                   num_classes=dataset.num_classes)
    model = Model.init(spec, cfg.seed)
    state = OptimizerState.zeros(model.params)
    rng = np.random.default_rng(cfg.seed)
    steps_per_epoch = -(-len(dataset) // cfg.batch_size)
    total = cfg.epochs * steps_per_epoch
    history, batch_log, ckpts = [], [], []
    lr = 0.0
    for epoch in range(cfg.epochs):
        losses = []
        for b, (xb, yb) in enumerate(dataset.batches(cfg.batch_size, rng)):
            if cfg.augment:
                xb = data.augment(xb, rng)
            step = epoch * steps_per_epoch + b
            lr = cyclic_lr(step, total, cfg.lr) if cfg.schedule == "cyclic" else cfg.lr
            try:
                model, stats = batch_step(model, xb, yb, cfg, state, lr, rng)
            except (TrainingError, NonFiniteError) as exc:
                raise TrainingError(f"epoch {epoch} batch {b}: {exc}") from exc
            losses.append(stats["loss"])
            batch_log.append(dict(epoch=epoch, batch=b, lr=lr, **stats))
        record = epoch_metrics(model, val, dataset, cfg, epoch, float(np.mean(losses)), lr)
        history.append(record)
        log.info("epoch %d: %s", epoch, record)
        if checkpoint_dir is not None:
            path = data.checkpoint_path(checkpoint_dir, epoch)
            data.save_checkpoint(model, path, step=state.step, rng=rng,
                                 config_digest=config_digest)
            ckpts.append(path)
        if on_epoch is not None:
            on_epoch(record, model)
    return TrainResult(model, history, batch_log, ckpts, time.perf_counter() - start)
