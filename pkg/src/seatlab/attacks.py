"""l-inf bounded perturbations: FGSM, RS-FGSM, PGD, MI-FGSM and the SEAT inner step.

Every attack returns a perturbation ``delta`` with ``|delta| <= eps`` and
``x + delta`` inside [0, 1].  Attacks ascend an objective; targeted modes
ascend the negative cross-entropy of the target class.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .engine import DTYPE, gradient, leaf, ops
from .linearity import linearity_error_node
from .models import Model, cross_entropy, margin_loss, one_hot

FAMILIES = ("fgsm", "rs_fgsm", "pgd", "mi_fgsm", "seat_inner")
LOSS_KINDS = ("ce", "margin")
TARGETS = ("untargeted", "random_class", "least_likely")
PGD_ALPHA = 2 / 255
MAX_STEPS = 10_000


@dataclass(frozen=True)
class AttackSpec:
    family: str = "pgd"
    eps: float = 8 / 255
    alpha: float | None = None
    steps: int = 10
    restarts: int = 1
    loss: str = "ce"
    target: str = "untargeted"
    momentum: float = 1.0
    lam: float = 0.5
    random_init: bool = True

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown attack family {self.family!r}; expected {FAMILIES}")
        if self.loss not in LOSS_KINDS:
            raise ValueError(f"unknown loss {self.loss!r}; expected {LOSS_KINDS}")
        if self.target not in TARGETS:
            raise ValueError(f"unknown target mode {self.target!r}; expected {TARGETS}")
        if self.eps < 0:
            raise ValueError("eps must be >= 0")
        if self.alpha is not None and self.alpha <= 0:
            raise ValueError("alpha must be > 0")
        if self.steps < 1 or self.restarts < 1:
            raise ValueError("steps and restarts must be >= 1")
        if self.steps * self.restarts > MAX_STEPS:
            raise ValueError(f"steps * restarts exceeds {MAX_STEPS}")
        if self.lam < 0 or self.momentum < 0:
            raise ValueError("lam and momentum must be >= 0")

    @property
    def step_size(self) -> float:
        if self.alpha is not None:
            return self.alpha
        if self.family in ("rs_fgsm", "seat_inner"):
            return 1.25 * self.eps
        if self.family == "pgd":
            return PGD_ALPHA
        if self.family == "mi_fgsm":
            return self.eps / self.steps
        return self.eps

    def with_(self, **kw) -> "AttackSpec":
        return replace(self, **kw)


def project(delta, x, eps):
    """Clip ``delta`` elementwise to [-eps, eps] and to the box ``x + delta in [0, 1]``.

    Written as one clip against precomputed bounds so that it is exactly
    idempotent in floating point.
    """
    delta = np.asarray(delta, dtype=DTYPE)
    x = np.asarray(x, dtype=DTYPE)
    if delta.shape != x.shape:
        raise ValueError(f"shape mismatch {delta.shape} vs {x.shape}")
    e = DTYPE(eps)
    lo = np.maximum(-e, -x)
    hi = np.minimum(e, DTYPE(1.0) - x)
    return np.clip(delta, lo, hi)


def uniform_init(x, eps, rng):
    return project(rng.uniform(-eps, eps, size=x.shape).astype(DTYPE), x, eps)


# -- compiled objectives -------------------------------------------------------------

def _objective(kind, logits, oh):
    if kind == "ce":
        return cross_entropy(logits, oh)
    if kind == "margin":
        return margin_loss(logits, oh)
    if kind == "target_ce":
        return ops.neg(cross_entropy(logits, oh))
    raise ValueError(kind)


def objective_grad_logits(model: Model, x, oh, kind="ce"):
    """Per-sample objective at ``x``, the gradient of its sum w.r.t. ``x``, and the logits."""
    n = x.shape[0]

    def build(m):
        xl, yl = m.input_leaf("x", n), m.label_leaf("y", n)
        logits = m.logits_node(xl)
        obj = _objective(kind, logits, yl)
        return [obj, gradient(ops.reduce_sum(obj), [xl])[xl], logits]

    prog = model.program(("objgrad", kind, n), build)
    return model.run(prog, x=x, y=oh)


def objective_and_grad(model: Model, x, oh, kind="ce"):
    obj, g, _ = objective_grad_logits(model, x, oh, kind)
    return obj, g


def objective_value(model: Model, x, oh, kind="ce"):
    n = x.shape[0]

    def build(m):
        return _objective(kind, m.logits_node(m.input_leaf("x", n)), m.label_leaf("y", n))

    return model.run(model.program(("obj", kind, n), build), x=x, y=oh)


def _targets(model, x, y, mode, rng):
    """Labels whose one-hot the attack uses, and the objective kind."""
    if mode == "untargeted":
        return y, None
    if mode == "random_class":
        c = model.num_classes
        shift = rng.integers(1, c, size=y.shape[0])
        return (y + shift) % c, "target_ce"
    if mode == "least_likely":
        return np.argmin(model.forward(x), axis=1), "target_ce"
    raise ValueError(mode)


def _prepare(model, x, y, loss, target, rng):
    x = np.asarray(x, dtype=DTYPE)
    y = np.asarray(y, dtype=np.int64)
    labels, kind = _targets(model, x, y, target, rng)
    return x, one_hot(labels, model.num_classes), kind or loss


def memoized_logits(model: Model):
    """Logits builder that reuses the forward graph for a repeated input node."""
    seen = {}

    def logits(z):
        if z not in seen:
            seen[z] = model.logits_node(z)
        return seen[z]

    return logits


# -- attacks ------------------------------------------------------------------------

def fgsm(model: Model, x, y, eps, loss="ce"):
    """delta = eps * sign(grad_x loss), zero init, projected."""
    x = np.asarray(x, dtype=DTYPE)
    oh = one_hot(np.asarray(y), model.num_classes)
    _, g = objective_and_grad(model, x, oh, loss)
    return project(DTYPE(eps) * np.sign(g), x, eps)


def rs_fgsm(model: Model, x, y, eps, alpha=None, rng=None, loss="ce"):
    """Uniform init in the ball followed by one signed step of size ``alpha``."""
    rng = rng if rng is not None else np.random.default_rng(0)
    alpha = 1.25 * eps if alpha is None else alpha
    x = np.asarray(x, dtype=DTYPE)
    oh = one_hot(np.asarray(y), model.num_classes)
    delta = uniform_init(x, eps, rng)
    _, g = objective_and_grad(model, x + delta, oh, loss)
    return project(delta + DTYPE(alpha) * np.sign(g), x, eps)


def pgd(model: Model, x, y, spec: AttackSpec, rng=None, return_losses=False):
    """Projected signed-gradient ascent, best final objective over restarts per sample."""
    rng = rng if rng is not None else np.random.default_rng(0)
    x, oh, kind = _prepare(model, x, y, spec.loss, spec.target, rng)
    alpha = DTYPE(spec.step_size)
    best = best_obj = None
    per_restart = []
    for _ in range(spec.restarts):
        delta = uniform_init(x, spec.eps, rng) if spec.random_init else np.zeros_like(x)
        for _ in range(spec.steps):
            _, g = objective_and_grad(model, x + delta, oh, kind)
            delta = project(delta + alpha * np.sign(g), x, spec.eps)
        obj = objective_value(model, x + delta, oh, kind)
        per_restart.append(obj)
        if best is None:
            best, best_obj = delta, obj
        else:
            better = obj > best_obj
            best = np.where(better.reshape((-1,) + (1,) * (x.ndim - 1)), delta, best)
            best_obj = np.where(better, obj, best_obj)
    if return_losses:
        return best, best_obj, per_restart
    return best


def mi_fgsm(model: Model, x, y, spec: AttackSpec, rng=None):
    """Momentum iterative FGSM with per-sample l1-normalized gradients."""
    rng = rng if rng is not None else np.random.default_rng(0)
    x, oh, kind = _prepare(model, x, y, spec.loss, spec.target, rng)
    alpha = DTYPE(spec.step_size)
    mu = DTYPE(spec.momentum)
    delta = np.zeros_like(x)
    acc = np.zeros_like(x)
    axes = tuple(range(1, x.ndim))
    for _ in range(spec.steps):
        _, g = objective_and_grad(model, x + delta, oh, kind)
        l1 = np.abs(g).sum(axis=axes, keepdims=True)
        # zero-gradient rows contribute nothing
        g = np.divide(g, l1, out=np.zeros_like(g), where=l1 > 0)
        acc = mu * acc + g
        delta = project(delta + alpha * np.sign(acc), x, spec.eps)
    return delta


def seat_inner_objective(adv_loss_fn, lin_loss_fn, x, delta, lam):
    """Per-sample adversarial loss at ``x + delta`` plus ``lam`` times the linearity error."""
    z = x + delta
    xi = linearity_error_node(lin_loss_fn, x, delta, adv=lin_loss_fn(z))
    return adv_loss_fn(z) + lam * xi


def seat_inner_gradient(model: Model, x, oh, delta, lam, inner="margin"):
    n = x.shape[0]

    def build(m):
        xl, dl, yl = m.input_leaf("x", n), m.input_leaf("delta", n), m.label_leaf("y", n)
        lam_leaf = leaf("lam", ())
        logits = memoized_logits(m)
        obj = seat_inner_objective(
            lambda z: _objective(inner, logits(z), yl),
            lambda z: cross_entropy(logits(z), yl),
            xl, dl, lam_leaf)
        return gradient(ops.reduce_sum(obj), [dl])[dl]

    prog = model.program(("seat_inner", inner, n), build)
    return model.run(prog, x=x, delta=delta, y=oh, lam=np.float32(lam))


def seat_inner(model: Model, x, y, eps, alpha=None, lam=0.5, rng=None, loss="margin",
               init=None):
    """One signed ascent step on margin loss + lam * xi from a uniform start.

    The linearity anchor is the clean input, so its gradient is a constant
    of the delta sub-problem.  ``init`` overrides the uniform start.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    alpha = 1.25 * eps if alpha is None else alpha
    x = np.asarray(x, dtype=DTYPE)
    oh = one_hot(np.asarray(y), model.num_classes)
    delta = uniform_init(x, eps, rng) if init is None else project(init, x, eps)
    g = seat_inner_gradient(model, x, oh, delta, lam, loss)
    return project(delta + DTYPE(alpha) * np.sign(g), x, eps)


def run_attack(model: Model, x, y, spec: AttackSpec, rng=None):
    rng = rng if rng is not None else np.random.default_rng(0)
    if spec.eps == 0:
        return np.zeros_like(np.asarray(x, dtype=DTYPE))
    if spec.family == "fgsm":
        if spec.target != "untargeted":
            # a targeted single step is one PGD step from zero
            return pgd(model, x, y, spec.with_(family="pgd", steps=1, restarts=1,
                                               random_init=False, alpha=spec.eps), rng)
        return fgsm(model, x, y, spec.eps, spec.loss)
    if spec.family == "rs_fgsm":
        return rs_fgsm(model, x, y, spec.eps, spec.step_size, rng, spec.loss)
    if spec.family == "pgd":
        return pgd(model, x, y, spec, rng)
    if spec.family == "mi_fgsm":
        return mi_fgsm(model, x, y, spec, rng)
    return seat_inner(model, x, y, spec.eps, spec.step_size, spec.lam, rng, spec.loss)
