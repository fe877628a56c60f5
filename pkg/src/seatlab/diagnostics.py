"""Measurements on a model snapshot: linearity error, Lipschitz estimates, bound
checks, loss landscapes, decision-boundary grids, robust accuracy and a detector
for catastrophic overfitting.

Everything here is read-only with respect to the model.  Sums of a few float32
quantities (residuals, slacks) are formed in float64.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .attacks import AttackSpec, objective_and_grad, objective_value, project, run_attack
from .data import Dataset
from .engine import DTYPE, gradient, leaf, ops
from .models import Model, one_hot

LIPSCHITZ_STEPS = 50
GRID_RESOLUTION = 25
CO_RA_DROP = 0.30
CO_FGSM_TOLERANCE = 0.05


def _rows(a):
    return np.asarray(a, dtype=np.float64).reshape(len(a), -1)


def _chunks(n, batch_size):
    for i in range(0, n, batch_size):
        yield slice(i, min(n, i + batch_size))


# -- linearity error ---------------------------------------------------------------------

def taylor_terms(model: Model, x, y, delta):
    """(clean CE, CE at x + delta, <delta, grad_x CE(x)>) per sample, float64."""
    x = np.asarray(x, dtype=DTYPE)
    delta = np.asarray(delta, dtype=DTYPE)
    oh = one_hot(np.asarray(y), model.num_classes)
    clean, g = objective_and_grad(model, x, oh, "ce")
    adv = objective_value(model, x + delta, oh, "ce")
    dot = (_rows(delta) * _rows(g)).sum(axis=1)
    return clean.astype(np.float64), adv.astype(np.float64), dot, g


def linearity_error(model: Model, x, y, delta) -> np.ndarray:
    """Per-sample xi = |l(x + delta) - l(x) - <delta, grad l(x)>| with l = CE."""
    clean, adv, dot, _ = taylor_terms(model, x, y, delta)
    return np.abs(adv - clean - dot)


def fgsm_linearity_error(model: Model, x, y, eps) -> np.ndarray:
    """xi at the FGSM perturbation, sharing the one clean-gradient evaluation."""
    x = np.asarray(x, dtype=DTYPE)
    oh = one_hot(np.asarray(y), model.num_classes)
    clean, g = objective_and_grad(model, x, oh, "ce")
    delta = project(DTYPE(eps) * np.sign(g), x, eps)
    adv = objective_value(model, x + delta, oh, "ce")
    dot = (_rows(delta) * _rows(g)).sum(axis=1)
    return np.abs(adv.astype(np.float64) - clean - dot)


def mean_linearity_error(model: Model, dataset: Dataset, eps, batch_size=256) -> float:
    """Dataset mean of xi with delta the per-sample FGSM perturbation."""
    total = 0.0
    for sl in _chunks(len(dataset), batch_size):
        total += fgsm_linearity_error(model, dataset.images[sl], dataset.labels[sl], eps).sum()
    return total / len(dataset)


# -- accuracy ----------------------------------------------------------------------------

def accuracy_battery(model: Model, dataset: Dataset, specs: dict, rng=None, batch_size=256):
    """Clean accuracy plus the accuracy under each named attack, as fractions."""
    rng = rng if rng is not None else np.random.default_rng(0)
    hits = dict.fromkeys(["clean", *specs], 0)
    for sl in _chunks(len(dataset), batch_size):
        x, y = dataset.images[sl], dataset.labels[sl]
        hits["clean"] += int((model.predict(x) == y).sum())
        for name, spec in specs.items():
            delta = run_attack(model, x, y, spec, rng)
            hits[name] += int((model.predict(x + delta) == y).sum())
    return {k: v / len(dataset) for k, v in hits.items()}


def robust_accuracy(model: Model, dataset: Dataset, attack: AttackSpec, rng=None,
                    batch_size=256) -> dict:
    """{'sa': clean accuracy, 'ra': accuracy on attacked inputs}."""
    acc = accuracy_battery(model, dataset, {"ra": attack}, rng, batch_size)
    return {"sa": acc["clean"], "ra": acc["ra"]}


# -- empirical Lipschitz constant -------------------------------------------------------

@dataclass
class LipschitzReport:
    lower: float
    upper: float
    per_sample_lower: np.ndarray
    per_sample_upper: np.ndarray
    eps: float
    steps: int
    step_size: float
    meta: dict = field(default_factory=dict)


def _ratio_program(model: Model, n):
    """r(delta) = ||f(x + delta) - f(x)||_1 / ||delta||_inf per sample, and grad_delta sum r."""

    def build(m):
        xl, dl = m.input_leaf("x", n), m.input_leaf("delta", n)
        fx = leaf("fx", (n, m.num_classes))
        diff = m.logits_node(xl + dl) - fx
        num = ops.reduce_sum(ops.absolute(diff), axes=(1,))
        den = ops.reduce_max(ops.absolute(ops.flatten(dl)), axis=1)
        r = num * ops.recip(den)
        return [r, gradient(ops.reduce_sum(r), [dl])[dl]]

    return model.program(("lipschitz_ratio", n), build)


def _keep_away_from_zero(delta, x, eps):
    """Rows with ||delta||_inf < eps * 1e-3 are pushed out to that radius.

    The push direction is +1 where x <= 0.5 and -1 elsewhere, which is always
    feasible inside [0, 1].
    """
    floor = DTYPE(eps * 1e-3)
    norms = np.abs(delta).reshape(len(delta), -1).max(axis=1)
    small = norms < floor
    if small.any():
        push = np.where(x[small] <= 0.5, floor, -floor).astype(DTYPE)
        delta = delta.copy()
        delta[small] = project(push, x[small], eps)
    return delta


def lipschitz_search(model: Model, x, eps, steps=LIPSCHITZ_STEPS, step_size=None, rng=None,
                     init=None):
    """Per-sample (min, max) of the logit ratio found by signed-gradient descent and
    ascent from a shared uniform start.  Both searches include the start, so the
    minimum never exceeds the maximum."""
    if eps <= 0:
        raise ValueError("eps must be > 0")
    rng = rng if rng is not None else np.random.default_rng(0)
    x = np.asarray(x, dtype=DTYPE)
    n = len(x)
    alpha = DTYPE(eps / 10 if step_size is None else step_size)
    prog = _ratio_program(model, n)
    fx = model.forward(x)
    if init is None:
        init = rng.uniform(-eps, eps, size=x.shape).astype(DTYPE)
    start = _keep_away_from_zero(project(init, x, eps), x, eps)
    found = []
    for sign in (-1, 1):
        delta = start
        best = None
        for it in range(steps + 1):
            r, g = model.run(prog, x=x, delta=delta, fx=fx)
            r = r.astype(np.float64)
            best = r if best is None else (np.minimum(best, r) if sign < 0 else np.maximum(best, r))
            if it == steps:
                break
            delta = project(delta + sign * alpha * np.sign(g), x, eps)
            delta = _keep_away_from_zero(delta, x, eps)
        found.append(best)
    return found[0], found[1]


def empirical_lipschitz(model: Model, dataset: Dataset, eps, steps=LIPSCHITZ_STEPS,
                        step_size=None, seed=0, batch_size=256) -> LipschitzReport:
    """Dataset means of the minimized (lower) and maximized (upper) ratio
    ||f(x + delta) - f(x)||_1 / ||delta||_inf over the eps-ball."""
    rng = np.random.default_rng(seed)
    lows, highs = [], []
    for sl in _chunks(len(dataset), batch_size):
        lo, hi = lipschitz_search(model, dataset.images[sl], eps, steps, step_size, rng)
        lows.append(lo)
        highs.append(hi)
    lo, hi = np.concatenate(lows), np.concatenate(highs)
    alpha = eps / 10 if step_size is None else step_size
    return LipschitzReport(float(lo.mean()), float(hi.mean()), lo, hi, float(eps), steps, alpha,
                           {"init": "uniform", "restarts": 1, "seed": seed})


# -- bound checks ----------------------------------------------------------------------------

def property1_bound_check(model: Model, x, y, delta) -> np.ndarray:
    """Per-sample slack (|l(x+d) - l(x)| + ||d||_2 ||grad l(x)||_2) - xi, which is >= 0
    by the triangle and Cauchy-Schwarz inequalities."""
    clean, adv, dot, g = taylor_terms(model, x, y, delta)
    xi = np.abs(adv - clean - dot)
    cs = np.linalg.norm(_rows(delta), axis=1) * np.linalg.norm(_rows(g), axis=1)
    return np.abs(adv - clean) + cs - xi


def property1_report(model: Model, x, y, delta, eps) -> dict:
    """Verified Cauchy-Schwarz slack next to the tighter claim
    xi <= (eps + ||d||_2 / sqrt(n)) ||grad l||_1, which is reported but not relied on."""
    clean, adv, dot, g = taylor_terms(model, x, y, delta)
    xi = np.abs(adv - clean - dot)
    d, gr = _rows(delta), _rows(g)
    slack = np.abs(adv - clean) + np.linalg.norm(d, axis=1) * np.linalg.norm(gr, axis=1) - xi
    claimed = (eps + np.linalg.norm(d, axis=1) / np.sqrt(d.shape[1])) * np.abs(gr).sum(axis=1)
    return {"xi": xi, "slack": slack, "verified": bool((slack >= -1e-5).all()),
            "claimed_bound": claimed, "claimed_holds": claimed >= xi,
            "claimed_status": "claimed bound, not verified"}


def property2_bound_check(model: Model, x, y, delta) -> np.ndarray:
    """Per-sample slack of |l(x+d) - l(x)| / ||d||_2 <= (xi + |<d, grad l(x)>|) / ||d||_2.

    Every row of ``delta`` must be nonzero.
    """
    clean, adv, dot, _ = taylor_terms(model, x, y, delta)
    norm = np.linalg.norm(_rows(delta), axis=1)
    if (norm == 0).any():
        raise ValueError("property 2 needs nonzero perturbations")
    xi = np.abs(adv - clean - dot)
    return (xi + np.abs(dot)) / norm - np.abs(adv - clean) / norm


# -- grids ---------------------------------------------------------------------------------

@dataclass
class LandscapeGrid:
    """values[i, j] at coefficients (k[i], v[j]) along two directions."""
    kind: str
    k: np.ndarray
    v: np.ndarray
    values: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def origin(self):
        return self.values[np.argmin(np.abs(self.k)), np.argmin(np.abs(self.v))]


def rademacher(shape, seed):
    return np.random.default_rng(seed).choice(np.array([-1, 1], dtype=DTYPE), size=shape)


def _grid_inputs(x, g_dir, r_dir, ks, vs, eps, clip):
    tail = (1,) * x.ndim
    kc = (DTYPE(eps) * ks.astype(DTYPE)).reshape((-1, 1) + tail)
    vc = (DTYPE(eps) * vs.astype(DTYPE)).reshape((1, -1) + tail)
    pts = x[None, None] + kc * g_dir + vc * r_dir
    pts = pts.reshape((len(ks) * len(vs),) + x.shape)
    return np.clip(pts, 0, 1) if clip else pts


def _eval_rows(fn, pts, n_rows):
    """Apply ``fn`` to one grid row at a time so every call has the same batch size."""
    per = len(pts) // n_rows
    return np.stack([fn(pts[i * per:(i + 1) * per]) for i in range(n_rows)])


def input_landscape(model: Model, x, y, eps, resolution=GRID_RESOLUTION, seed=0, clip=True):
    """CE loss on x + k eps g + v eps r with g = sign(grad_x l), r Rademacher,
    k, v in [0, 1]."""
    x = np.asarray(x, dtype=DTYPE)
    oh = one_hot(np.array([y]), model.num_classes)
    _, g = objective_and_grad(model, x[None], oh, "ce")
    g_dir = np.sign(g[0])
    r_dir = rademacher(x.shape, seed)
    ks = vs = np.linspace(0.0, 1.0, resolution)
    pts = _grid_inputs(x, g_dir, r_dir, ks, vs, eps, clip)
    ohs = np.repeat(oh, resolution, axis=0)
    values = _eval_rows(lambda p: objective_value(model, p, ohs, "ce"), pts, resolution)
    return LandscapeGrid("input_loss", ks, vs, values.astype(np.float64),
                         {"eps": eps, "seed": seed, "clip": clip, "axis1": "sign_grad",
                          "axis2": "rademacher"})


@dataclass
class BoundaryResult:
    grid: LandscapeGrid
    correct_fraction: float
    distorted: bool


def distortion_flag(labels_along_k, y) -> bool:
    """Correct at the full-eps corner but wrong somewhere strictly inside."""
    labels_along_k = np.asarray(labels_along_k)
    return bool(labels_along_k[-1] == y and (labels_along_k[1:-1] != y).any())


def decision_boundary(model: Model, x, y, eps, resolution=GRID_RESOLUTION, seed=0, clip=True):
    """Predicted labels on x + k eps r1 + v eps r2, r1 the FGSM direction and r2 Rademacher."""
    x = np.asarray(x, dtype=DTYPE)
    oh = one_hot(np.array([y]), model.num_classes)
    _, g = objective_and_grad(model, x[None], oh, "ce")
    ks = vs = np.linspace(0.0, 1.0, resolution)
    pts = _grid_inputs(x, np.sign(g[0]), rademacher(x.shape, seed), ks, vs, eps, clip)
    labels = _eval_rows(model.predict, pts, resolution)
    grid = LandscapeGrid("decision", ks, vs, labels,
                         {"eps": eps, "seed": seed, "clip": clip, "label": int(y),
                          "axis1": "fgsm", "axis2": "rademacher"})
    return BoundaryResult(grid, float((labels == y).mean()), distortion_flag(labels[:, 0], y))


def fgsm_axis_labels(model: Model, x, y, eps, resolution=GRID_RESOLUTION, clip=True):
    """Predicted labels along the v = 0 row only, for a batch of samples: [N, resolution]."""
    x = np.asarray(x, dtype=DTYPE)
    y = np.asarray(y)
    _, g = objective_and_grad(model, x, one_hot(y, model.num_classes), "ce")
    ks = np.linspace(0.0, 1.0, resolution).astype(DTYPE)
    out = np.empty((len(x), resolution), dtype=np.int64)
    for j, k in enumerate(ks):
        pts = x + DTYPE(eps) * k * np.sign(g)
        out[:, j] = model.predict(np.clip(pts, 0, 1) if clip else pts)
    return out


def distortion_rate(model: Model, dataset: Dataset, eps, resolution=GRID_RESOLUTION,
                    batch_size=256) -> float:
    """Fraction of samples whose FGSM axis shows the distortion pattern."""
    flagged = 0
    for sl in _chunks(len(dataset), batch_size):
        labels = fgsm_axis_labels(model, dataset.images[sl], dataset.labels[sl], eps, resolution)
        flagged += sum(distortion_flag(row, yy) for row, yy in zip(labels, dataset.labels[sl]))
    return flagged / len(dataset)


def filter_normalized_direction(params: dict, rng) -> dict:
    """Gaussian direction rescaled tensor by tensor to the norm of the matching parameter."""
    out = {}
    for name, theta in params.items():
        d = rng.standard_normal(theta.shape)
        dn = np.linalg.norm(d)
        out[name] = (d * (np.linalg.norm(theta) / dn if dn > 0 else 0.0)).astype(DTYPE)
    return out


def adversarial_loss(model: Model, dataset: Dataset, eps, batch_size=256) -> float:
    """Mean CE at the FGSM perturbation of each sample."""
    total = 0.0
    for sl in _chunks(len(dataset), batch_size):
        x, y = dataset.images[sl], dataset.labels[sl]
        oh = one_hot(y, model.num_classes)
        _, g = objective_and_grad(model, x, oh, "ce")
        delta = project(DTYPE(eps) * np.sign(g), x, eps)
        total += objective_value(model, x + delta, oh, "ce").astype(np.float64).sum()
    return total / len(dataset)


def _coefficients(span, resolution):
    c = np.linspace(-span, span, resolution)
    if resolution % 2:
        c[resolution // 2] = 0.0  # exact origin cell
    return c


def weight_landscape(model: Model, dataset: Dataset, eps, mode="1d", span=1.0,
                     resolution=GRID_RESOLUTION, seed=0, batch_size=256) -> LandscapeGrid:
    """FGSM-adversarial loss at theta + a d1 (+ b d2), a, b in [-span, span]."""
    if mode not in ("1d", "2d"):
        raise ValueError(f"mode must be '1d' or '2d', got {mode!r}")
    rng = np.random.default_rng(seed)
    d1 = filter_normalized_direction(model.params, rng)
    d2 = filter_normalized_direction(model.params, rng) if mode == "2d" else None
    a = _coefficients(span, resolution)
    b = _coefficients(span, resolution) if mode == "2d" else np.zeros(1)
    values = np.empty((len(a), len(b)))
    for i, ai in enumerate(a):
        for j, bj in enumerate(b):
            params = {}
            for name, theta in model.params.items():
                p = theta + DTYPE(ai) * d1[name]
                if d2 is not None:
                    p = p + DTYPE(bj) * d2[name]
                params[name] = p
            values[i, j] = adversarial_loss(model.with_params(params), dataset, eps, batch_size)
    return LandscapeGrid(f"weight_loss_{mode}", a, b, values,
                         {"eps": eps, "seed": seed, "span": span, "normalization": "filter"})


# -- catastrophic overfitting -------------------------------------------------------------

def _field(rec, name):
    return rec[name] if isinstance(rec, dict) else getattr(rec, name)


def detect_catastrophic_overfitting(history, ra_key="ra_pgd20", fgsm_key="acc_fgsm",
                                    drop=CO_RA_DROP, tolerance=CO_FGSM_TOLERANCE):
    """First epoch index whose PGD accuracy sits more than ``drop`` below the running
    maximum while FGSM accuracy fell by at most ``tolerance`` from the previous epoch.
    Accuracies are fractions.  Returns None if no such epoch exists."""
    if len(history) < 2:
        raise ValueError("need at least two epochs of history")
    best = _field(history[0], ra_key)
    for t in range(1, len(history)):
        ra = _field(history[t], ra_key)
        fg_drop = _field(history[t - 1], fgsm_key) - _field(history[t], fgsm_key)
        if best - ra > drop and fg_drop <= tolerance:
            return t
        best = max(best, ra)
    return None
