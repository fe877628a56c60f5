"""Desk-scale classifiers and the losses used by attacks and training."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .engine import DTYPE, Node, Program, constant, leaf
from .engine import ops

ARCHS = ("mlp", "cnn")
# Added to the true-class logit so that a max over the row picks the best other class.
_EXCLUDE = 1e9


@dataclass(frozen=True)
class ModelSpec:
    """Architecture descriptor.

    ``mlp``: flatten -> dense(hidden[i]) + ReLU ... -> linear head.
    ``cnn``: for each entry of ``channels`` a 3x3 same-padded conv + ReLU +
    2x2 average pool, then the ``hidden`` dense layers and the head.
    """

    arch: str = "cnn"
    input_shape: tuple = (1, 28, 28)
    num_classes: int = 10
    hidden: tuple = (128,)
    channels: tuple = (16, 32)

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        object.__setattr__(self, "hidden", tuple(int(s) for s in self.hidden))
        object.__setattr__(self, "channels", tuple(int(s) for s in self.channels))
        if self.arch not in ARCHS:
            raise ValueError(f"unknown architecture {self.arch!r}; expected one of {ARCHS}")
        if self.num_classes < 2:
            raise ValueError("need at least two classes")
        if self.arch == "cnn":
            if len(self.input_shape) != 3:
                raise ValueError("cnn input shape must be (C, H, W)")
            _, h, w = self.input_shape
            scale = 2 ** len(self.channels)
            if h % scale or w % scale:
                raise ValueError(f"input {h}x{w} not divisible by {scale} for pooling")

    def descriptor(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_descriptor(cls, text: str) -> "ModelSpec":
        d = json.loads(text)
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})

    def param_shapes(self) -> dict[str, tuple]:
        shapes = {}
        if self.arch == "cnn":
            c, h, w = self.input_shape
            for i, out in enumerate(self.channels):
                shapes[f"conv{i}.weight"] = (out, c, 3, 3)
                shapes[f"conv{i}.bias"] = (out,)
                c, h, w = out, h // 2, w // 2
            width = c * h * w
        else:
            width = int(np.prod(self.input_shape))
        for i, units in enumerate(self.hidden):
            shapes[f"fc{i}.weight"] = (width, units)
            shapes[f"fc{i}.bias"] = (units,)
            width = units
        shapes["head.weight"] = (width, self.num_classes)
        shapes["head.bias"] = (self.num_classes,)
        return shapes

    @property
    def num_params(self) -> int:
        return sum(int(np.prod(s)) for s in self.param_shapes().values())


def init_params(spec: ModelSpec, seed: int = 0) -> dict[str, np.ndarray]:
    """He-normal weights (unit-gain head), zero biases."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in spec.param_shapes().items():
        if name.endswith(".bias"):
            params[name] = np.zeros(shape, dtype=DTYPE)
            continue
        fan_in = int(np.prod(shape[1:])) if name.startswith("conv") else shape[0]
        gain = 1.0 if name.startswith("head") else 2.0
        params[name] = (rng.standard_normal(shape) * np.sqrt(gain / fan_in)).astype(DTYPE)
    return params


def build_logits(spec: ModelSpec, x: Node, params: dict[str, Node]) -> Node:
    h = x
    if spec.arch == "cnn":
        for i in range(len(spec.channels)):
            h = ops.conv2d(h, params[f"conv{i}.weight"], padding=1)
            h = ops.avgpool2(ops.relu(ops.add_bias(h, params[f"conv{i}.bias"], axis=1)))
    h = ops.flatten(h)
    for i in range(len(spec.hidden)):
        h = ops.relu(ops.add_bias(h @ params[f"fc{i}.weight"], params[f"fc{i}.bias"]))
    return ops.add_bias(h @ params["head.weight"], params["head.bias"])


# -- losses (per-sample vectors) ---------------------------------------------

def cross_entropy(logits: Node, onehot: Node) -> Node:
    """-log softmax(logits)[y] per sample, via log-sum-exp."""
    return ops.logsumexp(logits) - ops.rowwise_dot(logits, onehot)


def margin_loss(logits: Node, onehot: Node) -> Node:
    """-logit[y] + max_{j != y} logit[j] per sample."""
    others = ops.reduce_max(logits - onehot * _EXCLUDE, axis=1)
    return others - ops.rowwise_dot(logits, onehot)


def log_softmax(logits: Node) -> Node:
    return logits - ops.broadcast(ops.logsumexp(logits), logits.shape, (1,))


def kl_divergence(p_logits: Node, q_logits: Node) -> Node:
    """KL(softmax(p) || softmax(q)) per sample."""
    if p_logits.shape != q_logits.shape:
        raise ValueError(f"shape mismatch {p_logits.shape} vs {q_logits.shape}")
    log_p = log_softmax(p_logits)
    return ops.rowwise_dot(ops.exp(log_p), log_p - log_softmax(q_logits))


LOSSES: dict[str, Callable[[Node, Node], Node]] = {
    "ce": cross_entropy,
    "margin": margin_loss,
}


def one_hot(labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim != 1:
        raise ValueError("labels must be a 1-D integer array")
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(f"label out of range [0, {num_classes})")
    out = np.zeros((labels.size, num_classes), dtype=DTYPE)
    out[np.arange(labels.size), labels.astype(np.int64)] = 1.0
    return out


def predict_labels(logits: np.ndarray) -> np.ndarray:
    # np.argmax returns the lowest index among ties
    return np.argmax(logits, axis=1)


# -- model object -------------------------------------------------------------

@dataclass
class _ProgramCache:
    leaves: dict = field(default_factory=dict)
    programs: dict = field(default_factory=dict)


class Model:
    """Architecture plus a parameter set, with cached compiled graphs.

    Graphs are keyed by (kind, batch size) and shared between models
    derived through :meth:`with_params`.
    """

    def __init__(self, spec: ModelSpec, params: dict[str, np.ndarray], _cache=None):
        shapes = spec.param_shapes()
        if list(params) != list(shapes):
            missing = set(shapes) ^ set(params)
            raise ValueError(f"parameter names do not match the ModelSpec: {sorted(missing)}")
        for name, shape in shapes.items():
            if tuple(params[name].shape) != shape:
                raise ValueError(f"{name}: expected shape {shape}, got {params[name].shape}")
        self.spec = spec
        self.params = {k: np.asarray(v, dtype=DTYPE) for k, v in params.items()}
        self._cache = _cache or _ProgramCache()

    @classmethod
    def init(cls, spec: ModelSpec, seed: int = 0) -> "Model":
        return cls(spec, init_params(spec, seed))

    def with_params(self, params: dict[str, np.ndarray]) -> "Model":
        return Model(self.spec, params, self._cache)

    def copy(self) -> "Model":
        return self.with_params({k: v.copy() for k, v in self.params.items()})

    @property
    def num_classes(self) -> int:
        return self.spec.num_classes

    # graph construction helpers
    def param_leaves(self) -> dict[str, Node]:
        if not self._cache.leaves:
            self._cache.leaves = {n: leaf(n, s) for n, s in self.spec.param_shapes().items()}
        return self._cache.leaves

    def logits_node(self, x: Node) -> Node:
        return build_logits(self.spec, x, self.param_leaves())

    def input_leaf(self, name: str, n: int) -> Node:
        return leaf(name, (n,) + self.spec.input_shape)

    def label_leaf(self, name: str, n: int) -> Node:
        return leaf(name, (n, self.spec.num_classes))

    def program(self, key, builder: Callable[["Model"], object]) -> Program:
        prog = self._cache.programs.get(key)
        if prog is None:
            prog = Program(builder(self))
            self._cache.programs[key] = prog
        return prog

    def run(self, program: Program, **arrays):
        return program({**self.params, **arrays})

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=DTYPE)
        if x.shape[1:] != self.spec.input_shape:
            raise ValueError(f"input shape {x.shape[1:]} != {self.spec.input_shape}")
        n = x.shape[0]
        prog = self.program(("logits", n), lambda m: m.logits_node(m.input_leaf("x", n)))
        return self.run(prog, x=x)

    def predict(self, x: np.ndarray) -> np.ndarray:
        return predict_labels(self.forward(x))


def forward(model: Model, x: np.ndarray) -> np.ndarray:
    return model.forward(x)


def loss_values(kind: str, logits: np.ndarray, labels) -> np.ndarray:
    """Per-sample loss of the given kind on fixed logits."""
    logits = np.asarray(logits, dtype=DTYPE)
    oh = one_hot(labels, logits.shape[1])
    node = LOSSES[kind](constant(logits), constant(oh))
    return Program(node)({})


def kl_values(p_logits: np.ndarray, q_logits: np.ndarray) -> np.ndarray:
    return Program(kl_divergence(constant(p_logits), constant(q_logits)))({})
