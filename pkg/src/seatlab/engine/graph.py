"""Recorded computation graphs, evaluation and reverse-mode differentiation.

A graph is a DAG of immutable :class:`Node` objects.  Differentiation does
not compute numbers: :func:`gradient` returns new nodes built from the same
primitives, so a gradient can itself be differentiated again.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

DTYPE = np.float32

_ids = itertools.count()


class GraphError(ValueError):
    """Malformed graph, shape mismatch or bad bindings."""


class NonFiniteError(FloatingPointError):
    """An evaluation produced an inf or nan."""


@dataclass(frozen=True)
class OpDef:
    name: str
    forward: Callable
    # vjp(node, cotangent, needs) -> per-input cotangent nodes (None = zero)
    vjp: Callable | None


OPS: dict[str, OpDef] = {}


def register(name, forward, vjp=None):
    OPS[name] = OpDef(name, forward, vjp)


class Node:
    __slots__ = ("op", "inputs", "attrs", "shape", "name", "uid")

    def __init__(self, op, inputs=(), attrs=None, shape=(), name=None):
        self.op = op
        self.inputs = tuple(inputs)
        self.attrs = attrs or {}
        self.shape = tuple(int(s) for s in shape)
        self.name = name
        self.uid = next(_ids)

    @property
    def ndim(self):
        return len(self.shape)

    @property
    def size(self):
        return int(np.prod(self.shape, dtype=np.int64))

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"<Node {self.op}{label} shape={self.shape}>"

    # arithmetic sugar; implementations live in ops
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    def __radd__(self, other):
        from . import ops
        return ops.add(other, self)

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    def __rmul__(self, other):
        from . import ops
        return ops.mul(other, self)

    def __truediv__(self, other):
        from . import ops
        if isinstance(other, Node):
            return ops.mul(self, ops.recip(other))
        return ops.mul(self, 1.0 / float(other))

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def sum(self, axes=None):
        from . import ops
        return ops.reduce_sum(self, axes)

    def mean(self, axes=None):
        from . import ops
        return ops.mean(self, axes)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    @property
    def T(self):
        from . import ops
        return ops.transpose(self)


def leaf(name: str, shape: Sequence[int]) -> Node:
    """A differentiable input, bound by name at evaluation time."""
    if not name:
        raise GraphError("leaves need a name")
    return Node("leaf", (), None, shape, name=name)


def constant(value) -> Node:
    arr = np.array(value, dtype=DTYPE)
    arr.setflags(write=False)
    return Node("const", (), {"value": arr}, arr.shape)


def as_node(x) -> Node:
    return x if isinstance(x, Node) else constant(x)


def topological_order(outputs: Iterable[Node]) -> list[Node]:
    order, seen = [], set()
    for out in outputs:
        if out in seen:
            continue
        stack = [(out, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if node in seen:
                continue
            seen.add(node)
            stack.append((node, True))
            for inp in reversed(node.inputs):
                if inp not in seen:
                    stack.append((inp, False))
    return order


class Program:
    """A fixed set of output nodes prepared for repeated evaluation.

    Intermediate values are dropped as soon as their last consumer has run.
    """

    def __init__(self, outputs: Node | Sequence[Node]):
        self.single = isinstance(outputs, Node)
        self.outputs = [outputs] if self.single else list(outputs)
        self.order = topological_order(self.outputs)
        self.leaves = {}
        for node in self.order:
            if node.op == "leaf":
                other = self.leaves.setdefault(node.name, node)
                if other is not node:
                    raise GraphError(f"two distinct leaves named {node.name!r}")
        index = {node: i for i, node in enumerate(self.order)}
        last_use = {}
        for i, node in enumerate(self.order):
            for inp in node.inputs:
                last_use[inp] = i
        keep = set(self.outputs)
        self._release = [[] for _ in self.order]
        for node, i in last_use.items():
            if node not in keep:
                self._release[i].append(index[node])

    def __call__(self, bindings: Mapping):
        bound = {}
        for key, value in bindings.items():
            name = key.name if isinstance(key, Node) else key
            if name in self.leaves:
                bound[name] = value
        values: list = [None] * len(self.order)
        pos = {node: i for i, node in enumerate(self.order)}
        with np.errstate(over="raise", divide="raise", invalid="raise", under="ignore"):
            for i, node in enumerate(self.order):
                values[i] = self._compute(node, values, pos, bound)
                for j in self._release[i]:
                    values[j] = None
        results = []
        for out in self.outputs:
            v = values[pos[out]]
            if not np.all(np.isfinite(v)):
                raise NonFiniteError(f"non-finite value in output {out!r}")
            results.append(v)
        return results[0] if self.single else results

    @staticmethod
    def _compute(node, values, pos, bound):
        if node.op == "leaf":
            if node.name not in bound:
                raise GraphError(f"unbound leaf {node.name!r}")
            v = np.asarray(bound[node.name], dtype=DTYPE)
            if v.shape != node.shape:
                raise GraphError(
                    f"leaf {node.name!r} expects shape {node.shape}, got {v.shape}")
            return v
        if node.op == "const":
            return node.attrs["value"]
        args = [values[pos[inp]] for inp in node.inputs]
        try:
            out = OPS[node.op].forward(*args, **node.attrs)
        except FloatingPointError as exc:
            raise NonFiniteError(f"{node.op}: {exc}") from exc
        return np.asarray(out, dtype=DTYPE)


def evaluate(outputs, bindings: Mapping | None = None):
    """Evaluate one node or a list of nodes under ``bindings`` (leaf or name -> array)."""
    return Program(outputs)(bindings or {})


def zeros_like(node: Node) -> Node:
    return constant(np.zeros(node.shape, dtype=DTYPE))


def gradient(root: Node, wrt: Sequence[Node]) -> dict[Node, Node]:
    """Reverse-mode gradient of scalar ``root`` with respect to the leaves ``wrt``.

    The result maps each leaf to a graph node; leaves that ``root`` does not
    depend on map to a zero constant.
    """
    if root.shape != ():
        raise GraphError(f"gradient needs a scalar root, got shape {root.shape}")
    wrt = list(wrt)
    for w in wrt:
        if not isinstance(w, Node) or w.op != "leaf":
            raise GraphError(f"can only differentiate with respect to leaves, got {w!r}")
    order = topological_order([root])
    live = set(wrt)
    for node in order:
        if node.op != "leaf" and any(inp in live for inp in node.inputs):
            live.add(node)
    cot: dict[Node, Node] = {}
    if root in live:
        from . import ops
        cot[root] = ops.ones_like(root)
    for node in reversed(order):
        if node.op == "leaf" or node not in cot:
            continue
        g = cot.pop(node)
        opdef = OPS[node.op]
        if opdef.vjp is None:
            continue  # zero derivative everywhere by definition
        needs = [inp in live for inp in node.inputs]
        for inp, gi in zip(node.inputs, opdef.vjp(node, g, needs)):
            if gi is None or inp not in live:
                continue
            if gi.shape != inp.shape:
                raise GraphError(f"vjp of {node.op} produced {gi.shape} for {inp.shape}")
            cot[inp] = cot[inp] + gi if inp in cot else gi
    return {w: cot[w] if w in cot else zeros_like(w) for w in wrt}


def second_order_gradient(outer: Node, wrt: Sequence[Node]) -> dict[Node, Node]:
    """Gradient of a scalar whose graph already contains gradient sub-graphs.

    Every primitive's backward rule is written in primitives, so this is the
    same traversal as :func:`gradient`; it exists to make call sites explicit.
    """
    return gradient(outer, wrt)
