"""Primitive operations.

Each primitive registers a numpy forward and a backward rule expressed in
primitives.  Broadcasting is limited to scalar-with-tensor; anything else
needs an explicit :func:`broadcast`.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np

from . import kernels
from .graph import DTYPE, GraphError, Node, as_node, constant, register


def _normalize_axes(axes, ndim):
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    out = tuple(sorted(a % ndim for a in axes))
    if len(set(out)) != len(out):
        raise GraphError(f"repeated axes {axes}")
    return out


def _binary_shape(a: Node, b: Node, op):
    if a.shape == b.shape:
        return a.shape
    if a.shape == ():
        return b.shape
    if b.shape == ():
        return a.shape
    raise GraphError(f"{op}: shapes {a.shape} and {b.shape} differ (only scalar broadcasting)")


def _unbroadcast(g: Node, target: Node):
    if target.shape == () and g.shape != ():
        return reduce_sum(g)
    return g


def ones_like(node: Node) -> Node:
    return constant(np.ones(node.shape, dtype=DTYPE))


# -- elementwise arithmetic ------------------------------------------------

def add(a, b):
    a, b = as_node(a), as_node(b)
    return Node("add", (a, b), None, _binary_shape(a, b, "add"))


def sub(a, b):
    a, b = as_node(a), as_node(b)
    return Node("sub", (a, b), None, _binary_shape(a, b, "sub"))


def mul(a, b):
    a, b = as_node(a), as_node(b)
    return Node("mul", (a, b), None, _binary_shape(a, b, "mul"))


def neg(a):
    a = as_node(a)
    return Node("neg", (a,), None, a.shape)


def recip(a):
    a = as_node(a)
    return Node("recip", (a,), None, a.shape)


def exp(a):
    a = as_node(a)
    return Node("exp", (a,), None, a.shape)


def _add_vjp(node, g, needs):
    a, b = node.inputs
    return (_unbroadcast(g, a) if needs[0] else None,
            _unbroadcast(g, b) if needs[1] else None)


def _sub_vjp(node, g, needs):
    a, b = node.inputs
    return (_unbroadcast(g, a) if needs[0] else None,
            _unbroadcast(neg(g), b) if needs[1] else None)


def _mul_vjp(node, g, needs):
    a, b = node.inputs
    return (_unbroadcast(mul(g, b), a) if needs[0] else None,
            _unbroadcast(mul(g, a), b) if needs[1] else None)


register("add", np.add, _add_vjp)
register("sub", np.subtract, _sub_vjp)
register("mul", np.multiply, _mul_vjp)
register("neg", np.negative, lambda node, g, needs: (neg(g),))
register("recip", lambda a: np.float32(1.0) / a,
         lambda node, g, needs: (neg(mul(g, mul(node, node))),))
register("exp", np.exp, lambda node, g, needs: (mul(g, node),))


# -- piecewise functions ---------------------------------------------------
# step, sign, box_mask and max_mask have zero derivative everywhere (no vjp).

def relu(a):
    a = as_node(a)
    return Node("relu", (a,), None, a.shape)


def step(a):
    """Indicator of ``a > 0``."""
    a = as_node(a)
    return Node("step", (a,), None, a.shape)


def sign(a):
    a = as_node(a)
    return Node("sign", (a,), None, a.shape)


def absolute(a):
    a = as_node(a)
    return Node("abs", (a,), None, a.shape)


def clamp(a, lo, hi):
    a = as_node(a)
    return Node("clamp", (a,), {"lo": float(lo), "hi": float(hi)}, a.shape)


def box_mask(a, lo, hi):
    a = as_node(a)
    return Node("box_mask", (a,), {"lo": float(lo), "hi": float(hi)}, a.shape)


register("relu", lambda a: np.maximum(a, np.float32(0.0)),
         lambda node, g, needs: (mul(g, step(node.inputs[0])),))
register("step", lambda a: (a > 0).astype(DTYPE))
register("sign", np.sign)
register("abs", np.abs, lambda node, g, needs: (mul(g, sign(node.inputs[0])),))
register("clamp", lambda a, lo, hi: np.clip(a, DTYPE(lo), DTYPE(hi)),
         lambda node, g, needs: (mul(g, box_mask(node.inputs[0], **node.attrs)),))
register("box_mask", lambda a, lo, hi: ((a >= lo) & (a <= hi)).astype(DTYPE))


# -- shape manipulation and reductions ------------------------------------

def reshape(a, shape):
    a = as_node(a)
    shape = tuple(int(s) for s in shape)
    if -1 in shape:
        known = int(np.prod([s for s in shape if s != -1]))
        shape = tuple(a.size // known if s == -1 else s for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != a.size:
        raise GraphError(f"cannot reshape {a.shape} to {shape}")
    return Node("reshape", (a,), {"shape": shape}, shape)


def transpose(a):
    a = as_node(a)
    if a.ndim != 2:
        raise GraphError("transpose is defined for matrices only")
    return Node("transpose", (a,), None, a.shape[::-1])


def broadcast(a, shape, axes):
    """Insert the dimensions ``axes`` of ``shape`` by repetition."""
    a = as_node(a)
    shape = tuple(int(s) for s in shape)
    axes = _normalize_axes(axes, len(shape))
    kept = tuple(s for i, s in enumerate(shape) if i not in axes)
    if kept != a.shape:
        raise GraphError(f"cannot broadcast {a.shape} to {shape} along {axes}")
    return Node("broadcast", (a,), {"shape": shape, "axes": axes}, shape)


def reduce_sum(a, axes=None):
    a = as_node(a)
    axes = _normalize_axes(axes, a.ndim)
    shape = tuple(s for i, s in enumerate(a.shape) if i not in axes)
    return Node("reduce_sum", (a,), {"axes": axes}, shape)


def mean(a, axes=None):
    a = as_node(a)
    axes_n = _normalize_axes(axes, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes_n], dtype=np.int64)) if axes_n else 1
    return mul(reduce_sum(a, axes_n), 1.0 / count)


def reduce_max(a, axis=-1):
    a = as_node(a)
    axis = axis % a.ndim
    shape = a.shape[:axis] + a.shape[axis + 1:]
    return Node("reduce_max", (a,), {"axis": axis}, shape)


def max_mask(a, axis):
    """One-hot of the first maximal entry along ``axis``."""
    a = as_node(a)
    return Node("max_mask", (a,), {"axis": axis % a.ndim}, a.shape)


def logsumexp(a):
    """Log-sum-exp over the last axis."""
    a = as_node(a)
    return Node("lse", (a,), None, a.shape[:-1])


def _reshape_vjp(node, g, needs):
    return (reshape(g, node.inputs[0].shape),)


def _broadcast_forward(a, shape, axes):
    return np.broadcast_to(np.expand_dims(a, axes), shape)


def _reduce_max_vjp(node, g, needs):
    a = node.inputs[0]
    axis = node.attrs["axis"]
    return (mul(broadcast(g, a.shape, (axis,)), max_mask(a, axis)),)


def _lse_vjp(node, g, needs):
    a = node.inputs[0]
    last = a.ndim - 1
    softmax = exp(sub(a, broadcast(node, a.shape, (last,))))
    return (mul(broadcast(g, a.shape, (last,)), softmax),)


register("reshape", lambda a, shape: a.reshape(shape), _reshape_vjp)
register("transpose", lambda a: a.T, lambda node, g, needs: (transpose(g),))
register("broadcast", _broadcast_forward,
         lambda node, g, needs: (reduce_sum(g, node.attrs["axes"]),))
register("reduce_sum", lambda a, axes: np.sum(a, axis=axes, dtype=DTYPE),
         lambda node, g, needs: (broadcast(g, node.inputs[0].shape, node.attrs["axes"]),))
register("reduce_max", lambda a, axis: np.max(a, axis=axis), _reduce_max_vjp)
register("max_mask", kernels.first_argmax_mask)
register("lse", kernels.logsumexp, _lse_vjp)


# -- linear algebra and convolution ---------------------------------------

def matmul(a, b):
    a, b = as_node(a), as_node(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise GraphError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    return Node("matmul", (a, b), None, (a.shape[0], b.shape[1]))


def _matmul_vjp(node, g, needs):
    a, b = node.inputs
    return (matmul(g, transpose(b)) if needs[0] else None,
            matmul(transpose(a), g) if needs[1] else None)


register("matmul", np.matmul, _matmul_vjp)


def conv2d(x, w, padding=0):
    """Stride-1 cross-correlation of ``x`` [N,C,H,W] with ``w`` [O,C,k,k]."""
    x, w = as_node(x), as_node(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1] or w.shape[2] != w.shape[3]:
        raise GraphError(f"conv2d: incompatible shapes {x.shape} and {w.shape}")
    k = w.shape[2]
    if not 0 <= padding <= k - 1:
        raise GraphError("conv2d: padding must lie in [0, k-1]")
    n, _, h, wd = x.shape
    ho, wo = h + 2 * padding - k + 1, wd + 2 * padding - k + 1
    if ho < 1 or wo < 1:
        raise GraphError("conv2d: kernel larger than padded input")
    return Node("conv2d", (x, w), {"padding": padding}, (n, w.shape[0], ho, wo))


def conv2d_input_grad(g, w, padding):
    g, w = as_node(g), as_node(w)
    k = w.shape[2]
    n, _, ho, wo = g.shape
    shape = (n, w.shape[1], ho - 2 * padding + k - 1, wo - 2 * padding + k - 1)
    return Node("conv2d_input_grad", (g, w), {"padding": padding}, shape)


def conv2d_weight_grad(x, g, padding, k):
    x, g = as_node(x), as_node(g)
    return Node("conv2d_weight_grad", (x, g), {"padding": padding, "k": k},
                (g.shape[1], x.shape[1], k, k))


def _conv_vjp(node, g, needs):
    x, w = node.inputs
    p = node.attrs["padding"]
    return (conv2d_input_grad(g, w, p) if needs[0] else None,
            conv2d_weight_grad(x, g, p, w.shape[2]) if needs[1] else None)


def _conv_input_grad_vjp(node, c, needs):
    g, w = node.inputs
    p = node.attrs["padding"]
    return (conv2d(c, w, p) if needs[0] else None,
            conv2d_weight_grad(c, g, p, w.shape[2]) if needs[1] else None)


def _conv_weight_grad_vjp(node, c, needs):
    x, g = node.inputs
    p = node.attrs["padding"]
    return (conv2d_input_grad(g, c, p) if needs[0] else None,
            conv2d(x, c, p) if needs[1] else None)


register("conv2d", kernels.conv2d, _conv_vjp)
register("conv2d_input_grad", kernels.conv2d_input_grad, _conv_input_grad_vjp)
register("conv2d_weight_grad", kernels.conv2d_weight_grad, _conv_weight_grad_vjp)


def avgpool2(x):
    """2x2 average pooling with stride 2."""
    x = as_node(x)
    if x.ndim != 4 or x.shape[2] % 2 or x.shape[3] % 2:
        raise GraphError(f"avgpool2 needs [N,C,H,W] with even H, W; got {x.shape}")
    n, c, h, w = x.shape
    return Node("avgpool2", (x,), None, (n, c, h // 2, w // 2))


def upsample2(g):
    g = as_node(g)
    n, c, h, w = g.shape
    return Node("upsample2", (g,), None, (n, c, 2 * h, 2 * w))


register("avgpool2", kernels.avgpool2, lambda node, g, needs: (upsample2(g),))
register("upsample2", kernels.upsample2, lambda node, g, needs: (avgpool2(g),))


# -- small composites ------------------------------------------------------

def flatten(x: Node) -> Node:
    """[N, ...] -> [N, D]."""
    return reshape(x, (x.shape[0], -1))


def rowwise_sum(x: Node) -> Node:
    """Per-sample sum over every non-batch axis: [N, ...] -> [N]."""
    return reduce_sum(x, tuple(range(1, x.ndim)))


def rowwise_dot(a: Node, b: Node) -> Node:
    return rowwise_sum(mul(a, b))


def add_bias(x: Node, b: Node, axis: int = 1) -> Node:
    """Add a per-channel vector ``b`` along ``axis`` of ``x``."""
    axes = tuple(i for i in range(x.ndim) if i != axis)
    return add(x, broadcast(b, x.shape, axes))


def scale_rows(x: Node, s: Node) -> Node:
    """Multiply each sample of ``x`` [N, ...] by the matching entry of ``s`` [N]."""
    return mul(x, broadcast(s, x.shape, tuple(range(1, x.ndim))))


__all__: Sequence[str] = [
    "absolute", "add", "add_bias", "avgpool2", "box_mask", "broadcast", "clamp",
    "conv2d", "conv2d_input_grad", "conv2d_weight_grad", "exp", "flatten",
    "logsumexp", "matmul", "max_mask", "mean", "mul", "neg", "ones_like", "recip",
    "reduce_max", "reduce_sum", "relu", "reshape", "rowwise_dot", "rowwise_sum",
    "scale_rows", "sign", "step", "sub", "transpose", "upsample2",
]
