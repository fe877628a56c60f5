"""First-order Taylor residual of a per-sample loss, as a graph.

    xi(x, delta) = | l(x + delta) - l(x) - <delta, grad_x l(x)> |

The anchor gradient is taken at the clean point ``x``.  It does not depend
on ``delta`` but does depend on the parameters, so differentiating ``xi``
with respect to the parameters goes through the gradient graph.
"""
from __future__ import annotations

from typing import Callable

from .engine import Node, gradient, ops

LossFn = Callable[[Node], Node]


def anchor_gradient(loss_fn: LossFn, x: Node) -> tuple[Node, Node]:
    """Per-sample clean loss and its input gradient (rows are independent)."""
    clean = loss_fn(x)
    return clean, gradient(ops.reduce_sum(clean), [x])[x]


def linearity_error_node(loss_fn: LossFn, x: Node, delta: Node, anchor=None,
                         adv=None) -> Node:
    """Per-sample xi.

    ``anchor`` reuses an :func:`anchor_gradient` result and ``adv`` a loss
    already computed at ``x + delta``.
    """
    clean, g = anchor if anchor is not None else anchor_gradient(loss_fn, x)
    adv = loss_fn(x + delta) if adv is None else adv
    return ops.absolute(adv - clean - ops.rowwise_dot(delta, g))
