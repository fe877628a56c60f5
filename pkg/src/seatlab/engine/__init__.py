"""A small float32 autodiff engine with differentiable gradients."""
from . import ops
from .graph import (
    DTYPE,
    GraphError,
    Node,
    NonFiniteError,
    Program,
    as_node,
    constant,
    evaluate,
    gradient,
    leaf,
    second_order_gradient,
    topological_order,
)
from .ops import *  # noqa: F401,F403

__all__ = [
    "DTYPE", "GraphError", "Node", "NonFiniteError", "Program", "as_node",
    "constant", "evaluate", "gradient", "leaf", "ops", "second_order_gradient",
    "topological_order",
] + list(ops.__all__)
