"""Tensor arithmetic with reverse-mode differentiation that supports
differentiating gradients again."""

from . import kernels, ops
from .graph import (
    DiffcoreError,
    GradientError,
    GraphValue,
    NumericError,
    Primitive,
    ShapeError,
    apply,
    as_value,
    constant,
    count_nodes,
    detach,
    differentiate,
    graph_depth,
    is_acyclic,
    replay,
    topological_order,
    variable,
)
from .ops import eval_primitive

__all__ = [
    "DiffcoreError",
    "GradientError",
    "GraphValue",
    "NumericError",
    "Primitive",
    "ShapeError",
    "apply",
    "as_value",
    "constant",
    "count_nodes",
    "detach",
    "differentiate",
    "eval_primitive",
    "graph_depth",
    "is_acyclic",
    "kernels",
    "ops",
    "replay",
    "topological_order",
    "variable",
]
