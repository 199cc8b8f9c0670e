"""Graph values and reverse-mode differentiation.

Every operation is eager: the forward result is computed immediately and,
when any input requires a gradient, the result remembers its parents so the
chain rule can be replayed later. Backward rules are themselves written with
graph operations, so ``differentiate(..., create_graph=True)`` returns
gradients that can be differentiated again (double backprop).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Callable, Iterable, Mapping, Sequence

import numpy as np


class DiffcoreError(Exception):
    """Base class for engine errors."""


class ShapeError(DiffcoreError, ValueError):
    pass


class NumericError(DiffcoreError, FloatingPointError):
    pass


class GradientError(DiffcoreError, ValueError):
    pass


@dataclass(frozen=True)
class Primitive:
    """A differentiable operation.

    ``forward(*arrays, **attrs)`` returns an array, or ``(array, saved)`` where
    ``saved`` is a dict of forward by-products (e.g. max-pool routing) kept on
    the node. ``vjp(g, out, inputs, needed, attrs)`` returns one cotangent per
    input (``None`` where ``needed`` is false), built from graph operations.
    """

    name: str
    forward: Callable[..., Any]
    vjp: Callable[..., Sequence[Any]]
    # False for ops that cannot turn finite inputs into non-finite outputs
    may_overflow: bool = True


class GraphValue:
    """A tensor payload plus the bookkeeping needed to differentiate through it."""

    __slots__ = ("data", "op", "parents", "attrs", "saved", "requires_grad", "depth")

    def __init__(
        self,
        data: np.ndarray,
        op: Primitive | None = None,
        parents: tuple[GraphValue, ...] = (),
        attrs: Mapping[str, Any] | None = None,
        saved: Mapping[str, Any] | None = None,
        requires_grad: bool = False,
    ):
        self.data = data
        self.op = op
        self.parents = parents
        self.attrs = dict(attrs) if attrs else {}
        self.saved = dict(saved) if saved else {}
        self.requires_grad = requires_grad or bool(parents)
        self.depth = 1 + max(p.depth for p in parents) if parents else 0

    # -- array-like surface -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def __repr__(self) -> str:
        tag = self.op.name if self.op is not None else "leaf"
        return f"GraphValue({tag}, shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # -- operator sugar -----------------------------------------------------
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
        if np.isscalar(other):
            return ops.scale(self, float(other))
        return ops.mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        from . import ops
        if np.isscalar(other):
            return ops.scale(self, 1.0 / float(other))
        return ops.div(self, other)

    def __rtruediv__(self, other):
        from . import ops
        return ops.div(other, self)

    def __neg__(self):
        from . import ops
        return ops.scale(self, -1.0)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)


def _not_scalar(v: GraphValue) -> float:
    raise GradientError(f"item() needs a single-element value, got shape {v.shape}")


def variable(data, dtype=np.float32) -> GraphValue:
    """A leaf that gradients can be taken with respect to."""
    arr = np.array(data, dtype=dtype)
    _check_finite("variable", arr)
    return GraphValue(arr, requires_grad=True)


def constant(data, dtype=np.float32) -> GraphValue:
    arr = np.array(data, dtype=dtype)
    _check_finite("constant", arr)
    return GraphValue(arr)


def as_value(x, like: GraphValue | None = None) -> GraphValue:
    if isinstance(x, GraphValue):
        return x
    if like is not None:
        dtype = like.dtype
    elif isinstance(x, np.ndarray) and x.dtype.kind == "f":
        dtype = x.dtype
    else:
        dtype = np.float32
    arr = np.asarray(x, dtype=dtype)
    _check_finite("input", arr)
    return GraphValue(arr)


def detach(v: GraphValue) -> GraphValue:
    """Same payload, cut from the graph."""
    return GraphValue(v.data)


def _check_finite(name: str, out: np.ndarray) -> None:
    if out.dtype.kind == "f" and not np.isfinite(out).all():
        bad = int(np.size(out) - np.count_nonzero(np.isfinite(out)))
        raise NumericError(f"{name}: {bad} non-finite value(s) in output of shape {out.shape}")


def apply(prim: Primitive, inputs: Sequence[GraphValue], **attrs) -> GraphValue:
    """Run ``prim`` forward and wire the result into the graph."""
    with np.errstate(all="ignore"):
        res = prim.forward(*(v.data for v in inputs), **attrs)
    saved = None
    if isinstance(res, tuple):
        res, saved = res
    if prim.may_overflow:
        _check_finite(prim.name, res)
    if any(v.requires_grad for v in inputs):
        return GraphValue(res, prim, tuple(inputs), attrs, saved)
    return GraphValue(res, prim, (), attrs, saved)


def topological_order(root: GraphValue) -> list[GraphValue]:
    """Nodes reachable from ``root`` through parents, parents first."""
    order: list[GraphValue] = []
    seen: set[int] = set()
    stack: list[tuple[GraphValue, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def is_acyclic(root: GraphValue) -> bool:
    """Structural check: no node is its own ancestor."""
    WHITE, GREY, BLACK = 0, 1, 2
    color: dict[int, int] = {}
    stack: list[tuple[GraphValue, int]] = [(root, 0)]
    while stack:
        node, i = stack.pop()
        if i == 0:
            if color.get(id(node)) == BLACK:
                continue
            color[id(node)] = GREY
        if i < len(node.parents):
            stack.append((node, i + 1))
            child = node.parents[i]
            c = color.get(id(child), WHITE)
            if c == GREY:
                return False
            if c == WHITE:
                stack.append((child, 0))
        else:
            color[id(node)] = BLACK
    return True


def differentiate(
    scalar: GraphValue,
    wrt: Sequence[GraphValue],
    *,
    create_graph: bool = False,
    allow_unused: bool = False,
) -> list[GraphValue]:
    """Gradients of a one-element value with respect to each of ``wrt``.

    With ``create_graph=True`` the returned gradients are graph values wired
    to their inputs, so they can be fed back into ``differentiate``.
    Otherwise they are plain constants and the backward pass is computed
    without recording anything.
    """
    if scalar.size != 1:
        raise GradientError(f"differentiate needs a single-element output, got shape {scalar.shape}")
    order = topological_order(scalar)
    targets = {id(w) for w in wrt}

    # nodes with a path to some target
    live: set[int] = set()
    for node in order:
        if id(node) in targets or any(id(p) in live for p in node.parents):
            live.add(id(node))
    missing = [i for i, w in enumerate(wrt) if id(w) not in live]
    if missing and not allow_unused:
        raise GradientError(f"wrt entries {missing} are not reachable from the differentiated value")

    seed = np.ones_like(scalar.data)
    grads: dict[int, GraphValue] = {id(scalar): GraphValue(seed)}
    found: dict[int, GraphValue] = {}
    for node in reversed(order):
        if id(node) not in live:
            continue
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if id(node) in targets:
            found[id(node)] = g
        if not node.parents:
            continue
        needed = [id(p) in live for p in node.parents]
        if not any(needed):
            continue
        if create_graph:
            parents, out = node.parents, node
        else:
            parents = tuple(GraphValue(p.data) for p in node.parents)
            out = GraphValue(node.data, node.op, (), node.attrs, node.saved)
            g = detach(g)
        attrs = {**node.attrs, **node.saved}
        cots = node.op.vjp(g, out, parents, needed, attrs)
        for p, need, ct in zip(node.parents, needed, cots):
            if not need or ct is None:
                continue
            if ct.shape != p.shape:
                raise ShapeError(f"{node.op.name} backward produced {ct.shape} for input {p.shape}")
            prev = grads.get(id(p))
            if prev is None:
                grads[id(p)] = ct
            else:
                from . import ops
                grads[id(p)] = ops.add(prev, ct)

    out_grads = []
    for w in wrt:
        g = found.get(id(w))
        if g is None:
            g = GraphValue(np.zeros_like(w.data))
        out_grads.append(g if create_graph else detach(g))
    return out_grads


def replay(root: GraphValue, bindings: Mapping[int, np.ndarray] | None = None) -> np.ndarray:
    """Re-evaluate the recorded forward graph of ``root``.

    ``bindings`` maps ``id(leaf)`` to a replacement payload; unbound leaves keep
    their recorded values. Forward by-products (pooling routes) are recomputed.
    """
    bindings = bindings or {}
    values: dict[int, np.ndarray] = {}
    for node in topological_order(root):
        if not node.parents:
            values[id(node)] = bindings.get(id(node), node.data)
            continue
        res = node.op.forward(*(values[id(p)] for p in node.parents), **node.attrs)
        if isinstance(res, tuple):
            res = res[0]
        _check_finite(node.op.name, res)
        values[id(node)] = res
    return values[id(root)]


def graph_depth(root: GraphValue) -> int:
    return root.depth


def count_nodes(roots: Iterable[GraphValue]) -> int:
    seen: set[int] = set()
    for r in roots:
        for n in topological_order(r):
            seen.add(id(n))
    return len(seen)

