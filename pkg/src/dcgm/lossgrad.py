"""Classification loss and distances between weight-gradient sets."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .diffcore import GraphValue, ops
from .diffcore.graph import as_value

COS_EPS = 1e-6


class StructureError(ValueError):
    """Two gradient sets do not have the same layer structure."""


def cross_entropy(logits: GraphValue, labels: Sequence[int]) -> GraphValue:
    """Mean negative log-softmax of the labelled class (max-shifted for stability)."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ValueError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    C = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= C):
        raise ValueError(f"cross_entropy: labels must lie in [0, {C}), got range "
                         f"[{labels.min()}, {labels.max()}]")
    onehot = np.zeros(logits.shape, dtype=logits.dtype)
    onehot[np.arange(labels.size), labels] = 1
    shifted = ops.sub(logits, ops.max(logits, axis=1))
    lse = ops.log(ops.sum(ops.exp(shifted), axis=1))
    picked = ops.sum(ops.mul(shifted, GraphValue(onehot)), axis=1)
    return ops.mean(ops.sub(lse, picked))


@dataclass
class GradientSet:
    """Per-layer weight gradients, in model layer order."""

    tensors: list[GraphValue]
    kinds: list[str]

    def __post_init__(self):
        if len(self.tensors) != len(self.kinds):
            raise StructureError("one kind tag is needed per gradient tensor")
        for t, k in zip(self.tensors, self.kinds):
            want = 4 if k == "conv" else 2
            if k not in ("conv", "fc") or t.ndim != want:
                raise StructureError(f"layer kind {k!r} does not fit gradient of shape {t.shape}")

    @classmethod
    def of(cls, tensors, kinds: Sequence[str]) -> "GradientSet":
        return cls([as_value(t) for t in tensors], list(kinds))

    @property
    def outputs(self) -> int:
        """Total number of output nodes over all layers."""
        return int(sum(t.shape[0] for t in self.tensors))

    def shapes(self) -> list[tuple[int, ...]]:
        return [t.shape for t in self.tensors]


def _check(a: GradientSet, b: GradientSet) -> None:
    if a.kinds != b.kinds or a.shapes() != b.shapes():
        raise StructureError(f"gradient sets differ: {a.kinds} {a.shapes()} vs {b.kinds} {b.shapes()}")


def layerwise_match_distance(a: GradientSet, b: GradientSet, eps: float = COS_EPS) -> GraphValue:
    """Sum over layers and output nodes of ``1 - cos(a_i, b_i)``.

    Row ``i`` is the gradient of output node ``i`` flattened over its
    ``in`` (dense) or ``in*h*w`` (conv) inputs. Rows that are zero in both
    sets count as fully unmatched (contribute 1).
    """
    _check(a, b)
    total = None
    for ga, gb in zip(a.tensors, b.tensors):
        out = ga.shape[0]
        ra = ops.reshape(ga, (out, -1))
        rb = ops.reshape(gb, (out, -1))
        dot = ops.sum(ops.mul(ra, rb), axis=1)
        na = ops.safe_sqrt(ops.sum(ops.mul(ra, ra), axis=1))
        nb = ops.safe_sqrt(ops.sum(ops.mul(rb, rb), axis=1))
        cos = ops.div(dot, ops.add(ops.mul(na, nb), eps))
        layer = ops.sum(ops.sub(1.0, cos))
        total = layer if total is None else ops.add(total, layer)
    return total


def flat_euclidean_distance(a: GradientSet, b: GradientSet) -> GraphValue:
    """Squared L2 distance between the concatenated gradient vectors."""
    _check(a, b)
    total = None
    for ga, gb in zip(a.tensors, b.tensors):
        d = ops.sub(ga, gb)
        part = ops.sum(ops.mul(d, d))
        total = part if total is None else ops.add(total, part)
    return total


def flat_cosine_distance(a: GradientSet, b: GradientSet, eps: float = COS_EPS) -> GraphValue:
    """``1 - cos`` between the concatenated gradient vectors."""
    _check(a, b)
    dot = ssa = ssb = None
    for ga, gb in zip(a.tensors, b.tensors):
        d = ops.sum(ops.mul(ga, gb))
        sa = ops.sum(ops.mul(ga, ga))
        sb = ops.sum(ops.mul(gb, gb))
        dot = d if dot is None else ops.add(dot, d)
        ssa = sa if ssa is None else ops.add(ssa, sa)
        ssb = sb if ssb is None else ops.add(ssb, sb)
    denom = ops.add(ops.mul(ops.safe_sqrt(ssa), ops.safe_sqrt(ssb)), eps)
    return ops.sub(1.0, ops.div(dot, denom))


DISTANCES = {
    "layerwise": layerwise_match_distance,
    "euclidean": flat_euclidean_distance,
    "cosine": flat_cosine_distance,
}
