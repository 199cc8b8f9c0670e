"""Architecture specs, Kaiming initialisation and forward passes.

Three families are supported: an MLP with two hidden layers, the modular
ConvNet ``[W, N, A, P] x D`` and a small LeNet built from 3x3 convolutions.
Parameters live in an immutable :class:`ModelParams` snapshot; forward
passes take optional graph leaves so callers can differentiate with respect
to the weights.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .diffcore import GraphValue, ShapeError, ops
from .diffcore.graph import as_value

NORMS = ("none", "batch", "layer", "instance", "group")
ACTS = ("sigmoid", "relu", "leakyrelu")
POOLS = ("none", "max", "avg")
KINDS = ("mlp", "convnet", "lenet")
GROUPS = 4
NORM_EPS = 1e-5

_ALIASES = {
    "N": {"bn": "batch", "batchnorm": "batch", "ln": "layer", "layernorm": "layer",
          "in": "instance", "instancenorm": "instance", "gn": "group", "groupnorm": "group"},
    "A": {"leaky_relu": "leakyrelu", "leaky": "leakyrelu", "lrelu": "leakyrelu"},
    "P": {"maxpool": "max", "maxpooling": "max", "avgpool": "avg", "avgpooling": "avg", "average": "avg"},
}

_DEFAULTS = {
    "convnet": dict(width=128, depth=3, norm="instance", act="relu", pool="avg"),
    "mlp": dict(width=128, depth=2, norm="none", act="relu", pool="none"),
    "lenet": dict(width=6, depth=2, norm="none", act="relu", pool="max"),
}


@dataclass(frozen=True)
class ArchSpec:
    kind: str = "convnet"
    width: int = 128
    depth: int = 3
    norm: str = "instance"
    act: str = "relu"
    pool: str = "avg"
    in_channels: int = 1
    in_height: int = 28
    in_width: int = 28
    num_classes: int = 10

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown architecture kind {self.kind!r}")
        if self.norm not in NORMS:
            raise ValueError(f"unknown norm {self.norm!r}; choose from {NORMS}")
        if self.act not in ACTS:
            raise ValueError(f"unknown activation {self.act!r}; choose from {ACTS}")
        if self.pool not in POOLS:
            raise ValueError(f"unknown pooling {self.pool!r}; choose from {POOLS}")
        if self.width < 1 or self.depth < 1:
            raise ValueError("width and depth must be positive")
        if self.kind == "convnet" and self.norm == "group" and self.width % GROUPS:
            raise ValueError(f"group norm needs width divisible by {GROUPS}")

    @classmethod
    def parse(cls, text: str, **input_shape) -> "ArchSpec":
        """Parse ``kind[:K=V,...]``, e.g. ``convnet:W=128,D=3,N=instance,A=relu,P=avg``.

        Keys: ``W`` width, ``D`` depth, ``N`` norm, ``A`` activation, ``P`` pooling.
        Input geometry and class count come from keyword arguments.
        """
        kind, _, rest = text.strip().partition(":")
        kind = kind.strip().lower()
        if kind not in _DEFAULTS:
            raise ValueError(f"unknown architecture kind {kind!r} in {text!r}")
        fields = dict(_DEFAULTS[kind])
        for item in filter(None, (s.strip() for s in rest.split(","))):
            key, eq, val = item.partition("=")
            key, val = key.strip().upper(), val.strip().lower()
            if not eq:
                raise ValueError(f"expected KEY=VALUE, got {item!r} in {text!r}")
            if key == "W":
                fields["width"] = int(val)
            elif key == "D":
                fields["depth"] = int(val)
            elif key in ("N", "A", "P"):
                val = _ALIASES[key].get(val, val)
                fields[{"N": "norm", "A": "act", "P": "pool"}[key]] = val
            else:
                raise ValueError(f"unknown architecture key {key!r} in {text!r}")
        return cls(kind=kind, **fields, **input_shape)

    def __str__(self) -> str:
        return f"{self.kind}:W={self.width},D={self.depth},N={self.norm},A={self.act},P={self.pool}"

    def with_input(self, channels: int, height: int, width: int, num_classes: int) -> "ArchSpec":
        return dataclasses.replace(
            self, in_channels=channels, in_height=height, in_width=width, num_classes=num_classes
        )

    def replace(self, **changes) -> "ArchSpec":
        return dataclasses.replace(self, **changes)


def for_evaluation(spec: ArchSpec) -> ArchSpec:
    """Batch norm is unreliable on a handful of images; swap it for instance norm."""
    return spec.replace(norm="instance") if spec.norm == "batch" else spec


def _pooled(n: int) -> int:
    return (n + 1) // 2


def _layout(spec: ArchSpec) -> list[tuple[str, str, tuple[int, ...], int]]:
    """(name, kind, shape, fan_in) for every tensor, in canonical order."""
    c, h, w = spec.in_channels, spec.in_height, spec.in_width
    out: list[tuple[str, str, tuple[int, ...], int]] = []
    if spec.kind == "mlp":
        fan = c * h * w
        for i in range(spec.depth):
            out.append((f"fc{i}.weight", "fc", (spec.width, fan), fan))
            out.append((f"fc{i}.bias", "bias", (spec.width,), fan))
            fan = spec.width
        out.append(("classifier.weight", "fc", (spec.num_classes, fan), fan))
        out.append(("classifier.bias", "bias", (spec.num_classes,), fan))
        return out
    if spec.kind == "convnet":
        for i in range(spec.depth):
            out.append((f"conv{i}.weight", "conv", (spec.width, c, 3, 3), c * 9))
            out.append((f"conv{i}.bias", "bias", (spec.width,), c * 9))
            if spec.norm != "none":
                out.append((f"norm{i}.gamma", "norm_scale", (spec.width,), 0))
                out.append((f"norm{i}.beta", "norm_shift", (spec.width,), 0))
            c = spec.width
            if spec.pool != "none":
                h, w = _pooled(h), _pooled(w)
        fan = c * h * w
        out.append(("classifier.weight", "fc", (spec.num_classes, fan), fan))
        out.append(("classifier.bias", "bias", (spec.num_classes,), fan))
        return out
    # lenet
    for i, width in enumerate((6, 16)):
        out.append((f"conv{i}.weight", "conv", (width, c, 3, 3), c * 9))
        out.append((f"conv{i}.bias", "bias", (width,), c * 9))
        c = width
        if spec.pool != "none":
            h, w = _pooled(h), _pooled(w)
    fan = c * h * w
    for i, units in enumerate((120, 84)):
        out.append((f"fc{i}.weight", "fc", (units, fan), fan))
        out.append((f"fc{i}.bias", "bias", (units,), fan))
        fan = units
    out.append(("classifier.weight", "fc", (spec.num_classes, fan), fan))
    out.append(("classifier.bias", "bias", (spec.num_classes,), fan))
    return out


@dataclass(frozen=True)
class ModelParams:
    """Immutable weight snapshot for one architecture."""

    spec: ArchSpec
    tensors: Mapping[str, np.ndarray]
    kinds: Mapping[str, str]
    bn_stats: Mapping[int, tuple[np.ndarray, np.ndarray]] | None = field(default=None)

    @property
    def names(self) -> list[str]:
        return list(self.tensors)

    @property
    def weight_names(self) -> list[str]:
        """Conv and fully connected weights, the layers compared by gradient matching."""
        return [n for n in self.tensors if self.kinds[n] in ("conv", "fc")]

    @property
    def dtype(self) -> np.dtype:
        return next(iter(self.tensors.values())).dtype

    def num_params(self) -> int:
        return int(sum(t.size for t in self.tensors.values()))

    def leaves(self) -> dict[str, GraphValue]:
        """Fresh differentiable leaves over the current values."""
        return {n: GraphValue(t, requires_grad=True) for n, t in self.tensors.items()}

    def with_tensors(self, updates: Mapping[str, np.ndarray]) -> "ModelParams":
        new = dict(self.tensors)
        for n, t in updates.items():
            if n not in new:
                raise KeyError(n)
            if t.shape != new[n].shape:
                raise ShapeError(f"{n}: update shape {t.shape} != {new[n].shape}")
            new[n] = t
        return dataclasses.replace(self, tensors=new)


def init_params(spec: ArchSpec, seed: int, dtype=np.float32) -> ModelParams:
    """Kaiming-normal weights (std ``sqrt(2 / fan_in)``), zero biases, unit norm scales."""
    rng = np.random.default_rng(seed)
    tensors: dict[str, np.ndarray] = {}
    kinds: dict[str, str] = {}
    for name, kind, shape, fan_in in _layout(spec):
        if kind in ("conv", "fc"):
            t = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
        elif kind == "norm_scale":
            t = np.ones(shape)
        else:
            t = np.zeros(shape)
        tensors[name] = t.astype(dtype)
        kinds[name] = kind
    return ModelParams(spec, tensors, kinds)


def count_params(spec: ArchSpec) -> int:
    return sum(int(np.prod(shape)) for _, _, shape, _ in _layout(spec))


def _activation(spec: ArchSpec, h: GraphValue) -> GraphValue:
    if spec.act == "relu":
        return ops.relu(h)
    if spec.act == "leakyrelu":
        return ops.leaky_relu(h)
    return ops.sigmoid(h)


def _pool(spec: ArchSpec, h: GraphValue) -> GraphValue:
    if spec.pool == "none":
        return h
    h = ops.pad_to_even(h)
    return ops.maxpool2(h) if spec.pool == "max" else ops.avgpool2(h)


def _normalize(spec, h, gamma, beta, layer, frozen, record) -> GraphValue:
    B, C, H, W = h.shape
    eps = NORM_EPS
    if spec.norm == "group":
        hg = ops.reshape(h, (B, GROUPS, C // GROUPS, H, W))
        centered = ops.sub(hg, ops.mean(hg, (2, 3, 4), keepdims=True))
        v = ops.mean(ops.mul(centered, centered), (2, 3, 4), keepdims=True)
        inv = ops.div(1.0, ops.sqrt(v + eps))
        hn = ops.reshape(ops.mul(centered, inv), (B, C, H, W))
        return ops.add_bias(ops.mul(hn, ops.reshape(gamma, (1, C, 1, 1))), beta)
    if spec.norm == "batch" and frozen is not None:
        m, s = frozen[layer]
        mu = GraphValue(m.reshape(1, C, 1, 1).astype(h.dtype))
        inv = GraphValue((1.0 / np.sqrt(s.reshape(1, C, 1, 1) + eps)).astype(h.dtype))
        centered = ops.sub(h, mu)
    else:
        axes = {"instance": (2, 3), "layer": (1, 2, 3), "batch": (0, 2, 3)}[spec.norm]
        mu = ops.mean(h, axes, keepdims=True)
        centered = ops.sub(h, mu)
        v = ops.mean(ops.mul(centered, centered), axes, keepdims=True)
        if record is not None and spec.norm == "batch":
            record[layer] = (mu.data.reshape(C).copy(), v.data.reshape(C).copy())
        inv = ops.div(1.0, ops.sqrt(v + eps))
    # fold the affine scale into the small [B|1, C, 1, 1] factor
    gain = ops.mul(inv, ops.reshape(gamma, (1, C, 1, 1)))
    return ops.add_bias(ops.mul(centered, gain), beta)


def _fc(h: GraphValue, w: GraphValue, b: GraphValue) -> GraphValue:
    return ops.add_bias(ops.matmul(h, ops.transpose(w)), b)


def forward(
    params: ModelParams,
    batch,
    leaves: Mapping[str, GraphValue] | None = None,
    *,
    features: bool = False,
    record_stats: dict | None = None,
) -> GraphValue:
    """Logits ``[B, num_classes]`` (or penultimate features when ``features``).

    ``leaves`` supplies graph values for the weights; when omitted the weights
    enter as constants.
    """
    spec = params.spec
    x = batch if isinstance(batch, GraphValue) else as_value(np.asarray(batch, dtype=params.dtype))
    expected = (spec.in_channels, spec.in_height, spec.in_width)
    if x.ndim != 4 or x.shape[1:] != expected:
        raise ShapeError(f"forward: batch {x.shape} does not match input shape {expected} of {spec}")
    if x.dtype != params.dtype:
        x = GraphValue(x.data.astype(params.dtype)) if not x.requires_grad else x
    p = leaves if leaves is not None else {n: GraphValue(t) for n, t in params.tensors.items()}
    B = x.shape[0]

    if spec.kind == "mlp":
        h = ops.reshape(x, (B, -1))
        for i in range(spec.depth):
            h = _activation(spec, _fc(h, p[f"fc{i}.weight"], p[f"fc{i}.bias"]))
        if features:
            return h
        return _fc(h, p["classifier.weight"], p["classifier.bias"])

    if spec.kind == "convnet":
        h = x
        for i in range(spec.depth):
            h = ops.add_bias(ops.conv2d(h, p[f"conv{i}.weight"]), p[f"conv{i}.bias"])
            if spec.norm != "none":
                h = _normalize(spec, h, p[f"norm{i}.gamma"], p[f"norm{i}.beta"], i,
                               params.bn_stats, record_stats)
            h = _pool(spec, _activation(spec, h))
        if features:
            # spatial max: a spatial mean is nearly constant after instance norm
            return ops.reshape(ops.max(ops.reshape(h, (B, h.shape[1], -1)), axis=-1), (B, h.shape[1]))
        return _fc(ops.reshape(h, (B, -1)), p["classifier.weight"], p["classifier.bias"])

    h = x
    for i in range(2):
        h = ops.add_bias(ops.conv2d(h, p[f"conv{i}.weight"]), p[f"conv{i}.bias"])
        h = _pool(spec, _activation(spec, h))
    h = ops.reshape(h, (B, -1))
    for i in range(2):
        h = _activation(spec, _fc(h, p[f"fc{i}.weight"], p[f"fc{i}.bias"]))
    if features:
        return h
    return _fc(h, p["classifier.weight"], p["classifier.bias"])


def freeze_batchnorm(params: ModelParams, real_sample: np.ndarray) -> ModelParams:
    """Estimate per-channel batch statistics on ``real_sample`` and pin them."""
    if params.spec.kind != "convnet" or params.spec.norm != "batch":
        raise ValueError(f"freeze_batchnorm needs a batch-norm ConvNet, got {params.spec}")
    stats: dict[int, tuple[np.ndarray, np.ndarray]] = {}
    unfrozen = dataclasses.replace(params, bn_stats=None)
    forward(unfrozen, real_sample, record_stats=stats)
    return dataclasses.replace(params, bn_stats=stats)


def predict(params: ModelParams, images: np.ndarray, batch_size: int = 500) -> np.ndarray:
    """Class logits as a plain array, evaluated in chunks."""
    outs = [forward(params, images[i:i + batch_size]).data for i in range(0, len(images), batch_size)]
    return np.concatenate(outs, axis=0) if outs else np.zeros((0, params.spec.num_classes))
