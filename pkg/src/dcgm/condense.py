"""Curriculum gradient matching: learn a few synthetic images per class.

For every outer step a fresh network is drawn. Along a short training
trajectory of that network, the synthetic images of each class are nudged so
that the weight gradient they induce matches the gradient of a real batch of
the same class. The network itself is trained on the synthetic set between
matching rounds, with its update cut from the image graph.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .dataio import Dataset, SyntheticSet
from .diffcore import GraphValue, NumericError, differentiate
from .lossgrad import DISTANCES, GradientSet, cross_entropy
from .nets import ArchSpec, ModelParams, forward, freeze_batchnorm, init_params

__all__ = [
    "CondenseConfig",
    "CondenseHistory",
    "DivergenceError",
    "SyntheticSet",
    "condense",
    "default_loops",
    "derive_seed",
    "init_synthetic",
    "momentum_step",
    "sample_class_minibatch",
    "sgd_step",
    "write_loss_csv",
]

SMALL_CLASS_BATCH = 64


def default_loops(ipc: int) -> tuple[int, int]:
    """Default ``(T, steps_net)`` for a budget of ``ipc`` images per class."""
    if ipc < 1:
        raise ValueError("ipc must be at least 1")
    if ipc == 1:
        return 1, 1
    if ipc == 10:
        return 10, 50
    if ipc == 50:
        return 50, 10
    return ipc, max(1, 500 // ipc)


@dataclass(frozen=True)
class CondenseConfig:
    ipc: int = 1
    K: int = 1000
    T: int | None = None
    steps_syn: int = 1
    steps_net: int | None = None
    lr_syn: float = 0.1
    lr_net: float = 0.01
    momentum_net: float = 0.5
    real_batch: int | None = 256
    init: str = "noise"
    distance: str = "layerwise"
    early_stop_window: int = 100
    early_stop_tol: float = 1e-3
    seed: int = 0
    parallel_classes: int = 1

    def __post_init__(self):
        T, steps_net = default_loops(self.ipc)
        if self.T is None:
            object.__setattr__(self, "T", T)
        if self.steps_net is None:
            object.__setattr__(self, "steps_net", steps_net)
        for name in ("ipc", "K", "T", "steps_syn"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be at least 1")
        if self.steps_net < 0 or (self.steps_net == 0 and self.T > 1):
            raise ValueError("steps_net may only be 0 when T == 1")
        if self.real_batch is not None and self.real_batch < 1:
            raise ValueError("real_batch must be positive")
        if self.init not in ("noise", "real"):
            raise ValueError(f"init must be 'noise' or 'real', got {self.init!r}")
        if self.distance not in DISTANCES:
            raise ValueError(f"unknown distance {self.distance!r}; choose from {sorted(DISTANCES)}")
        if self.lr_syn < 0 or self.lr_net < 0 or not 0 <= self.momentum_net < 1:
            raise ValueError("learning rates must be >= 0 and momentum in [0, 1)")
        if self.early_stop_window < 0 or self.parallel_classes < 1:
            raise ValueError("early_stop_window must be >= 0 and parallel_classes >= 1")

    def digest(self) -> str:
        text = ";".join(f"{f.name}={getattr(self, f.name)!r}" for f in dataclasses.fields(self))
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    def replace(self, **changes) -> "CondenseConfig":
        return dataclasses.replace(self, **changes)


@dataclass
class CondenseHistory:
    """Per-outer-step mean matching loss plus structural diagnostics."""

    losses: list[float] = field(default_factory=list)
    # (outer step, inner step, deepest matching graph seen in that inner step)
    depths: list[tuple[int, int, int]] = field(default_factory=list)
    stopped_early: bool = False

    @property
    def steps(self) -> int:
        return len(self.losses)


class DivergenceError(NumericError):
    """Non-finite values appeared during condensation."""

    def __init__(self, message: str, snapshot: dict):
        super().__init__(message)
        self.snapshot = snapshot


def derive_seed(*parts: int) -> int:
    """Stable 63-bit seed for a tuple of integers."""
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(2, np.uint64)[0] >> np.uint64(1))


def sgd_step(tensors: Sequence[np.ndarray], grads: Sequence[np.ndarray], lr: float) -> list[np.ndarray]:
    """``x - lr * g`` for each pair."""
    if len(tensors) != len(grads):
        raise ValueError("one gradient is needed per tensor")
    out = []
    for x, g in zip(tensors, grads):
        x, g = np.asarray(x), np.asarray(g)
        if x.shape != g.shape:
            raise ValueError(f"sgd_step: gradient shape {g.shape} != tensor shape {x.shape}")
        out.append((x - np.asarray(lr, dtype=x.dtype) * g).astype(x.dtype, copy=False))
    return out


def momentum_step(tensors, grads, velocity, lr: float, momentum: float):
    """Heavy-ball SGD: ``v = m v + g``, ``x = x - lr v``. Returns ``(tensors, velocity)``."""
    new_v = []
    for v, g in zip(velocity, grads):
        if v.shape != g.shape:
            raise ValueError(f"momentum_step: gradient shape {g.shape} != velocity shape {v.shape}")
        new_v.append((np.asarray(momentum, dtype=v.dtype) * v + g).astype(v.dtype, copy=False))
    return sgd_step(tensors, new_v, lr), new_v


def sample_class_minibatch(dataset: Dataset, c: int, n: int, rng: np.random.Generator) -> np.ndarray:
    """Images of ``n`` distinct samples of class ``c`` (the whole class if it is smaller)."""
    if not 0 <= c < dataset.num_classes:
        raise ValueError(f"unknown class {c}; dataset has {dataset.num_classes}")
    idx = dataset.class_indices(c)
    if idx.size == 0:
        raise ValueError(f"class {c} is empty")
    pick = rng.permutation(idx.size)[: min(n, idx.size)]
    return dataset.images[idx[pick]]


def init_synthetic(dataset: Dataset, ipc: int, mode: str, rng: np.random.Generator) -> np.ndarray:
    c, H, W = dataset.image_shape
    if mode == "noise":
        return rng.standard_normal((dataset.num_classes * ipc, c, H, W)).astype(np.float32)
    blocks = []
    for cls in range(dataset.num_classes):
        idx = dataset.class_indices(cls)
        blocks.append(dataset.images[idx[rng.permutation(idx.size)[:ipc]]])
    return np.concatenate(blocks).astype(np.float32)


def _real_gradients(params: ModelParams, images: np.ndarray, c: int) -> GradientSet:
    leaves = params.leaves()
    wrt = [leaves[n] for n in params.weight_names]
    loss = cross_entropy(forward(params, images, leaves), np.full(len(images), c))
    grads = differentiate(loss, wrt)
    return GradientSet(grads, [params.kinds[n] for n in params.weight_names])


def _match_step(params: ModelParams, syn: np.ndarray, c: int, target: GradientSet, dist) -> tuple[np.ndarray, float, int]:
    """Gradient of the matching distance w.r.t. the class-``c`` synthetic images."""
    leaves = params.leaves()
    wrt = [leaves[n] for n in params.weight_names]
    s = GraphValue(syn, requires_grad=True)
    loss = cross_entropy(forward(params, s, leaves), np.full(len(syn), c))
    grads = differentiate(loss, wrt, create_graph=True)
    d = dist(GradientSet(grads, target.kinds), target)
    (gs,) = differentiate(d, [s])
    return gs.data, d.item(), d.depth


def _train_net(params: ModelParams, images: np.ndarray, labels: np.ndarray, velocity, cfg) -> tuple[ModelParams, list]:
    names = params.names
    for _ in range(cfg.steps_net):
        leaves = params.leaves()
        loss = cross_entropy(forward(params, images, leaves), labels)
        grads = [g.data for g in differentiate(loss, [leaves[n] for n in names], allow_unused=True)]
        new, velocity = momentum_step([params.tensors[n] for n in names], grads, velocity,
                                      cfg.lr_net, cfg.momentum_net)
        params = params.with_tensors(dict(zip(names, new)))
    return params, velocity


def _should_stop(losses: list[float], window: int, tol: float) -> bool:
    if window <= 0 or len(losses) < 2 * window:
        return False
    recent = float(np.mean(losses[-window:]))
    previous = float(np.mean(losses[-2 * window:-window]))
    return recent > previous * (1.0 - tol)


def condense(
    dataset: Dataset,
    spec: ArchSpec,
    cfg: CondenseConfig,
    on_step: Callable[[dict], None] | None = None,
) -> tuple[SyntheticSet, CondenseHistory]:
    """Learn ``cfg.ipc`` synthetic images per class by gradient matching.

    ``on_step`` is called after every synthetic update with a dict holding
    ``k``, ``t``, ``c``, ``loss`` and ``depth`` (depth of the matching graph).
    """
    C = dataset.num_classes
    counts = np.bincount(dataset.labels, minlength=C)
    if counts.min() < cfg.ipc:
        raise ValueError(f"class {int(counts.argmin())} has {int(counts.min())} samples, fewer than ipc={cfg.ipc}")
    spec = spec.with_input(*dataset.image_shape, C)
    batch = cfg.real_batch if cfg.real_batch is not None else 256
    if counts.min() < batch:
        batch = min(batch, SMALL_CLASS_BATCH)
    dist = DISTANCES[cfg.distance]
    uses_bn = spec.kind == "convnet" and spec.norm == "batch"

    rng = np.random.default_rng(derive_seed(cfg.seed, 0))
    syn = init_synthetic(dataset, cfg.ipc, cfg.init, rng)
    labels = np.repeat(np.arange(C), cfg.ipc)
    history = CondenseHistory()
    pool = ThreadPoolExecutor(cfg.parallel_classes) if cfg.parallel_classes > 1 else None

    def snapshot(k, t, c):
        return {"k": k, "t": t, "c": c, "images": syn.copy(), "losses": list(history.losses)}

    try:
        for k in range(cfg.K):
            params = init_params(spec, derive_seed(cfg.seed, 1, k))
            velocity = [np.zeros_like(params.tensors[n]) for n in params.names]
            step_losses: list[float] = []
            for t in range(cfg.T):
                # batches are drawn up front so class order and pooling do not change the stream
                real = [sample_class_minibatch(dataset, c, batch, rng) for c in range(C)]
                if uses_bn:
                    params = freeze_batchnorm(params, np.concatenate([r[:16] for r in real]))
                peak = 0

                def update_class(c: int):
                    sl = slice(c * cfg.ipc, (c + 1) * cfg.ipc)
                    target = _real_gradients(params, real[c], c)
                    block = syn[sl]
                    out = []
                    for _ in range(cfg.steps_syn):
                        g, loss, depth = _match_step(params, block, c, target, dist)
                        block = (block - np.float32(cfg.lr_syn) * g).astype(np.float32)
                        out.append((loss, depth))
                    return sl, block, out

                try:
                    results = pool.map(update_class, range(C)) if pool else map(update_class, range(C))
                    for c, (sl, block, out) in enumerate(results):
                        if not np.isfinite(block).all():
                            raise NumericError(f"non-finite synthetic pixels for class {c}")
                        syn[sl] = block
                        for loss, depth in out:
                            step_losses.append(loss)
                            peak = max(peak, depth)
                            if on_step is not None:
                                on_step({"k": k, "t": t, "c": c, "loss": loss, "depth": depth})
                except NumericError as exc:
                    raise DivergenceError(f"condensation diverged at k={k}, t={t}: {exc}",
                                          snapshot(k, t, None)) from exc
                history.depths.append((k, t, peak))
                if t == cfg.T - 1:
                    break
                plain = dataclasses.replace(params, bn_stats=None)
                try:
                    params, velocity = _train_net(plain, syn, labels, velocity, cfg)
                except NumericError as exc:
                    raise DivergenceError(f"network update diverged at k={k}, t={t}: {exc}",
                                          snapshot(k, t, None)) from exc
            history.losses.append(float(np.mean(step_losses)))
            if _should_stop(history.losses, cfg.early_stop_window, cfg.early_stop_tol):
                history.stopped_early = True
                break
    finally:
        if pool is not None:
            pool.shutdown()

    provenance = f"seed={cfg.seed};arch={spec};config={cfg.digest()}"
    result = SyntheticSet(syn.copy(), labels, cfg.ipc, C, np.asarray(dataset.mean, np.float32),
                          np.asarray(dataset.std, np.float32), provenance)
    return result, history


def loss_csv_text(history: CondenseHistory) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step", "mean_loss"])
    for i, v in enumerate(history.losses):
        w.writerow([i, repr(float(v))])
    return buf.getvalue()


def write_loss_csv(history: CondenseHistory, path) -> Path:
    path = Path(path)
    path.write_text(loss_csv_text(history), encoding="utf-8")
    return path
