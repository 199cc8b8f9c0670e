"""Coreset baselines: random, herding, k-center and forgetting selection.

Every selector returns global sample indices in class-major order with exactly
``ipc`` entries per class. Ties are always broken towards the lower index.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .condense import derive_seed
from .dataio import Dataset
from .evalharness import TrainConfig, fit
from .nets import ArchSpec, ModelParams, forward, predict

METHODS = ("random", "herding", "kcenter", "forgetting")


@dataclass
class FeatureTable:
    features: np.ndarray
    ids: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        if self.features.ndim != 2 or len(self.features) != len(self.ids) or len(self.ids) != len(self.labels):
            raise ValueError("need one feature row per sample id and label")

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def classes(self) -> np.ndarray:
        return np.unique(self.labels)


def _class_members(labels: np.ndarray, c: int) -> np.ndarray:
    members = np.flatnonzero(labels == c)
    if members.size == 0:
        raise ValueError(f"class {c} is empty")
    return members


def random_select(dataset: Dataset, ipc: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(derive_seed(seed, 11))
    out = []
    for c in range(dataset.num_classes):
        members = np.flatnonzero(dataset.labels == c)
        if members.size < ipc:
            raise ValueError(f"class {c} has {members.size} samples, fewer than ipc={ipc}")
        out.append(members[rng.choice(members.size, ipc, replace=False)])
    return np.concatenate(out)


def _sq_dist(points: np.ndarray, centre: np.ndarray) -> np.ndarray:
    d = points.astype(np.float64) - centre.astype(np.float64)
    return np.einsum("ij,ij->i", d, d)


TIE_RTOL = 1e-9


def _mean_dist(f: np.ndarray) -> np.ndarray:
    # ||n*x - sum||^2 ranks like the distance to the mean without dividing
    return _sq_dist(f * len(f), f.sum(axis=0))


def _tol(d: np.ndarray) -> float:
    finite = d[np.isfinite(d)]
    return TIE_RTOL * (float(np.abs(finite).max()) if finite.size else 0.0)


def _tie_order(dist: np.ndarray, ids: np.ndarray) -> np.ndarray:
    """Ascending distance; values within the tie tolerance count as equal and go by id."""
    order = np.lexsort((ids, dist))
    tol = _tol(dist)
    group = np.zeros(len(order), dtype=np.int64)
    start = dist[order[0]] if len(order) else 0.0
    for k in range(1, len(order)):
        if dist[order[k]] - start > tol:
            start = dist[order[k]]
            group[k] = group[k - 1] + 1
        else:
            group[k] = group[k - 1]
    return order[np.lexsort((ids[order], group))]


def _first_extreme(d: np.ndarray, largest: bool) -> int:
    """Lowest position whose value is within the tie tolerance of the extreme."""
    tol = _tol(d)
    hits = d >= d.max() - tol if largest else d <= d.min() + tol
    return int(np.flatnonzero(hits)[0])


def herding_select(table: FeatureTable, ipc: int, num_classes: int | None = None) -> np.ndarray:
    """Per class, the ``ipc`` samples closest to the class feature mean, nearest first."""
    classes = range(num_classes) if num_classes is not None else table.classes()
    out = []
    for c in classes:
        m = _class_members(table.labels, c)
        if m.size < ipc:
            raise ValueError(f"class {c} has {m.size} samples, fewer than ipc={ipc}")
        order = _tie_order(_mean_dist(table.features[m].astype(np.float64)), table.ids[m])
        out.append(table.ids[m[order[:ipc]]])
    return np.concatenate(out)


def kcenter_select(table: FeatureTable, ipc: int, num_classes: int | None = None) -> np.ndarray:
    """Greedy farthest-point centres, seeded by the sample closest to the class mean."""
    classes = range(num_classes) if num_classes is not None else table.classes()
    out = []
    for c in classes:
        m = _class_members(table.labels, c)
        if m.size < ipc:
            raise ValueError(f"class {c} has {m.size} samples, fewer than ipc={ipc}")
        # ascending id order makes "first within tolerance" the lowest id
        m = m[np.argsort(table.ids[m], kind="stable")]
        f = table.features[m].astype(np.float64)
        first = _first_extreme(_mean_dist(f), largest=False)
        picked = [first]
        nearest = _sq_dist(f, f[first])
        while len(picked) < ipc:
            cand = nearest.copy()
            cand[picked] = -np.inf
            nxt = _first_extreme(cand, largest=True)
            picked.append(nxt)
            nearest = np.minimum(nearest, _sq_dist(f, f[nxt]))
        out.append(table.ids[m[picked]])
    return np.concatenate(out)


def count_forgetting_events(trace: Sequence[bool] | np.ndarray) -> np.ndarray | int:
    """Correct-to-incorrect transitions along axis 0 of a correctness trace."""
    t = np.asarray(trace, dtype=bool)
    events = np.sum(t[:-1] & ~t[1:], axis=0)
    return int(events) if t.ndim == 1 else events


def training_trace(dataset: Dataset, spec: ArchSpec, epochs: int, seed: int,
                   train: TrainConfig | None = None) -> tuple[np.ndarray, np.ndarray, ModelParams]:
    """Per-epoch correctness ``[epochs, N]``, final per-sample loss and the trained model."""
    cfg = train or TrainConfig(epochs=epochs, batch_size=64)
    cfg = TrainConfig(epochs=epochs, lr=cfg.lr, momentum=cfg.momentum, batch_size=cfg.batch_size, cosine=cfg.cosine)
    trace = []

    def record(_epoch: int, params: ModelParams) -> None:
        trace.append(np.argmax(predict(params, dataset.images), axis=1) == dataset.labels)

    params = fit(dataset, spec, cfg, seed, on_epoch=record, rewrite_norm=False)
    logits = predict(params, dataset.images).astype(np.float64)
    shifted = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    losses = lse - shifted[np.arange(len(dataset)), dataset.labels]
    return np.stack(trace), losses, params


def forgetting_select(dataset: Dataset, spec: ArchSpec, epochs: int, seed: int, ipc: int,
                      train: TrainConfig | None = None) -> np.ndarray:
    """Per class, the most often forgotten samples (then higher final loss, then lower index)."""
    if epochs < 2:
        raise ValueError("forgetting needs at least 2 epochs to observe a transition")
    trace, losses, _ = training_trace(dataset, spec, epochs, seed, train)
    return rank_by_forgetting(count_forgetting_events(trace), losses, dataset.labels, ipc, dataset.num_classes)


def rank_by_forgetting(events: np.ndarray, losses: np.ndarray, labels: np.ndarray, ipc: int,
                       num_classes: int) -> np.ndarray:
    out = []
    for c in range(num_classes):
        m = _class_members(labels, c)
        if m.size < ipc:
            raise ValueError(f"class {c} has {m.size} samples, fewer than ipc={ipc}")
        order = np.lexsort((m, -losses[m], -events[m]))
        out.append(m[order[:ipc]])
    return np.concatenate(out)


def feature_table(params: ModelParams, dataset: Dataset, batch_size: int = 500) -> FeatureTable:
    chunks = [forward(params, dataset.images[i:i + batch_size], features=True).data
              for i in range(0, len(dataset), batch_size)]
    return FeatureTable(np.concatenate(chunks).astype(np.float32), np.arange(len(dataset)), dataset.labels.copy())


def extract_features(dataset: Dataset, spec: ArchSpec | None = None, epochs: int = 20, seed: int = 0,
                     train: TrainConfig | None = None) -> FeatureTable:
    """Train a reference network on the whole set and embed every sample."""
    spec = spec or ArchSpec()
    base = train or TrainConfig(batch_size=64)
    cfg = TrainConfig(epochs=epochs, lr=base.lr, momentum=base.momentum, batch_size=base.batch_size,
                      cosine=base.cosine)
    params = fit(dataset, spec, cfg, seed, rewrite_norm=False)
    return feature_table(params, dataset)


def select(method: str, dataset: Dataset, ipc: int, seed: int, *, spec: ArchSpec | None = None,
           epochs: int = 20, table: FeatureTable | None = None, train: TrainConfig | None = None) -> np.ndarray:
    """Dispatch by method name."""
    if method == "random":
        return random_select(dataset, ipc, seed)
    if method in ("herding", "kcenter"):
        table = table or extract_features(dataset, spec, epochs, seed, train)
        fn = herding_select if method == "herding" else kcenter_select
        return fn(table, ipc, dataset.num_classes)
    if method == "forgetting":
        return forgetting_select(dataset, spec or ArchSpec(), epochs, seed, ipc, train)
    raise ValueError(f"unknown coreset method {method!r}; choose from {METHODS}")


def write_indices(path, indices: Sequence[int], method: str, ipc: int, seed: int) -> Path:
    path = Path(path)
    lines = [f"# method={method} ipc={ipc} seed={seed}"] + [str(int(i)) for i in indices]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def read_indices(path) -> tuple[np.ndarray, dict[str, str]]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or not lines[0].startswith("#"):
        raise ValueError(f"{path}: missing '# method=... ipc=... seed=...' header")
    meta = dict(item.split("=", 1) for item in lines[0][1:].split())
    return np.array([int(x) for x in lines[1:] if x.strip()], dtype=np.int64), meta


__all__ = [
    "FeatureTable",
    "METHODS",
    "count_forgetting_events",
    "extract_features",
    "feature_table",
    "forgetting_select",
    "herding_select",
    "kcenter_select",
    "random_select",
    "rank_by_forgetting",
    "read_indices",
    "select",
    "training_trace",
    "write_indices",
]
