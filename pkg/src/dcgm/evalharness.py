"""Train-from-scratch evaluation, repeated-run protocols, cross-architecture
matrices and proxy-set architecture ranking."""

from __future__ import annotations

import csv
import io
import itertools
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from .condense import CondenseConfig, condense, derive_seed
from .dataio import Dataset
from .diffcore import NumericError, differentiate
from .lossgrad import cross_entropy
from .nets import ACTS, NORMS, POOLS, ArchSpec, ModelParams, for_evaluation, forward, init_params, predict

log = logging.getLogger(__name__)

NAS_AXES: dict[str, tuple] = {
    "W": (32, 64, 128, 256),
    "D": (1, 2, 3, 4),
    "N": NORMS,
    "A": ACTS,
    "P": POOLS,
}


class TrainingDivergence(NumericError):
    """The training loss became non-finite."""


class RunError(RuntimeError):
    """A protocol run failed; the message names the run."""


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    lr: float = 0.01
    momentum: float = 0.9
    batch_size: int = 256
    cosine: bool = True


def fit(
    train_set: Dataset,
    spec: ArchSpec,
    cfg: TrainConfig = TrainConfig(),
    seed: int = 0,
    on_epoch: Callable[[int, ModelParams], None] | None = None,
    rewrite_norm: bool = True,
) -> ModelParams:
    """Train a freshly initialised network with momentum SGD."""
    if len(train_set) == 0:
        raise ValueError("cannot train on an empty set")
    spec = spec.with_input(*train_set.image_shape, train_set.num_classes)
    if rewrite_norm:
        spec = for_evaluation(spec)
    params = init_params(spec, derive_seed(seed, 0))
    rng = np.random.default_rng(derive_seed(seed, 1))
    names = params.names
    velocity = [np.zeros_like(params.tensors[n]) for n in names]
    n = len(train_set)
    per_epoch = math.ceil(n / cfg.batch_size)
    total = max(1, cfg.epochs * per_epoch)
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        for b in range(per_epoch):
            idx = np.sort(order[b * cfg.batch_size:(b + 1) * cfg.batch_size])
            lr = cfg.lr * 0.5 * (1.0 + math.cos(math.pi * step / total)) if cfg.cosine else cfg.lr
            leaves = params.leaves()
            try:
                loss = cross_entropy(forward(params, train_set.images[idx], leaves), train_set.labels[idx])
                grads = differentiate(loss, [leaves[k] for k in names], allow_unused=True)
            except NumericError as exc:
                raise TrainingDivergence(f"training {spec} diverged in epoch {epoch}: {exc}") from exc
            new = {}
            for i, k in enumerate(names):
                velocity[i] = (np.float32(cfg.momentum) * velocity[i] + grads[i].data).astype(velocity[i].dtype)
                new[k] = (params.tensors[k] - np.float32(lr) * velocity[i]).astype(params.tensors[k].dtype)
            params = params.with_tensors(new)
            step += 1
        if on_epoch is not None:
            on_epoch(epoch, params)
    return params


def accuracy(params: ModelParams, data: Dataset) -> float:
    if len(data) == 0:
        raise ValueError("cannot score an empty set")
    logits = predict(params, data.images)
    return float(np.mean(np.argmax(logits, axis=1) == data.labels))


def train_from_scratch(
    train_set: Dataset,
    spec: ArchSpec,
    test_set: Dataset,
    epochs: int = 100,
    lr: float = 0.01,
    seed: int = 0,
    **kwargs,
) -> float:
    """Test accuracy of a fresh model trained on ``train_set``."""
    params = fit(train_set, spec, TrainConfig(epochs=epochs, lr=lr, **kwargs), seed)
    return accuracy(params, test_set)


# -- repeated-run protocol -----------------------------------------------------

@dataclass
class EvalReport:
    accuracies: list[float]
    n_sets: int
    runs_per_set: int
    metadata: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if len(self.accuracies) != self.n_sets * self.runs_per_set:
            raise ValueError("need exactly n_sets * runs_per_set accuracies")

    @property
    def mean(self) -> float:
        return float(np.mean(self.accuracies))

    @property
    def std(self) -> float:
        return float(np.std(self.accuracies))

    def rows(self) -> list[tuple[int, int, float]]:
        return [(i // self.runs_per_set, i % self.runs_per_set, a) for i, a in enumerate(self.accuracies)]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["set_id", "model_id", "accuracy"])
        for s, m, a in self.rows():
            w.writerow([s, m, repr(float(a))])
        return buf.getvalue()

    def __str__(self) -> str:
        return f"{100 * self.mean:.2f} +- {100 * self.std:.2f} ({len(self.accuracies)} runs)"


def _train_task(args) -> float:
    set_id, model_id, train_set, spec, test_set, tcfg, seed = args
    try:
        return accuracy(fit(train_set, spec, tcfg, seed), test_set)
    except Exception as exc:
        raise RunError(f"set {set_id} model {model_id} ({spec}): {exc}") from exc


def run_pool(fn, tasks: Sequence, workers: int = 1) -> list:
    """Map ``fn`` over ``tasks`` in order, optionally across worker processes."""
    if workers <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, tasks))


def evaluate_protocol(
    set_builder: Callable[[int], Dataset],
    spec: ArchSpec,
    test_set: Dataset,
    n_sets: int = 5,
    n_models: int = 20,
    train: TrainConfig = TrainConfig(),
    seed: int = 0,
    workers: int = 1,
    metadata: dict | None = None,
) -> EvalReport:
    """Train ``n_models`` fresh models on each of ``n_sets`` built sets."""
    tasks = []
    for s in range(n_sets):
        try:
            train_set = set_builder(s)
        except Exception as exc:
            raise RunError(f"building set {s} failed: {exc}") from exc
        for m in range(n_models):
            tasks.append((s, m, train_set, spec, test_set, train, derive_seed(seed, s, m)))
    accs = run_pool(_train_task, tasks, workers)
    meta = {"arch": str(for_evaluation(spec)), "epochs": train.epochs, "lr": train.lr, "seed": seed}
    meta.update(metadata or {})
    return EvalReport(accs, n_sets, n_models, meta)


def write_report_csv(report: EvalReport, path) -> Path:
    path = Path(path)
    path.write_text(report.to_csv(), encoding="utf-8")
    return path


# -- cross-architecture matrix ---------------------------------------------------

@dataclass
class CrossArchMatrix:
    rows: list[str]
    cols: list[str]
    cells: dict[tuple[str, str], EvalReport]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["condense\\eval"] + self.cols)
        for r in self.rows:
            w.writerow([r] + [f"{self.cells[r, c].mean:.6f}+-{self.cells[r, c].std:.6f}" for c in self.cols])
        return buf.getvalue()


def cross_arch_matrix(
    train_set: Dataset,
    test_set: Dataset,
    condense_specs: Sequence[ArchSpec],
    eval_specs: Sequence[ArchSpec],
    cfg: CondenseConfig,
    n_sets: int = 1,
    n_models: int = 5,
    train: TrainConfig = TrainConfig(),
    seed: int = 0,
    workers: int = 1,
) -> CrossArchMatrix:
    """Condense once per row architecture, evaluate on every column architecture."""
    cells = {}
    rows, cols = [str(s) for s in condense_specs], [str(s) for s in eval_specs]
    for cspec, rname in zip(condense_specs, rows):
        built: dict[int, Dataset] = {}

        def builder(s: int, cspec=cspec, built=built) -> Dataset:
            if s not in built:
                built[s] = condense(train_set, cspec, cfg.replace(seed=derive_seed(seed, s)))[0].as_dataset()
            return built[s]

        for espec, cname in zip(eval_specs, cols):
            try:
                cells[rname, cname] = evaluate_protocol(builder, espec, test_set, n_sets, n_models,
                                                        train, seed, workers, {"condense_arch": rname})
            except Exception as exc:
                raise RunError(f"cell [{rname}][{cname}]: {exc}") from exc
    return CrossArchMatrix(rows, cols, cells)


# -- rank statistics -------------------------------------------------------------

def average_ranks(xs: Sequence[float]) -> np.ndarray:
    """1-based ranks with ties sharing the mean of their positions."""
    x = np.asarray(xs, dtype=np.float64)
    order = np.argsort(x, kind="mergesort")
    ranks = np.empty(len(x), dtype=np.float64)
    sx = x[order]
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and sx[j + 1] == sx[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def spearman(xs: Sequence[float], ys: Sequence[float]) -> float:
    """Spearman coefficient: Pearson correlation of average ranks."""
    if len(xs) != len(ys):
        raise ValueError(f"length mismatch: {len(xs)} vs {len(ys)}")
    if len(xs) < 2:
        raise ValueError("need at least two pairs")
    rx, ry = average_ranks(xs), average_ranks(ys)
    dx, dy = rx - rx.mean(), ry - ry.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    if sxx == 0.0 or syy == 0.0:
        raise ValueError("spearman is undefined when one list has no rank variance")
    return float(np.clip((dx @ dy) / math.sqrt(sxx * syy), -1.0, 1.0))


# -- architecture search -----------------------------------------------------------

def parse_grid(text: str | None) -> dict[str, tuple]:
    """Axis overrides like ``W=32,64;D=1,2`` on top of the full search space."""
    axes = dict(NAS_AXES)
    if not text:
        return axes
    for part in text.split(";"):
        part = part.strip()
        if not part:
            continue
        key, sep, vals = part.partition("=")
        key = key.strip().upper()
        if not sep or key not in axes:
            raise ValueError(f"bad grid entry {part!r}; keys are {sorted(axes)}")
        items = [v.strip().lower() for v in vals.split(",") if v.strip()]
        if not items:
            raise ValueError(f"grid axis {key} has no values")
        if key in ("W", "D"):
            chosen = tuple(int(v) for v in items)
        else:
            attr = {"N": "norm", "A": "act", "P": "pool"}[key]
            chosen = tuple(getattr(ArchSpec.parse(f"convnet:{key}={v}"), attr) for v in items)
        axes[key] = chosen
    return axes


def search_space(grid: str | dict | None = None, **input_shape) -> list[ArchSpec]:
    axes = grid if isinstance(grid, dict) else parse_grid(grid)
    out = []
    for w, d, n, a, p in itertools.product(axes["W"], axes["D"], axes["N"], axes["A"], axes["P"]):
        out.append(ArchSpec(kind="convnet", width=int(w), depth=int(d), norm=n, act=a, pool=p, **input_shape))
    return out


def validation_split(data: Dataset, fraction: float = 0.1, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Seeded (train, validation) split of ``data``."""
    rng = np.random.default_rng(derive_seed(seed, 7))
    perm = rng.permutation(len(data))
    n_val = max(1, int(round(fraction * len(data))))
    val, rest = np.sort(perm[:n_val]), np.sort(perm[n_val:])
    return data.subset(rest, f"{data.name}-train"), data.subset(val, f"{data.name}-val")


@dataclass
class NasResult:
    archs: list[str]
    val_acc: list[float | None]
    ref_acc: list[float | None] | None
    ranking: list[int]
    top_k: list[int]
    spearman: float | None
    failures: dict[int, str] = field(default_factory=dict)

    def rank_of(self, i: int) -> int | None:
        return self.ranking.index(i) + 1 if i in self.ranking else None

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["arch", "val_acc", "ref_acc", "rank"])
        for i, a in enumerate(self.archs):
            v = "" if self.val_acc[i] is None else repr(float(self.val_acc[i]))
            r = "" if self.ref_acc is None or self.ref_acc[i] is None else repr(float(self.ref_acc[i]))
            rank = self.rank_of(i)
            w.writerow([a, v, r, "" if rank is None else rank])
        return buf.getvalue()


def _nas_task(args) -> tuple[float | None, str | None]:
    spec, train_set, val_set, tcfg, seed = args
    try:
        return accuracy(fit(train_set, spec, tcfg, seed, rewrite_norm=False), val_set), None
    except Exception as exc:  # recorded, excluded from the ranking
        return None, f"{type(exc).__name__}: {exc}"


def score_architectures(
    space: Sequence[ArchSpec], train_set: Dataset, val_set: Dataset, train: TrainConfig, seed: int = 0,
    workers: int = 1,
) -> tuple[list[float | None], dict[int, str]]:
    tasks = [(s, train_set, val_set, train, derive_seed(seed, i)) for i, s in enumerate(space)]
    results = run_pool(_nas_task, tasks, workers)
    failures = {i: err for i, (_, err) in enumerate(results) if err is not None}
    for i, err in failures.items():
        log.warning("architecture %s failed and is left unranked: %s", space[i], err)
    return [acc for acc, _ in results], failures


def nas_search(
    space: Sequence[ArchSpec],
    proxy_set: Dataset,
    val_set: Dataset,
    train: TrainConfig = TrainConfig(epochs=100),
    top_k: int = 10,
    ref_acc: Sequence[float | None] | None = None,
    seed: int = 0,
    workers: int = 1,
) -> NasResult:
    """Rank ``space`` by validation accuracy after training on ``proxy_set``."""
    if ref_acc is not None and len(ref_acc) != len(space):
        raise ValueError("one reference accuracy is needed per architecture")
    val, failures = score_architectures(space, proxy_set, val_set, train, seed, workers)
    ok = [i for i, v in enumerate(val) if v is not None]
    ranking = sorted(ok, key=lambda i: (-val[i], i))
    top = ranking[:top_k]
    rho = None
    if ref_acc is not None:
        pairs = [i for i in top if ref_acc[i] is not None]
        if len(pairs) >= 2:
            try:
                rho = spearman([val[i] for i in pairs], [ref_acc[i] for i in pairs])
            except ValueError as exc:
                log.warning("spearman undefined over the top %d: %s", len(pairs), exc)
    return NasResult([str(s) for s in space], list(val), None if ref_acc is None else list(ref_acc),
                     ranking, top, rho, failures)


def write_text(path, text: str) -> Path:
    path = Path(path)
    path.write_text(text, encoding="utf-8")
    return path

