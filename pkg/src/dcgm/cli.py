"""Command-line front end: ``dcgm {condense,eval,coreset,nas,inspect}``.

Runs are driven by a flat ``key = value`` config file (``#`` starts a
comment). Command-line flags override the file, which overrides the
built-in defaults. Each run writes the resolved config and a manifest of
SHA-256 hashes next to its artifacts.

Exit codes: 0 success, 1 internal or numeric failure, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import hashlib
import logging
import sys
from pathlib import Path
from typing import Any, Callable

import numpy as np

from . import coresets, dataio
from .condense import CondenseConfig, condense, write_loss_csv
from .dataio import Dataset, FormatError
from .evalharness import (
    TrainConfig,
    evaluate_protocol,
    nas_search,
    score_architectures,
    search_space,
    validation_split,
    write_report_csv,
    write_text,
)
from .nets import ArchSpec

log = logging.getLogger("dcgm")


class ConfigError(Exception):
    """Bad usage or configuration (exit code 2)."""


def _opt_int(text: str) -> int | None:
    return None if text.strip().lower() in ("", "none", "auto") else int(text)


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


# key -> (parser, default)
SCHEMA: dict[str, tuple[Callable[[str], Any], Any]] = {
    "dataset": (str, "toy"),
    "data_root": (str, ""),
    "toy_classes": (int, 10),
    "toy_per_class": (int, 500),
    "toy_size": (int, 16),
    "toy_seed": (int, 0),
    "arch": (str, "convnet"),
    "eval_arch": (str, ""),
    "ipc": (int, 1),
    "K": (int, 1000),
    "T": (_opt_int, None),
    "steps_syn": (int, 1),
    "steps_net": (_opt_int, None),
    "lr_syn": (float, 0.1),
    "lr_net": (float, 0.01),
    "momentum_net": (float, 0.5),
    "real_batch": (_opt_int, 256),
    "init": (str, "noise"),
    "distance": (str, "layerwise"),
    "early_stop_window": (int, 100),
    "early_stop_tol": (float, 1e-3),
    "parallel_classes": (int, 1),
    "n_sets": (int, 5),
    "n_models": (int, 20),
    "eval_epochs": (int, 100),
    "eval_lr": (float, 0.01),
    "eval_momentum": (float, 0.9),
    "eval_batch": (int, 256),
    "coreset_epochs": (int, 20),
    "feature_arch": (str, "convnet"),
    "nas_grid": (str, ""),
    "nas_proxy": (str, ""),
    "nas_epochs": (int, 100),
    "nas_ref_epochs": (int, 10),
    "nas_top_k": (int, 10),
    "nas_val_fraction": (float, 0.1),
    "export_png": (_bool, True),
    "seed": (int, 0),
    "workers": (int, 1),
    "out": (str, "out"),
}


def parse_config_text(text: str, source: str = "<config>") -> dict[str, Any]:
    values: dict[str, Any] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if not sep or not key:
            raise ConfigError(f"{source}:{lineno}: expected key = value, got {raw.strip()!r}")
        values[key] = _coerce(key, val, f"{source}:{lineno}")
    return values


def _coerce(key: str, val: str, where: str) -> Any:
    if key not in SCHEMA:
        raise ConfigError(f"{where}: unknown config key {key!r}")
    try:
        return SCHEMA[key][0](val)
    except ValueError as exc:
        raise ConfigError(f"{where}: bad value for {key}: {exc}") from None


def resolve_config(path: str | None, overrides: dict[str, str]) -> dict[str, Any]:
    cfg = {k: d for k, (_, d) in SCHEMA.items()}
    if path:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        cfg.update(parse_config_text(p.read_text(encoding="utf-8"), str(p)))
    for k, v in overrides.items():
        cfg[k] = _coerce(k, v, "command line")
    return cfg


def format_config(cfg: dict[str, Any]) -> str:
    lines = [f"{k} = {'none' if cfg[k] is None else cfg[k]}" for k in SCHEMA]
    return "\n".join(lines) + "\n"


# -- shared helpers -------------------------------------------------------------

def load_data(cfg: dict[str, Any]) -> tuple[Dataset, Dataset]:
    name = cfg["dataset"].lower()
    if name == "toy":
        return dataio.make_toy(cfg["toy_classes"], cfg["toy_per_class"], cfg["toy_size"], cfg["toy_seed"])
    root = Path(cfg["data_root"]) if cfg["data_root"] else None
    if root is None or not root.exists():
        raise ConfigError(f"dataset path does not exist: {cfg['data_root'] or '(data_root is empty)'}")
    try:
        if name in ("mnist", "fashionmnist"):
            return dataio.load_mnist(root, name=name)
        if name == "cifar10":
            return dataio.load_cifar10(root)
    except FileNotFoundError as exc:
        raise ConfigError(f"dataset file missing: {exc}") from None
    raise ConfigError(f"unknown dataset {cfg['dataset']!r}; choose toy, mnist, fashionmnist or cifar10")


def _arch(text: str, data: Dataset) -> ArchSpec:
    try:
        return ArchSpec.parse(text).with_input(*data.image_shape, data.num_classes)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def condense_config(cfg: dict[str, Any]) -> CondenseConfig:
    try:
        return CondenseConfig(
            ipc=cfg["ipc"], K=cfg["K"], T=cfg["T"], steps_syn=cfg["steps_syn"], steps_net=cfg["steps_net"],
            lr_syn=cfg["lr_syn"], lr_net=cfg["lr_net"], momentum_net=cfg["momentum_net"],
            real_batch=cfg["real_batch"], init=cfg["init"], distance=cfg["distance"],
            early_stop_window=cfg["early_stop_window"], early_stop_tol=cfg["early_stop_tol"],
            seed=cfg["seed"], parallel_classes=cfg["parallel_classes"],
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def train_config(cfg: dict[str, Any], epochs_key: str = "eval_epochs") -> TrainConfig:
    return TrainConfig(epochs=cfg[epochs_key], lr=cfg["eval_lr"], momentum=cfg["eval_momentum"],
                       batch_size=cfg["eval_batch"])


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def finish_run(out: Path, cfg: dict[str, Any], artifacts: list[Path]) -> None:
    resolved = write_text(out / "config.resolved", format_config(cfg))
    files = sorted({p.resolve() for p in [*artifacts, resolved]})
    lines = [f"{sha256_file(p)}  {p.name}" for p in files]
    (out / "manifest.sha256").write_text("\n".join(lines) + "\n", encoding="utf-8")


def _progress(every: int) -> Callable[[dict], None]:
    def cb(info: dict) -> None:
        if info["c"] == 0 and info["t"] == 0 and info["k"] % every == 0:
            log.info("outer step %d: class-0 matching loss %.4f", info["k"], info["loss"])
    return cb


# -- commands -------------------------------------------------------------------

def cmd_condense(cfg: dict[str, Any], out: Path) -> int:
    train, test = load_data(cfg)
    spec = _arch(cfg["arch"], train)
    syn, history = condense(train, spec, condense_config(cfg), on_step=_progress(10))
    artifacts = [dataio.save_condensed(syn, out / "condensed.dcgm"), write_loss_csv(history, out / "loss.csv")]
    if cfg["export_png"]:
        artifacts.append(dataio.export_image_grid(syn, out / "grid.png"))
    finish_run(out, cfg, artifacts)
    print(f"condensed {syn.num_classes}x{syn.ipc} images in {history.steps} outer steps -> {out}")
    return 0


def _load_trainset(path: str) -> Dataset:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"training set file not found: {p}")
    try:
        return dataio.load_condensed(p).as_dataset(p.stem)
    except FormatError as exc:
        raise ConfigError(f"{p}: {exc}") from None


def cmd_eval(cfg: dict[str, Any], out: Path, trainset: str) -> int:
    train_set = _load_trainset(trainset)
    _, test = load_data(cfg)
    if train_set.image_shape != test.image_shape or train_set.num_classes != test.num_classes:
        raise ConfigError(f"{trainset} does not match the {cfg['dataset']} test split")
    spec = _arch(cfg["eval_arch"] or cfg["arch"], test)
    report = evaluate_protocol(lambda _s: train_set, spec, test, cfg["n_sets"], cfg["n_models"],
                               train_config(cfg), cfg["seed"], cfg["workers"], {"train_set": trainset})
    csv_path = write_report_csv(report, out / "eval.csv")
    finish_run(out, cfg, [csv_path])
    print(f"{spec}: {report}")
    return 0


def cmd_coreset(cfg: dict[str, Any], out: Path, method: str) -> int:
    if method not in coresets.METHODS:
        raise ConfigError(f"unknown coreset method {method!r}; choose from {', '.join(coresets.METHODS)}")
    train, test = load_data(cfg)
    feature_spec = _arch(cfg["feature_arch"], train)
    tcfg = TrainConfig(batch_size=64, lr=cfg["eval_lr"], momentum=cfg["eval_momentum"])
    table = None
    if method in ("herding", "kcenter"):
        table = coresets.extract_features(train, feature_spec, cfg["coreset_epochs"], cfg["seed"], tcfg)
    chosen: dict[int, np.ndarray] = {}

    def builder(s: int) -> Dataset:
        # only random selection varies with the set id; the others are computed once
        key = s if method == "random" else 0
        if key not in chosen:
            chosen[key] = coresets.select(method, train, cfg["ipc"], cfg["seed"] + key, spec=feature_spec,
                                          epochs=cfg["coreset_epochs"], table=table, train=tcfg)
        return train.subset(chosen[key], f"{method}-{key}")

    spec = _arch(cfg["eval_arch"] or cfg["arch"], train)
    report = evaluate_protocol(builder, spec, test, cfg["n_sets"], cfg["n_models"], train_config(cfg),
                               cfg["seed"], cfg["workers"], {"method": method})
    artifacts = [coresets.write_indices(out / "indices.txt", chosen[0], method, cfg["ipc"], cfg["seed"]),
                 write_report_csv(report, out / "eval.csv")]
    finish_run(out, cfg, artifacts)
    print(f"{method} ipc={cfg['ipc']}: {report}")
    return 0


def cmd_nas(cfg: dict[str, Any], out: Path, grid: str | None) -> int:
    train, _ = load_data(cfg)
    fit_set, val_set = validation_split(train, cfg["nas_val_fraction"], cfg["seed"])
    c, h, w = train.image_shape
    try:
        space = search_space(grid if grid is not None else cfg["nas_grid"], in_channels=c, in_height=h,
                             in_width=w, num_classes=train.num_classes)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    if cfg["nas_proxy"]:
        proxy = _load_trainset(cfg["nas_proxy"])
    else:
        proxy = fit_set.subset(coresets.random_select(fit_set, cfg["ipc"], cfg["seed"]), "random-proxy")
    ref, _ = score_architectures(space, fit_set, val_set, train_config(cfg, "nas_ref_epochs"), cfg["seed"],
                                 cfg["workers"])
    result = nas_search(space, proxy, val_set, train_config(cfg, "nas_epochs"), cfg["nas_top_k"], ref,
                        cfg["seed"], cfg["workers"])
    csv_path = write_text(out / "nas.csv", result.to_csv())
    finish_run(out, cfg, [csv_path])
    rho = "undefined" if result.spearman is None else f"{result.spearman:.4f}"
    print(f"{len(space)} architectures, {len(result.failures)} failed; top-{len(result.top_k)} spearman {rho}")
    return 0


def cmd_inspect(path: str) -> int:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"file not found: {p}")
    try:
        hdr = dataio.read_condensed_header(p.read_bytes())
    except FormatError as exc:
        raise ConfigError(f"{p}: {exc}") from None
    for key in ("version", "classes", "ipc", "channels", "height", "width"):
        print(f"{key}: {hdr[key]}")
    print(f"mean: {' '.join(f'{v:.6g}' for v in hdr['mean'])}")
    print(f"std: {' '.join(f'{v:.6g}' for v in hdr['std'])}")
    print(f"provenance: {hdr['provenance']}")
    return 0


# -- entry point ----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="flat key = value config file")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    common.add_argument("--workers", type=int, default=argparse.SUPPRESS)
    common.add_argument("--out", default=argparse.SUPPRESS, help="output directory")
    common.add_argument("--set", action="append", default=argparse.SUPPRESS, metavar="KEY=VALUE",
                        help="override one config key (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)

    parser = argparse.ArgumentParser(prog="dcgm", parents=[common],
                                     description="Dataset condensation by gradient matching.")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("condense", parents=[common], help="learn a condensed set")
    p = sub.add_parser("eval", parents=[common], help="train fresh models on a .dcgm set")
    p.add_argument("trainset")
    p = sub.add_parser("coreset", parents=[common], help="select and evaluate a coreset baseline")
    p.add_argument("method", help=", ".join(coresets.METHODS))
    p = sub.add_parser("nas", parents=[common], help="rank a ConvNet grid with a proxy set")
    p.add_argument("--grid", default=None, help="axis overrides, e.g. 'W=32,64;D=1,2'")
    p = sub.add_parser("inspect", parents=[common], help="print a .dcgm header")
    p.add_argument("path")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        if args.command == "inspect":
            return cmd_inspect(args.path)
        overrides: dict[str, str] = {}
        for item in getattr(args, "set", []) or []:
            key, sep, val = item.partition("=")
            if not sep:
                raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
            overrides[key.strip()] = val.strip()
        for key in ("seed", "workers", "out"):
            if hasattr(args, key):
                overrides[key] = str(getattr(args, key))
        cfg = resolve_config(getattr(args, "config", None), overrides)
        out = Path(cfg["out"])
        out.mkdir(parents=True, exist_ok=True)
        if args.command == "condense":
            return cmd_condense(cfg, out)
        if args.command == "eval":
            return cmd_eval(cfg, out, args.trainset)
        if args.command == "coreset":
            return cmd_coreset(cfg, out, args.method)
        return cmd_nas(cfg, out, args.grid)
    except ConfigError as exc:
        print(f"dcgm: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - reported with exit code 1
        print(f"dcgm: failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
