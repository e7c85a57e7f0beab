"""Command-line driver: ``lapkernel {kernel,regress,sweep,verify,features}``.

Settings come from built-in defaults, then an optional YAML file
(``--config``), then command-line flags; flags win.  Every report starts with
the fully resolved configuration as ``config.<key>=<value>`` lines.
"""
from __future__ import annotations

import argparse
import copy
import logging
import os
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import yaml

from .assembly import AssemblyInterrupted, KernelAssembler
from .data_io import (LabeledDataset, build_patch_bank, downsample, featurize_dataset, load_cifar10,
                      load_fashion_mnist, read_dataset_ckim, standardize, synthetic_dataset,
                      write_dataset_ckim)
from .dp import Family, KernelConfig
from .readout import Readout
from .regression import (DEFAULT_RIDGE, KernelMatrix, krr_fit, krr_predict, normalize_kernel,
                         read_kernel_matrix, write_kernel_matrix)
from .tensor_core import Padding

log = logging.getLogger("lapkernel")

THREADS_ENV = "LAPKERNEL_THREADS"

DEFAULTS = {
    "dataset": {"name": "synthetic", "path": None, "n_train": 40, "n_test": 20, "seed": 0,
                "downsample": 1, "standardize": True, "shape": [8, 8, 3], "classes": 2},
    "kernel": {"depth": 3, "filter_size": 3, "bias": 0.0, "padding": "zero", "family": "cntk",
               "precision": "f64"},
    "readout": "fc",
    "augmentation": "none",
    "ridge": DEFAULT_RIDGE,
    "output": "lapkernel-out",
    "threads": None,
    "tile": 64,
    "sweep": {"c_values": [0, 1, 2, 4], "depths": [1, 2, 3]},
    "features": {"patches": 2048, "patch_size": 5, "eps": 1e-5, "flip_closed": True, "gamma_feature": 1.0},
}


class ConfigError(ValueError):
    pass


def _merge(base: dict, update: dict, prefix: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in (update or {}).items():
        if key not in out:
            raise ConfigError(f"unknown config key {prefix + key!r}")
        if isinstance(out[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {prefix + key!r} expects a section")
            out[key] = _merge(out[key], value, prefix + key + ".")
        else:
            out[key] = value
    return out


def _flatten(d: dict, prefix: str = ""):
    for key, value in d.items():
        if isinstance(value, dict):
            yield from _flatten(value, prefix + key + ".")
        else:
            yield prefix + key, value


def _set_dotted(d: dict, dotted: str, value) -> None:
    *path, leaf = dotted.split(".")
    for p in path:
        d = d.setdefault(p, {})
    d[leaf] = value


@dataclass
class RunConfig:
    """Resolved settings of one invocation."""
    subcommand: str
    values: dict

    def __getitem__(self, key):
        return self.values[key]

    @property
    def threads(self) -> int:
        t = self.values["threads"]
        if t is None:
            t = os.environ.get(THREADS_ENV, 1)
        return max(1, int(t))

    def kernel_config(self) -> KernelConfig:
        k = self.values["kernel"]
        return KernelConfig(depth=int(k["depth"]), filter_size=int(k["filter_size"]), bias=float(k["bias"]),
                            padding=Padding.parse(k["padding"]), family=Family.parse(k["family"]),
                            precision=k["precision"])

    def readout(self) -> Readout:
        return Readout.parse(str(self.values["readout"]), self.values["kernel"]["padding"])

    def echo(self) -> list[str]:
        lines = [f"config.subcommand={self.subcommand}"]
        for key, value in _flatten(self.values):
            if key == "threads":
                value = self.threads
            lines.append(f"config.{key}={value}")
        return lines

    def validate(self) -> None:
        ds = self.values["dataset"]
        if ds["name"] not in ("synthetic", "cifar10", "fashion_mnist", "ckim"):
            raise ConfigError(f"unknown dataset {ds['name']!r}")
        if ds["name"] != "synthetic" and not ds["path"]:
            raise ConfigError(f"dataset {ds['name']} needs dataset.path")
        for key in ("n_train", "n_test"):
            if ds[key] is not None and int(ds[key]) < 0:
                raise ConfigError(f"dataset.{key} must be non-negative")
        if self.values["augmentation"] not in ("none", "flip", "translation"):
            raise ConfigError("augmentation must be none, flip or translation")
        if float(self.values["ridge"]) < 0:
            raise ConfigError("ridge must be non-negative")
        self.kernel_config()
        self.readout()
        if self.values["augmentation"] == "translation":
            if Padding.parse(self.values["kernel"]["padding"]) is not Padding.CIRCULAR:
                raise ConfigError("translation augmentation needs circular padding")
            if self.readout().kind != "fc":
                raise ConfigError("translation augmentation is computed through the GAP identity; use readout fc")


def resolve_config(subcommand: str, config_path=None, overrides: dict | None = None) -> RunConfig:
    values = copy.deepcopy(DEFAULTS)
    if config_path:
        with open(config_path) as fh:
            loaded = yaml.safe_load(fh) or {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"{config_path}: top level must be a mapping")
        values = _merge(values, loaded)
    flat = {}
    for dotted, value in (overrides or {}).items():
        if value is not None:
            _set_dotted(flat, dotted, value)
    values = _merge(values, flat)
    cfg = RunConfig(subcommand, values)
    cfg.validate()
    return cfg


# --- data -------------------------------------------------------------------

def _subsample(ds: LabeledDataset, n, seed: int, name: str) -> LabeledDataset:
    if n is None or int(n) == len(ds):
        return ds
    n = int(n)
    if n > len(ds):
        raise ConfigError(f"requested {n} {name} examples but only {len(ds)} are available")
    idx = np.sort(np.random.default_rng(seed).choice(len(ds), n, replace=False))
    return ds.subset(idx, f"subsample{n}")


def load_data(cfg: RunConfig) -> tuple[LabeledDataset, LabeledDataset]:
    ds = cfg["dataset"]
    name, seed = ds["name"], int(ds["seed"])
    if name == "synthetic":
        shape, classes = tuple(ds["shape"]), int(ds["classes"])
        n_tr, n_te = int(ds["n_train"]), int(ds["n_test"])
        full = synthetic_dataset(n_tr + n_te, shape, classes, seed)
        train, test = full.subset(np.arange(n_tr)), full.subset(np.arange(n_tr, n_tr + n_te))
    else:
        if name == "cifar10":
            train, test = load_cifar10(ds["path"])
        elif name == "fashion_mnist":
            train, test = load_fashion_mnist(ds["path"])
        else:
            train = read_dataset_ckim(Path(ds["path"]) / "train")
            test = read_dataset_ckim(Path(ds["path"]) / "test", train.class_count)
        train = _subsample(train, ds["n_train"], seed, "train")
        test = _subsample(test, ds["n_test"], seed + 1, "test")
    factor = int(ds["downsample"])
    train, test = downsample(train, factor), downsample(test, factor)
    if ds["standardize"] and name != "ckim":
        train, test = standardize(train, test)
    return train, test


# --- kernels ---------------------------------------------------------------

def _progress_logging(verbose: bool) -> None:
    logging.basicConfig(stream=sys.stderr, level=logging.INFO if verbose else logging.WARNING,
                        format="%(message)s")


def compute_blocks(cfg: RunConfig, train, test, readouts, depths=None, workdir=None, stop_after=None):
    kcfg = cfg.kernel_config()
    if depths:
        kcfg = kcfg.with_(depth=max(depths))
    flip = cfg["augmentation"] == "flip"
    asm = KernelAssembler(kcfg, readouts, depths, flip=flip, tile=int(cfg["tile"]),
                          threads=cfg.threads, workdir=workdir)
    return asm.run(train.images, test.images if len(test) else None, stop_after=stop_after)


def regression_inputs(blocks, k: int, augmentation: str):
    """Normalised train and cross matrices, flip-averaged when requested."""
    tr_self = blocks.train_self[k]
    K = normalize_kernel(blocks.train[k], tr_self)
    cross = None if blocks.cross is None else normalize_kernel(blocks.cross[k], blocks.test_self[k], tr_self)
    if augmentation != "flip":
        np.fill_diagonal(K, 1.0)
    else:
        K = 0.5 * (K + normalize_kernel(blocks.train_flip[k], tr_self))
        if cross is not None:
            cross = 0.5 * (cross + normalize_kernel(blocks.cross_flip[k], blocks.test_self[k], tr_self))
    return K, cross


def effective_readout(cfg: RunConfig) -> Readout:
    # translation-augmented FC is PQ times GAP; the constant drops out after normalisation
    return Readout.gap() if cfg["augmentation"] == "translation" else cfg.readout()


def path_name(cfg: RunConfig | str) -> str:
    augmentation = cfg if isinstance(cfg, str) else cfg["augmentation"]
    return {"none": "plain-kernel", "flip": "flip-augmented-kernel",
            "translation": "translation-augmented-kernel(gap-identity)"}[augmentation]


def cmd_kernel(cfg: RunConfig, out=None, stop_after: int | None = None) -> int:
    out = out or sys.stdout
    train, test = load_data(cfg)
    outdir = Path(cfg["output"])
    outdir.mkdir(parents=True, exist_ok=True)
    try:
        blocks = compute_blocks(cfg, train, test, [effective_readout(cfg)], workdir=outdir / "work",
                                stop_after=stop_after)
    except AssemblyInterrupted as exc:
        print(f"interrupted: {exc}", file=sys.stderr)
        return 3
    K, cross = regression_inputs(blocks, 0, cfg["augmentation"])
    write_kernel_matrix(outdir / "train.ck4m", KernelMatrix(K, train.labels, train.class_count))
    extra = {}
    if cross is not None:
        extra.update(cross=cross, test_self=blocks.test_self[0], test_labels=test.labels)
    np.savez(outdir / "cross.npz", train_self=blocks.train_self[0], class_count=train.class_count,
             config=np.array(cfg.echo()), **extra)
    for line in cfg.echo():
        print(line, file=out)
    print(f"path={path_name(cfg)}", file=out)
    print(f"n_train={len(train)}", file=out)
    print(f"n_test={len(test)}", file=out)
    print(f"train_matrix={outdir / 'train.ck4m'}", file=out)
    print(f"cross_matrix={outdir / 'cross.npz'}", file=out)
    return 0


def accuracy_report(pred, labels, class_count: int) -> dict:
    report = {"accuracy": float(np.mean(pred == labels)) if len(labels) else float("nan")}
    for c in range(class_count):
        mask = labels == c
        report[f"accuracy.class{c}"] = float(np.mean(pred[mask] == c)) if mask.any() else float("nan")
    return report


def cmd_regress(cfg: RunConfig, out=None, kernel_dir=None) -> int:
    out = out or sys.stdout
    if kernel_dir:
        kdir = Path(kernel_dir)
        for name in ("train.ck4m", "cross.npz"):
            if not (kdir / name).exists():
                print(f"error: missing input {kdir / name}", file=sys.stderr)
                return 2
        with np.load(kdir / "cross.npz") as z:
            if "cross" not in z:
                print(f"error: {kdir / 'cross.npz'} holds no test block", file=sys.stderr)
                return 2
            cross, test_labels = z["cross"], z["test_labels"]
            class_count = int(z["class_count"])
            source_config = [str(line) for line in z["config"]] if "config" in z else []
        Kfile = read_kernel_matrix(kdir / "train.ck4m", class_count)
        K, train_labels = Kfile.values, Kfile.labels
    else:
        train, test = load_data(cfg)
        blocks = compute_blocks(cfg, train, test, [effective_readout(cfg)])
        K, cross = regression_inputs(blocks, 0, cfg["augmentation"])
        train_labels, test_labels, class_count = train.labels, test.labels, train.class_count
        source_config = []
    ridge = float(cfg["ridge"])
    model = krr_fit(K, ridge, labels=train_labels, class_count=class_count)
    _, pred = krr_predict(model, cross)
    report = accuracy_report(pred, np.asarray(test_labels), class_count)
    for line in cfg.echo():
        print(line, file=out)
    for line in source_config:
        print("kernel_" + line, file=out)
    augmentation = cfg["augmentation"]
    if kernel_dir:
        print(f"kernel_dir={kernel_dir}", file=out)
        for line in source_config:
            if line.startswith("config.augmentation="):
                augmentation = line.partition("=")[2]
    print(f"path={path_name(augmentation)}", file=out)
    print(f"n_train={len(train_labels)}", file=out)
    print(f"n_test={len(test_labels)}", file=out)
    print(f"solve_residual={model.residual:.3e}", file=out)
    for key, value in report.items():
        print(f"{key}={value:.6f}", file=out)
    print("", file=out)
    print(f"{'class':>6} {'count':>6} {'accuracy':>9}", file=out)
    for c in range(class_count):
        print(f"{c:>6} {int(np.sum(test_labels == c)):>6} {report[f'accuracy.class{c}']:>9.4f}", file=out)
    print(f"{'all':>6} {len(test_labels):>6} {report['accuracy']:>9.4f}", file=out)
    return 0


def sweep_table(blocks, train, test, c_values, depths, ridge: float, augmentation: str):
    """Accuracy keyed by ``(c, depth)`` from one set of shared pair tensors."""
    acc = {}
    for k, (depth, r) in enumerate(blocks.combos):
        K, cross = regression_inputs(blocks, k, augmentation)
        model = krr_fit(K, ridge, labels=train.labels, class_count=train.class_count)
        _, pred = krr_predict(model, cross)
        acc[(r.c, depth)] = float(np.mean(pred == test.labels))
    return acc


def cmd_sweep(cfg: RunConfig, out=None) -> int:
    out = out or sys.stdout
    train, test = load_data(cfg)
    if not len(test):
        raise ConfigError("sweep needs a test set")
    c_values = [int(c) for c in cfg["sweep"]["c_values"]]
    depths = sorted(int(d) for d in cfg["sweep"]["depths"])
    padding = cfg["kernel"]["padding"]
    readouts = [Readout.lap(c, padding) for c in c_values]
    t0 = time.perf_counter()
    blocks = compute_blocks(cfg, train, test, readouts, depths)
    elapsed = time.perf_counter() - t0
    acc = sweep_table(blocks, train, test, c_values, depths, float(cfg["ridge"]), cfg["augmentation"])
    for line in cfg.echo():
        print(line, file=out)
    print(f"path={path_name(cfg)}", file=out)
    print(f"kernel_seconds={elapsed:.3f}", file=out)
    for (c, d), a in sorted(acc.items()):
        print(f"accuracy.c{c}.depth{d}={a:.6f}", file=out)
    print("", file=out)
    print("c \\ depth " + "".join(f"{d:>9}" for d in depths), file=out)
    for c in c_values:
        print(f"{c:>9} " + "".join(f"{100 * acc[(c, d)]:>8.2f}%" for d in depths), file=out)
    return 0


def cmd_verify(cfg: RunConfig, scale: str = "quick", only=None, mutate=None, out=None) -> int:
    out = out or sys.stdout
    from .verify import run_suite, suite_passed

    results = run_suite(scale, only=only, threads=cfg.threads, mutate=mutate,
                        echo=lambda line: print(line, file=out, flush=True))
    ok = suite_passed(results)
    print(f"suite={'pass' if ok else 'fail'}", file=out)
    return 0 if ok else 1


def cmd_features(cfg: RunConfig, out=None) -> int:
    out = out or sys.stdout
    train, test = load_data(cfg)
    f = cfg["features"]
    bank = build_patch_bank(train.images, int(f["patches"]), int(f["patch_size"]), int(cfg["dataset"]["seed"]),
                            float(f["eps"]), bool(f["flip_closed"]), float(f["gamma_feature"]))
    outdir = Path(cfg["output"])
    outdir.mkdir(parents=True, exist_ok=True)
    ftrain, ftest = featurize_dataset(train, bank), featurize_dataset(test, bank)
    write_dataset_ckim(outdir / "train", ftrain)
    write_dataset_ckim(outdir / "test", ftest)
    np.savez(outdir / "bank.npz", filters=bank.filters, zca=bank.zca)
    for line in cfg.echo():
        print(line, file=out)
    print(f"filters={bank.size}", file=out)
    print(f"feature_shape={'x'.join(map(str, ftrain.images.shape[1:]))}", file=out)
    print(f"output={outdir}", file=out)
    return 0


# --- argument parsing ------------------------------------------------------

def _csv_ints(text: str) -> list[int]:
    return [int(t) for t in text.split(",") if t.strip()]


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lapkernel", description="CNN-GP / CNTK kernels with LAP readouts.")
    p.add_argument("--config", help="YAML config file; flags override it")
    p.add_argument("-v", "--verbose", action="store_true", help="progress lines on stderr")
    sub = p.add_subparsers(dest="subcommand", required=True)

    def common(sp):
        g = sp.add_argument_group("data")
        g.add_argument("--dataset", dest="dataset.name", choices=["synthetic", "cifar10", "fashion_mnist", "ckim"])
        g.add_argument("--data-path", dest="dataset.path")
        g.add_argument("--n-train", dest="dataset.n_train", type=int)
        g.add_argument("--n-test", dest="dataset.n_test", type=int)
        g.add_argument("--seed", dest="dataset.seed", type=int)
        g.add_argument("--downsample", dest="dataset.downsample", type=int)
        g = sp.add_argument_group("kernel")
        g.add_argument("--depth", dest="kernel.depth", type=int)
        g.add_argument("--filter-size", dest="kernel.filter_size", type=int)
        g.add_argument("--bias", dest="kernel.bias", type=float)
        g.add_argument("--padding", dest="kernel.padding", choices=["zero", "circular"])
        g.add_argument("--family", dest="kernel.family", choices=["cnngp", "cntk"])
        g.add_argument("--precision", dest="kernel.precision", choices=["f32", "f64"])
        g.add_argument("--readout", dest="readout", help="fc, gap or lap:<c>")
        g.add_argument("--augmentation", dest="augmentation", choices=["none", "flip", "translation"])
        g.add_argument("--ridge", dest="ridge", type=float)
        sp.add_argument("--output", dest="output")
        sp.add_argument("--threads", dest="threads", type=int, help=f"worker threads (default ${THREADS_ENV} or 1)")
        sp.add_argument("--tile", dest="tile", type=int)

    sp = sub.add_parser("kernel", help="compute and store train and cross kernel blocks")
    common(sp)
    sp.add_argument("--stop-after", dest="_stop_after", type=int, help="stop after this many new tiles")
    sp = sub.add_parser("regress", help="kernel ridge regression accuracy report")
    common(sp)
    sp.add_argument("--kernel-dir", dest="_kernel_dir", help="reuse train.ck4m and cross.npz from a kernel run")
    sp = sub.add_parser("sweep", help="accuracy table over LAP radius and depth")
    common(sp)
    sp.add_argument("--c-values", dest="sweep.c_values", type=_csv_ints)
    sp.add_argument("--depths", dest="sweep.depths", type=_csv_ints)
    sp = sub.add_parser("verify", help="run the acceptance suite")
    sp.add_argument("--scale", dest="_scale", choices=["quick", "full"], default="quick")
    sp.add_argument("--only", dest="_only", type=_csv_ints, help="comma-separated criterion numbers")
    sp.add_argument("--mutate", dest="_mutate", choices=["lap_weights"], help="mutation test hook")
    sp.add_argument("--threads", dest="threads", type=int)
    sp = sub.add_parser("features", help="random-patch features written as CKIM")
    common(sp)
    sp.add_argument("--patches", dest="features.patches", type=int)
    sp.add_argument("--patch-size", dest="features.patch_size", type=int)
    return p


def main(argv=None) -> int:
    args = vars(build_parser().parse_args(argv))
    sub = args.pop("subcommand")
    config_path = args.pop("config")
    _progress_logging(args.pop("verbose"))
    private = {k: args.pop(k) for k in list(args) if k.startswith("_")}
    try:
        cfg = resolve_config(sub, config_path, args)
        if sub == "kernel":
            return cmd_kernel(cfg, stop_after=private.get("_stop_after"))
        if sub == "regress":
            return cmd_regress(cfg, kernel_dir=private.get("_kernel_dir"))
        if sub == "sweep":
            return cmd_sweep(cfg)
        if sub == "verify":
            return cmd_verify(cfg, private["_scale"], private["_only"], private["_mutate"])
        return cmd_features(cfg)
    except (ConfigError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
