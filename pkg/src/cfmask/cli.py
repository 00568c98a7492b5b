"""Command-line interface: ``cfmask {train,sweep,generate,heatmap,gradcheck}``.

Every option can also come from a JSON file given with ``--config``; flags on
the command line override file values.  Commands that write a directory also
write the fully resolved configuration there as ``config.json``, which can be
passed back with ``--config`` to rerun the same job.

Exit codes: 0 success, 1 runtime failure, 2 invalid arguments.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
from pathlib import Path

from . import gradcheck
from .datasets import (MADELON_PRESET, Dataset, DatasetError, load_csv, load_idx, make_madelon_like,
                       normalize, save_synthetic, split)
from .masks import read_mask_csv, write_mask_csv, write_pgm
from .model import DEFAULT_GAMMA_GRID, METHODS, TrainingConfig, fit_method
from .selection import CLASSIFIERS, DEFAULT_RHOS, DEFAULT_SEEDS, evaluate_sweep

log = logging.getLogger("cfmask")

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    """Bad arguments or configuration: exit code 2."""


# -- defaults per command -------------------------------------------------

_DATA_DEFAULTS = {
    "dataset": None,
    "idx_images": None,
    "idx_labels": None,
    "label_column": -1,
    "has_header": False,
    "normalize": "minmax",
}

_TRAIN_DEFAULTS = {
    "gamma": 1.0,
    "gamma_grid": list(DEFAULT_GAMMA_GRID),
    "lam": 0.0,
    "epochs": 100,
    "batch_size": 64,
    "learning_rate": 1e-3,
    "hidden": None,
    "validation_fraction": 0.1,
    "workers": os.cpu_count() or 1,
}

DEFAULTS = {
    "train": {**_DATA_DEFAULTS, **_TRAIN_DEFAULTS, "method": "cfm", "seed": 0, "out": None, "heatmap": None},
    "sweep": {**_DATA_DEFAULTS, **_TRAIN_DEFAULTS, "gamma": None, "test_dataset": None, "test_fraction": 0.2,
              "split_seed": 0, "methods": ["cfm", "fm"], "seeds": list(DEFAULT_SEEDS),
              "rhos": list(DEFAULT_RHOS), "classifiers": ["knn"], "knn_k": 5, "n_trees": 100, "out": None},
    # the madelon preset (D=500, 5/15/480) is also the default shape
    "generate": {"preset": "madelon", **MADELON_PRESET, "class_sep": 2.0,
                 "noise_std": 0.1, "n_classes": 2, "seed": 0, "out": None},
    "heatmap": {"mask": None, "height": None, "width": None, "column": "m", "out": None},
    "gradcheck": {"seed": 0, "n_features": 20, "n_classes": 3, "batch": 4, "tolerance": gradcheck.TOLERANCE},
}


# -- argument parsing ---------------------------------------------------------

def _csv_list(cast):
    def parse(text):
        try:
            return [cast(t) for t in text.split(",") if t.strip()]
        except ValueError:
            raise argparse.ArgumentTypeError(f"invalid list {text!r}") from None
    return parse


def _gamma(text):
    if text.lower() in ("grid", "none", "search"):
        return None
    return float(text)


def _hw(text):
    try:
        h, w = (int(t) for t in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HEIGHTxWIDTH, got {text!r}") from None
    return [h, w]


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _add_data_args(p):
    p.add_argument("--dataset", help="CSV file with one label column")
    p.add_argument("--idx-images", help="IDX image file (MNIST layout, optionally .gz)")
    p.add_argument("--idx-labels", help="IDX label file matching --idx-images")
    p.add_argument("--label-column", type=int, help="label column index in the CSV (default: last)")
    p.add_argument("--has-header", action="store_true", default=argparse.SUPPRESS)
    p.add_argument("--normalize", choices=("minmax", "zscore", "none"))


def _add_train_args(p):
    p.add_argument("--gamma", type=_gamma, help="complementary-loss weight, or 'grid' to search")
    p.add_argument("--gamma-grid", type=_csv_list(float))
    p.add_argument("--lam", type=float, help="l1 weight on the mask vector (dfs-cfm only)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--hidden", type=int, help="mask-net hidden width (default: number of features)")
    p.add_argument("--validation-fraction", type=float)
    p.add_argument("--workers", type=int, help="process pool size for independent trainings")


def build_parser():
    parser = _Parser(prog="cfmask", description=__doc__.splitlines()[0],
                     argument_default=argparse.SUPPRESS)
    parser.add_argument("-v", "--verbose", action="store_true", default=False)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train one selector and export its mask", argument_default=argparse.SUPPRESS)
    p.add_argument("--config", help="JSON file of option values")
    _add_data_args(p)
    _add_train_args(p)
    p.add_argument("--method", choices=METHODS)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory")
    p.add_argument("--heatmap", type=_hw, help="also write heatmap.pgm with shape HEIGHTxWIDTH")

    p = sub.add_parser("sweep", help="accuracy over methods, selection sizes, classifiers and seeds",
                       argument_default=argparse.SUPPRESS)
    p.add_argument("--config", help="JSON file of option values")
    _add_data_args(p)
    _add_train_args(p)
    p.add_argument("--test-dataset", help="held-out CSV; otherwise --test-fraction of --dataset is held out")
    p.add_argument("--test-fraction", type=float)
    p.add_argument("--split-seed", type=int)
    p.add_argument("--methods", type=_csv_list(str))
    p.add_argument("--seeds", type=_csv_list(int))
    p.add_argument("--rhos", type=_csv_list(float))
    p.add_argument("--classifiers", type=_csv_list(str))
    p.add_argument("--knn-k", type=int)
    p.add_argument("--n-trees", type=int)
    p.add_argument("--out", help="output directory")

    p = sub.add_parser("generate", help="write a synthetic dataset with a known feature partition",
                       argument_default=argparse.SUPPRESS)
    p.add_argument("--config", help="JSON file of option values")
    p.add_argument("--preset", choices=("madelon",))
    p.add_argument("--n-samples", type=int)
    p.add_argument("--n-informative", type=int)
    p.add_argument("--n-redundant", type=int)
    p.add_argument("--n-distractor", type=int)
    p.add_argument("--class-sep", type=float)
    p.add_argument("--noise-std", type=float)
    p.add_argument("--n-classes", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory")

    p = sub.add_parser("heatmap", help="render a mask CSV as a binary PGM", argument_default=argparse.SUPPRESS)
    p.add_argument("--config", help="JSON file of option values")
    p.add_argument("--mask", help="mask CSV written by 'train'")
    p.add_argument("--height", type=int)
    p.add_argument("--width", type=int)
    p.add_argument("--column", choices=("m", "m_comp"))
    p.add_argument("--out", help="output .pgm path")

    p = sub.add_parser("gradcheck", help="finite-difference check of every backward pass",
                       argument_default=argparse.SUPPRESS)
    p.add_argument("--config", help="JSON file of option values")
    p.add_argument("--seed", type=int)
    p.add_argument("--n-features", type=int)
    p.add_argument("--n-classes", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--tolerance", type=float)
    return parser


def resolve_config(command, flags: dict):
    """Defaults, then the ``--config`` file, then explicit flags."""
    cfg = dict(DEFAULTS[command])
    path = flags.pop("config", None)
    if path is not None:
        try:
            with open(path) as f:
                from_file = json.load(f)
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {path}: {exc}") from None
        if not isinstance(from_file, dict):
            raise UsageError(f"config {path} must hold a JSON object")
        unknown = sorted(set(from_file) - set(cfg))
        if unknown:
            raise UsageError(f"unknown config keys for '{command}': {', '.join(unknown)}")
        cfg.update(from_file)
    cfg.update(flags)
    return cfg


def _require(cfg, *keys):
    missing = [k for k in keys if cfg.get(k) is None]
    if missing:
        raise UsageError("missing required option(s): " + ", ".join("--" + k.replace("_", "-") for k in missing))


def _write_config(out_dir: Path, command, cfg):
    with open(out_dir / "config.json", "w") as f:
        json.dump(cfg, f, indent=2, sort_keys=True)
        f.write("\n")


class _Outputs:
    """Tracks files written by a command so a failure can remove them."""

    def __init__(self, out_dir):
        self.dir = Path(out_dir)
        self.created_dir = not self.dir.exists()
        self.files = []

    def __enter__(self):
        self.dir.mkdir(parents=True, exist_ok=True)
        return self

    def path(self, name):
        p = self.dir / name
        self.files.append(p)
        return p

    def __exit__(self, exc_type, exc, tb):
        if exc_type is None:
            return False
        if self.created_dir:
            shutil.rmtree(self.dir, ignore_errors=True)
        else:
            for p in self.files:
                p.unlink(missing_ok=True)
        return False


# -- data loading -------------------------------------------------------------

def _load_dataset(cfg, key="dataset") -> Dataset:
    if key == "dataset" and (cfg.get("idx_images") or cfg.get("idx_labels")):
        if not (cfg.get("idx_images") and cfg.get("idx_labels")):
            raise UsageError("--idx-images and --idx-labels must be given together")
        for k in ("idx_images", "idx_labels"):
            if not Path(cfg[k]).is_file():
                raise FileNotFoundError(f"no such file: {cfg[k]}")
        return load_idx(cfg["idx_images"], cfg["idx_labels"])
    path = cfg.get(key)
    if path is None:
        raise UsageError(f"missing required option --{key.replace('_', '-')} (or --idx-images/--idx-labels)")
    if not Path(path).is_file():
        raise FileNotFoundError(f"no such file: {path}")
    return load_csv(path, label_column=cfg["label_column"], has_header=cfg["has_header"])


def _training_config(cfg, seed):
    return TrainingConfig(
        gamma=cfg["gamma"], lam=cfg["lam"], epochs=cfg["epochs"], batch_size=cfg["batch_size"],
        learning_rate=cfg["learning_rate"], seed=seed, gamma_grid=tuple(cfg["gamma_grid"]),
        validation_fraction=cfg["validation_fraction"], hidden=cfg["hidden"],
    )


# -- commands -----------------------------------------------------------------

def cmd_train(cfg):
    _require(cfg, "out")
    try:
        tcfg = _training_config(cfg, cfg["seed"])
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    data = _load_dataset(cfg)
    data, norm = normalize(data, cfg["normalize"])
    shape = cfg["heatmap"]
    if shape is not None and shape[0] * shape[1] != data.n_features:
        raise UsageError(f"--heatmap {shape[0]}x{shape[1]} does not match {data.n_features} features")

    with _Outputs(cfg["out"]) as out:
        _write_config(out.dir, "train", cfg)
        out.files.append(out.dir / "config.json")
        fit = fit_method(cfg["method"], data, tcfg, workers=cfg["workers"])
        fit.model.save(out.path("checkpoint.json"))
        report = fit.report.to_dict()
        report["method"] = cfg["method"]
        report["gamma"] = fit.gamma
        report["gamma_search"] = None if fit.search is None else {
            "best_gamma": fit.search.best_gamma,
            "validation_accuracy": {repr(g): a for g, a in fit.search.accuracies.items()},
        }
        report["normalizer"] = {"scheme": norm.scheme, "shift": norm.shift.tolist(), "scale": norm.scale.tolist()}
        with open(out.path("report.json"), "w") as f:
            json.dump(report, f, indent=2)
            f.write("\n")
        write_mask_csv(out.path("mask.csv"), fit.masks)
        if shape is not None:
            write_pgm(out.path("heatmap.pgm"), fit.masks.m, shape[0], shape[1])
    print(f"{cfg['method']}: gamma={fit.gamma} train accuracy={fit.model.accuracy(data.X, data.y):.4f} -> {cfg['out']}")
    return EXIT_OK


def cmd_sweep(cfg):
    _require(cfg, "out")
    for key in ("methods", "seeds", "rhos", "classifiers"):
        if not cfg[key]:
            raise UsageError(f"--{key} needs at least one value")
    bad = [m for m in cfg["methods"] if m not in METHODS + ("random",)]
    bad += [c for c in cfg["classifiers"] if c not in CLASSIFIERS]
    if bad:
        raise UsageError(f"unknown method/classifier: {', '.join(bad)}")
    if any(not 0 < r <= 1 for r in cfg["rhos"]):
        raise UsageError("--rhos values must lie in (0, 1]")
    try:
        tcfg = _training_config(cfg, 0)
    except ValueError as exc:
        raise UsageError(str(exc)) from None

    data = _load_dataset(cfg)
    if cfg["test_dataset"] is not None:
        train_set, test_set = data, _load_dataset(cfg, "test_dataset")
    else:
        f = cfg["test_fraction"]
        if not 0 < f < 1:
            raise UsageError("--test-fraction must lie in (0, 1)")
        parts = split(data, (1 - f, f), cfg["split_seed"])
        train_set, test_set = data.subset(parts.train), data.subset(parts.test)
    train_set, norm = normalize(train_set, cfg["normalize"])
    test_set = norm.apply(test_set)

    with _Outputs(cfg["out"]) as out:
        _write_config(out.dir, "sweep", cfg)
        out.files.append(out.dir / "config.json")
        report = evaluate_sweep(cfg["methods"], train_set, test_set, rhos=cfg["rhos"],
                                classifiers=cfg["classifiers"], seeds=cfg["seeds"], config=tcfg,
                                workers=cfg["workers"], knn_k=cfg["knn_k"], n_trees=cfg["n_trees"])
        report.to_csv(out.path("eval.csv"))
        report.to_json(out.path("summary.json"))
    for (m, c, rho), cell in report.summary().items():
        print(f"{m:8s} {c:4s} rho={rho:<6g} k={cell['k']:<4d} mean accuracy={cell['mean']:.4f}")
    if report.failures:
        print(f"{len(report.failures)} cell(s) failed; see summary.json", file=sys.stderr)
        return EXIT_FAILURE
    return EXIT_OK


def cmd_generate(cfg):
    _require(cfg, "out")
    params = {k: cfg[k] for k in ("n_samples", "n_informative", "n_redundant", "n_distractor",
                                  "class_sep", "noise_std", "n_classes", "seed")}
    try:
        data = make_madelon_like(**params)
    except DatasetError as exc:
        raise UsageError(str(exc)) from None
    with _Outputs(cfg["out"]) as out:
        _write_config(out.dir, "generate", cfg)
        out.files.append(out.dir / "config.json")
        save_synthetic(data, out.path("data.csv"), out.path("ground_truth.json"))
    print(f"wrote {data.n_samples} x {data.n_features} dataset to {cfg['out']}")
    return EXIT_OK


def cmd_heatmap(cfg):
    _require(cfg, "mask", "height", "width", "out")
    if not Path(cfg["mask"]).is_file():
        raise FileNotFoundError(f"no such file: {cfg['mask']}")
    m, mc = read_mask_csv(cfg["mask"])
    values = m if cfg["column"] == "m" else mc
    h, w = cfg["height"], cfg["width"]
    if h * w != values.size:
        raise UsageError(f"{h}x{w} = {h * w} pixels but the mask has {values.size} entries")
    out = Path(cfg["out"])
    try:
        write_pgm(out, values, h, w)
    except BaseException:
        out.unlink(missing_ok=True)
        raise
    print(f"wrote {h}x{w} heatmap to {out}")
    return EXIT_OK


def cmd_gradcheck(cfg):
    results = gradcheck.run_suite(seed=cfg["seed"], tolerance=cfg["tolerance"], n_features=cfg["n_features"],
                                  n_classes=cfg["n_classes"], batch=cfg["batch"])
    ok = True
    for name, res, seconds in results:
        status = "ok" if res.passed else "FAIL"
        ok &= res.passed
        print(f"{status:4s} {name:40s} max rel error {res.max_rel_error:.3e} "
              f"({res.n_checked} entries, {seconds:.1f}s)")
    worst = max(r.max_rel_error for _, r, _ in results)
    print(f"max relative error {worst:.3e} (tolerance {cfg['tolerance']:g})")
    return EXIT_OK if ok else EXIT_FAILURE


COMMANDS = {"train": cmd_train, "sweep": cmd_sweep, "generate": cmd_generate,
            "heatmap": cmd_heatmap, "gradcheck": cmd_gradcheck}


def main(argv=None):
    parser = build_parser()
    try:
        ns = vars(parser.parse_args(argv))
        verbose = ns.pop("verbose", False)
        command = ns.pop("command")
        cfg = resolve_config(command, ns)
    except UsageError as exc:
        print(f"cfmask: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[command](cfg)
    except UsageError as exc:
        print(f"cfmask {command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:
        log.debug("failure", exc_info=True)
        print(f"cfmask {command}: error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
