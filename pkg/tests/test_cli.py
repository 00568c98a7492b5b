import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from cfmask.cli import DEFAULTS, EXIT_FAILURE, EXIT_OK, EXIT_USAGE, main
from cfmask.datasets import make_madelon_like, save_csv
from cfmask.masks import MaskPair, read_mask_csv, write_mask_csv

FAST = ["--epochs", "3", "--batch-size", "16", "--workers", "1"]


@pytest.fixture(scope="module")
def small_csv(tmp_path_factory):
    path = tmp_path_factory.mktemp("data") / "small.csv"
    save_csv(make_madelon_like(120, 3, 2, 7, class_sep=3.0, seed=1), path)
    return path


def train(csv_path, out, *extra):
    return main(["train", "--dataset", str(csv_path), "--has-header", "--out", str(out), *FAST, *extra])


def test_train_writes_outputs_and_echoes_config(small_csv, tmp_path):
    out = tmp_path / "run"
    assert train(small_csv, out, "--gamma", "0.5") == EXIT_OK
    assert {p.name for p in out.iterdir()} == {"config.json", "checkpoint.json", "report.json", "mask.csv"}
    cfg = json.loads((out / "config.json").read_text())
    assert set(cfg) == set(DEFAULTS["train"])
    assert cfg["gamma"] == 0.5 and cfg["epochs"] == 3 and cfg["normalize"] == "minmax"
    report = json.loads((out / "report.json").read_text())
    assert report["method"] == "cfm" and report["gamma"] == 0.5
    m, mc = read_mask_csv(out / "mask.csv")
    assert m.size == 12 and abs(m.sum() - 1) < 1e-12 and abs(mc.sum() - 1) < 1e-12


def test_config_file_reproduces_run(small_csv, tmp_path):
    assert train(small_csv, tmp_path / "a", "--seed", "3") == EXIT_OK
    assert main(["train", "--config", str(tmp_path / "a" / "config.json"), "--out", str(tmp_path / "b")]) == EXIT_OK
    for name in ("mask.csv", "checkpoint.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    # wall-clock time is the only field allowed to differ
    ra, rb = (json.loads((tmp_path / d / "report.json").read_text()) for d in "ab")
    ra.pop("seconds"), rb.pop("seconds")
    assert ra == rb


def test_flags_override_config_file(small_csv, tmp_path):
    conf = tmp_path / "c.json"
    conf.write_text(json.dumps({"dataset": str(small_csv), "has_header": True, "epochs": 2, "gamma": 4.0}))
    assert main(["train", "--config", str(conf), "--gamma", "0.25", "--workers", "1",
                 "--out", str(tmp_path / "o")]) == EXIT_OK
    cfg = json.loads((tmp_path / "o" / "config.json").read_text())
    assert cfg["gamma"] == 0.25 and cfg["epochs"] == 2


def test_unknown_config_key_is_usage_error(tmp_path):
    conf = tmp_path / "c.json"
    conf.write_text('{"gama": 1}')
    assert main(["train", "--config", str(conf), "--out", str(tmp_path / "o")]) == EXIT_USAGE
    assert not (tmp_path / "o").exists()


def test_fm_equals_cfm_with_zero_gamma(small_csv, tmp_path):
    assert train(small_csv, tmp_path / "fm", "--method", "fm") == EXIT_OK
    assert train(small_csv, tmp_path / "cfm", "--method", "cfm", "--gamma", "0") == EXIT_OK
    assert (tmp_path / "fm" / "mask.csv").read_bytes() == (tmp_path / "cfm" / "mask.csv").read_bytes()


def test_gamma_grid_search_reported(small_csv, tmp_path):
    out = tmp_path / "g"
    assert train(small_csv, out, "--gamma", "grid", "--gamma-grid", "0.01,1") == EXIT_OK
    search = json.loads((out / "report.json").read_text())["gamma_search"]
    assert search["best_gamma"] in (0.01, 1.0)
    assert set(search["validation_accuracy"]) == {"0.01", "1.0"}


def test_dfs_variant_runs(small_csv, tmp_path):
    assert train(small_csv, tmp_path / "d", "--method", "dfs-cfm", "--lam", "0.01") == EXIT_OK


def test_missing_dataset_leaves_nothing(tmp_path):
    out = tmp_path / "never"
    assert train(tmp_path / "nope.csv", out) == EXIT_FAILURE
    assert not out.exists()


def test_usage_errors(small_csv, tmp_path, capsys):
    assert main(["train", "--bogus"]) == EXIT_USAGE
    assert main(["train", "--dataset", str(small_csv)]) == EXIT_USAGE  # no --out
    assert train(small_csv, tmp_path / "x", "--heatmap", "3x3") == EXIT_USAGE
    assert train(small_csv, tmp_path / "y", "--gamma", "-1") == EXIT_USAGE
    assert "error" in capsys.readouterr().err


def test_bad_csv_is_runtime_failure(tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("1,2,a\n1,x,b\n")
    assert main(["train", "--dataset", str(bad), "--out", str(tmp_path / "o"), *FAST]) == EXIT_FAILURE
    assert not (tmp_path / "o").exists()


def test_sweep_row_count(small_csv, tmp_path):
    out = tmp_path / "sw"
    code = main(["sweep", "--dataset", str(small_csv), "--has-header", "--out", str(out), *FAST,
                 "--gamma", "1", "--methods", "cfm,fm", "--rhos", "0.1,0.5,1", "--classifiers", "knn",
                 "--seeds", "0,1"])
    assert code == EXIT_OK
    with open(out / "eval.csv") as f:
        rows = list(csv.DictReader(f))
    assert len(rows) == 12
    assert {r["method"] for r in rows} == {"cfm", "fm"}
    assert all(0 <= float(r["accuracy"]) <= 1 for r in rows)
    summary = json.loads((out / "summary.json").read_text())
    assert summary["failures"] == []


def test_sweep_usage_errors(small_csv, tmp_path):
    base = ["sweep", "--dataset", str(small_csv), "--has-header", "--out", str(tmp_path / "s"), *FAST]
    assert main(base + ["--rhos", "0,0.5"]) == EXIT_USAGE
    assert main(base + ["--methods", "lasso"]) == EXIT_USAGE
    assert main(base + ["--test-fraction", "1.5"]) == EXIT_USAGE
    assert not (tmp_path / "s").exists()


def test_generate_preset_and_repeatability(tmp_path):
    assert main(["generate", "--seed", "5", "--n-samples", "40", "--out", str(tmp_path / "a")]) == EXIT_OK
    assert main(["generate", "--seed", "5", "--n-samples", "40", "--out", str(tmp_path / "b")]) == EXIT_OK
    for name in ("data.csv", "ground_truth.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    gt = json.loads((tmp_path / "a" / "ground_truth.json").read_text())["ground_truth"]
    assert [len(gt[k]) for k in ("informative", "redundant", "distractor")] == [5, 15, 480]
    header = (tmp_path / "a" / "data.csv").read_text().splitlines()[0].split(",")
    assert len(header) == 501


def test_generate_rejects_no_informative(tmp_path):
    assert main(["generate", "--n-informative", "0", "--out", str(tmp_path / "g")]) == EXIT_USAGE
    assert not (tmp_path / "g").exists()


def test_heatmap_shapes(tmp_path):
    mask = tmp_path / "mask.csv"
    write_mask_csv(mask, MaskPair.from_logits(np.random.default_rng(0).normal(size=784)))
    out = tmp_path / "h.pgm"
    assert main(["heatmap", "--mask", str(mask), "--height", "28", "--width", "28", "--out", str(out)]) == EXIT_OK
    assert out.read_bytes().startswith(b"P5\n28 28\n255\n")
    bad = tmp_path / "bad.pgm"
    assert main(["heatmap", "--mask", str(mask), "--height", "27", "--width", "28", "--out", str(bad)]) == EXIT_USAGE
    assert not bad.exists()


def test_gradcheck_command_small(capsys):
    code = main(["gradcheck", "--n-features", "5", "--n-classes", "3", "--batch", "3"])
    text = capsys.readouterr().out
    assert code == EXIT_OK
    assert "max relative error" in text and "FAIL" not in text


def test_console_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "cfmask.cli", "generate", "--n-samples", "10",
                          "--out", str(tmp_path / "e")], capture_output=True, text=True)
    assert res.returncode == EXIT_OK, res.stderr
