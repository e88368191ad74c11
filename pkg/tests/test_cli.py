import csv
import hashlib
import json

import numpy as np
import pytest

from shockfusion.cli import main, resolve_config, build_parser
from shockfusion.field_io import load_manifest, read_case
from shockfusion.neural import load_model, save_model

SMALL = ["--nx", "33", "--nt", "21", "--refine", "2", "--substeps", "2"]
FAST = ["--epochs", "3", "--set", 'architecture.hidden=[16,16]', "--set", "architecture.fusion_dim=16",
        "--set", "architecture.decoder=[16,16]", "--set", "train.batch_size=128"]


def _sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli_data")
    assert main(["gen-burgers", "--out", str(out), *SMALL]) == 0
    return out


@pytest.fixture(scope="module")
def trained(dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("cli_model")
    assert main(["train", "--manifest", str(dataset / "manifest.json"), "--out", str(out), "--seed", "3",
                 *FAST]) == 0
    return out


def test_gen_burgers_defaults(dataset, capsys):
    manifest = json.loads((dataset / "manifest.json").read_text())
    roles = [m["role"] for m in manifest.values()]
    assert roles.count("train") == 5 and len(roles) == 7
    cases = load_manifest(dataset / "manifest.json")
    assert all(c.n_points == 33 * 21 for c in cases)
    run = json.loads((dataset / "run_manifest.json").read_text())
    assert run["command"] == "gen-burgers" and len(run["outputs"]) == 8


def test_gen_burgers_rejects_bad_viscosity(tmp_path, capsys):
    assert main(["gen-burgers", "--out", str(tmp_path), "--nu", "0.01", "-1", *SMALL]) == 2
    assert "positive" in capsys.readouterr().err


def test_calibrate(dataset, tmp_path, capsys):
    assert main(["calibrate", "--manifest", str(dataset / "manifest.json"), "--out", str(tmp_path),
                 "--robust"]) == 0
    doc = json.loads((tmp_path / "calibration.json").read_text())
    assert "residual" in doc and doc["robust"] is not None
    assert "huber" in capsys.readouterr().out


def test_calibrate_single_case_fails(dataset, tmp_path, capsys):
    manifest = json.loads((dataset / "manifest.json").read_text())
    name = next(iter(manifest))
    one = tmp_path / "one.json"
    one.write_text(json.dumps({str(dataset / name): manifest[name]}))
    assert main(["calibrate", "--manifest", str(one), "--out", str(tmp_path)]) == 1
    assert capsys.readouterr().err


def test_missing_manifest_is_usage_error(tmp_path, capsys):
    assert main(["train", "--out", str(tmp_path)]) == 2
    assert "--manifest" in capsys.readouterr().err
    assert main(["train", "--manifest", str(tmp_path / "nope.json"), "--out", str(tmp_path)]) == 2


def test_train_outputs_and_rerun_is_bitwise(dataset, trained, tmp_path):
    for name in ("model.npz", "model.json", "history.csv", "run_manifest.json"):
        assert (trained / name).exists()
    hist = list(csv.DictReader(open(trained / "history.csv")))
    assert {r["phase"] for r in hist} == {"warmup", "focus"}
    run = json.loads((trained / "run_manifest.json").read_text())
    assert run["seed"] == 3 and len(run["inputs"]) == 8  # manifest plus every field file
    assert main(["train", "--manifest", str(dataset / "manifest.json"), "--out", str(tmp_path), "--seed", "3",
                 *FAST]) == 0
    assert _sha(tmp_path / "model.npz") == _sha(trained / "model.npz")


def test_train_variants(dataset, tmp_path):
    for variant in ("vanilla", "fusion"):
        out = tmp_path / variant
        assert main(["train", "--manifest", str(dataset / "manifest.json"), "--out", str(out),
                     "--variant", variant, *FAST]) == 0
        assert load_model(out / "model.npz").meta["variant"] in ("vanilla", "fusion_orig")


def test_predict_and_eval(dataset, trained, tmp_path):
    manifest = str(dataset / "manifest.json")
    assert main(["predict", "--checkpoint", str(trained / "model.npz"), "--manifest", manifest,
                 "--role", "interp", "--out", str(tmp_path), "--mc-samples", "8"]) == 0
    pred_files = list(tmp_path.glob("pred_*.dat"))
    assert len(pred_files) == 1
    pred = read_case(pred_files[0])
    assert {"Sigma_U", "Error_U", "ErrorU_L2"} <= set(pred.names)
    assert np.all(pred.column("Sigma_U") >= 0)
    assert main(["eval", "--manifest", manifest, "--role", "interp", "--pred-dir", str(tmp_path),
                 "--out", str(tmp_path), "--centerline", "0.5"]) == 0
    rows = list(csv.DictReader(open(tmp_path / "metrics.csv")))
    assert len(rows) == 1 and float(rows[0]["joint_rel_l2"]) > 0
    assert list(tmp_path.glob("centerline_*.csv"))


def test_eval_exact_copy_is_zero(dataset, tmp_path):
    truth = sorted(dataset.glob("burgers_*.dat"))[0]
    assert main(["eval", "--truth", str(truth), "--pred", str(truth), "--targets", "U",
                 "--out", str(tmp_path)]) == 0
    row = next(csv.DictReader(open(tmp_path / "metrics.csv")))
    assert all(float(row[k]) == 0.0 for k in ("joint_rel_l2", "U_rel_l2", "U_nrmse_pct", "U_nmae_pct"))


def test_predict_width_mismatch(dataset, trained, tmp_path, capsys):
    model = load_model(trained / "model.npz")
    model.meta["setup"]["features"]["mode"] = "raw"
    save_model(model, tmp_path / "bad.npz")
    assert main(["predict", "--checkpoint", str(tmp_path / "bad.npz"), "--manifest",
                 str(dataset / "manifest.json"), "--out", str(tmp_path)]) == 2
    assert "trunk width" in capsys.readouterr().err


def test_compare_and_ablate(dataset, tmp_path):
    manifest = str(dataset / "manifest.json")
    assert main(["compare", "--manifest", manifest, "--out", str(tmp_path), *FAST]) == 0
    rows = list(csv.DictReader(open(tmp_path / "compare.csv")))
    assert len(rows) == 3 * 2
    assert main(["ablate", "--manifest", manifest, "--out", str(tmp_path), *FAST]) == 0
    rows = list(csv.DictReader(open(tmp_path / "ablation.csv")))
    assert [r["model"] for r in rows] == ["baseline_end_to_end", "no_gradient_weighting", "no_relative_weighting",
                                          "simpler_architecture", "external_calibration"]


def test_config_precedence(tmp_path):
    cfg_file = tmp_path / "c.json"
    cfg_file.write_text(json.dumps({"train": {"lr": 1e-2, "batch_size": 64}, "variant": "vanilla"}))
    args = build_parser().parse_args(["train", "--config", str(cfg_file), "--set", "train.lr=0.005",
                                      "--variant", "current", "--epochs", "7"])
    cfg = resolve_config(args)
    assert cfg["train"]["lr"] == 0.005 and cfg["train"]["batch_size"] == 64
    assert cfg["variant"] == "shock_aware"
    assert all(p["max_epochs"] == 7 for p in cfg["train"]["phases"])


def test_bad_override_and_missing_config(tmp_path):
    assert main(["calibrate", "--set", "novalue", "--out", str(tmp_path)]) == 2
    assert main(["calibrate", "--config", str(tmp_path / "x.json"), "--out", str(tmp_path)]) == 2
