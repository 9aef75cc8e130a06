from __future__ import annotations

import json
import os
import subprocess
import sys

import pytest

from drivebench.cli import main


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """gen-town -> gen-routes -> collect -> train -> evaluate x2, shared by the checks below."""
    root = tmp_path_factory.mktemp("cli")
    o = ["--out", str(root)]
    assert main(["gen-town", *o, "--seed", "5", "--blocks", "3", "--name", "town"]) == 0
    assert main(["gen-routes", *o, "--town", "town", "--type", "tiny", "--count", "4", "--name", "routes"]) == 0
    assert main(["collect", *o, "--towns", "town", "--routes", "routes", "--frames", "60", "--name", "data"]) == 0
    assert main(["train", *o, "--dataset", "data", "--epochs", "2", "--batch-size", "16", "--lr", "1e-3",
                 "--name", "train"]) == 0
    for label, name in (("val", "ev_val"), ("test", "ev_test")):
        assert main(["evaluate", *o, "--towns", "town", "--routes", "routes", "--checkpoints", str(root / "train"),
                     "--every", "1", "--label", label, "--name", name]) == 0
    return root


def test_pipeline_outputs(pipeline):
    assert (pipeline / "town" / "town.json").is_file()
    assert (pipeline / "data" / "manifest.json").is_file()
    assert (pipeline / "train" / "epoch_002.ckpt").is_file()
    man = json.loads((pipeline / "train" / "run.json").read_text())
    assert man["command"] == "train"
    for rel, digest in man["outputs"].items():
        assert len(digest) == 64 and (pipeline / "train" / rel).is_file()
    series = json.loads((pipeline / "ev_val" / "series.json").read_text())
    assert series["epochs"] == [1, 2] or series.get("epochs", [1, 2]) == [1, 2]


def test_analyze_and_report(pipeline, capsys):
    o = ["--out", str(pipeline)]
    assert main(["analyze", *o, "--runs", str(pipeline / "ev_val"), str(pipeline / "ev_test"),
                 "--name", "an"]) == 0
    sel = json.loads((pipeline / "an" / "selection.json").read_text())
    assert sel
    assert (pipeline / "an" / "correlation.json").is_file()
    capsys.readouterr()
    assert main(["report", *o, "--run", str(pipeline / "ev_test")]) == 0
    assert "DS" in capsys.readouterr().out


def test_rerun_is_byte_identical(pipeline):
    o = ["--out", str(pipeline)]
    assert main(["train", *o, "--dataset", "data", "--epochs", "2", "--batch-size", "16", "--lr", "1e-3",
                 "--name", "train2"]) == 0
    for e in range(3):
        f = f"epoch_{e:03d}.ckpt"
        assert (pipeline / "train" / f).read_bytes() == (pipeline / "train2" / f).read_bytes()
    a = json.loads((pipeline / "train" / "run.json").read_text())["outputs"]
    b = json.loads((pipeline / "train2" / "run.json").read_text())["outputs"]
    assert a == b


def test_existing_run_dir_needs_force(pipeline):
    o = ["--out", str(pipeline)]
    assert main(["gen-town", *o, "--seed", "5", "--blocks", "3", "--name", "town"]) == 2
    assert main(["gen-town", *o, "--seed", "6", "--blocks", "3", "--name", "town2"]) == 0
    assert main(["gen-town", *o, "--seed", "7", "--blocks", "3", "--name", "town2", "--force"]) == 0
    assert json.loads((pipeline / "town2" / "town.json").read_text())["town_seed"] == 7


def test_usage_errors_exit_2(pipeline, tmp_path):
    o = ["--out", str(pipeline)]
    assert main(["gen-routes", *o, "--town", "town", "--type", "tiny", "--count", "0", "--name", "x0"]) == 2
    assert main(["train", *o, "--dataset", str(tmp_path / "missing"), "--name", "x1"]) == 2
    bad = tmp_path / "bad.toml"
    bad.write_text("[towns]\ntrain = [1]\ntest = [1]\n")
    assert main(["gen-town", *o, "--config", str(bad), "--name", "x2"]) == 2
    assert main(["collect", *o, "--towns", "town", "--routes", "routes", "--frames", "100000", "--no-reuse",
                 "--name", "x3"]) == 2


def test_misaligned_series_exit_2(pipeline, tmp_path):
    other = tmp_path / "other"
    other.mkdir()
    (other / "series.json").write_text(json.dumps({"epochs": [1, 2, 3], "series": {"test": [0.1, 0.2, 0.3]}}))
    assert main(["analyze", "--out", str(pipeline), "--runs", str(pipeline / "ev_val"), str(other),
                 "--name", "x4"]) == 2
    (other / "series.json").write_text(json.dumps({"epochs": [1, 2]}))
    assert main(["analyze", "--out", str(pipeline), "--runs", str(pipeline / "ev_val"), str(other),
                 "--name", "x4"]) == 2


def test_corrupt_checkpoint_exit_2(pipeline, tmp_path):
    bogus = tmp_path / "bogus.ckpt"
    bogus.write_bytes(b"garbage")
    assert main(["evaluate", "--out", str(pipeline), "--towns", "town", "--routes", "routes",
                 "--checkpoint", str(bogus), "--name", "x5"]) == 2


def test_runtime_error_exit_1(pipeline, monkeypatch):
    import drivebench.policy

    def boom(*a, **k):
        raise FloatingPointError("diverged")

    monkeypatch.setattr(drivebench.policy, "train", boom)
    assert main(["train", "--out", str(pipeline), "--dataset", "data", "--epochs", "1", "--name", "x6"]) == 1


def test_entry_point_and_env_out(tmp_path):
    env = dict(os.environ, DRIVEBENCH_OUT=str(tmp_path))
    r = subprocess.run([sys.executable, "-m", "drivebench.cli", "gen-town", "--seed", "3", "--blocks", "2"],
                       env=env, capture_output=True, text=True)
    assert r.returncode == 0, r.stderr
    assert (tmp_path / "town-3" / "town.json").is_file()
