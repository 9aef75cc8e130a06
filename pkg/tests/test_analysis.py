from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from drivebench.analysis import (TIMINGS_FILE, ConfigError, ConstantSeries, ScoreSeries, bundle_digest, config_from_dict,
                                 correlation_matrix, load_config_file, pearson, rank, run_experiment, select_checkpoint,
                                 smoothed_loss, spearman)

ROOT = Path(__file__).resolve().parent.parent


@pytest.mark.parametrize("case", oracles.load_cases("correlation"), ids=lambda c: c["name"])
def test_correlation_cases(case):
    assert pearson(case["a"], case["b"]) == pytest.approx(case["pearson"], abs=1e-12)
    assert spearman(case["a"], case["b"]) == pytest.approx(case["spearman"], abs=1e-12)
    assert pearson(case["a"], case["b"]) == pytest.approx(oracles.pearson(case["a"], case["b"]), abs=1e-12)
    assert spearman(case["a"], case["b"]) == pytest.approx(oracles.spearman(case["a"], case["b"]), abs=1e-12)


def test_constant_series():
    with pytest.raises(ConstantSeries):
        pearson([1, 1, 1], [1, 2, 3])
    with pytest.raises(ConstantSeries):
        spearman([2, 2, 2], [1, 2, 3])


def test_spearman_is_pearson_of_ranks_on_tied_series():
    rng = np.random.default_rng(0)
    done = 0
    while done < 1000:
        n = int(rng.integers(3, 15))
        a = rng.integers(0, 5, n)
        b = rng.integers(0, 5, n)
        if np.ptp(a) == 0 or np.ptp(b) == 0:
            continue
        assert spearman(a, b) == pearson(rank(a), rank(b))
        np.testing.assert_array_equal(rank(a), oracles.average_ranks(a.tolist()))
        done += 1


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=3, max_size=20), st.floats(0.01, 100), st.floats(-1e3, 1e3),
       st.randoms(use_true_random=False))
def test_pearson_affine_invariance(a, alpha, beta, rnd):
    a = np.array(a)
    b = a.copy()
    rnd.shuffle(b)
    b = b + np.arange(len(b))
    if np.ptp(a) < 1e-6 or np.ptp(b) < 1e-6:
        return
    assert pearson(alpha * a + beta, b) == pytest.approx(pearson(a, b), abs=1e-9)


def test_select_checkpoint_examples():
    assert select_checkpoint(ScoreSeries("v", (5, 10, 15), (0.1, 0.3, 0.2))) == 10
    assert select_checkpoint(ScoreSeries("v", (5, 10, 15), (0.2, 0.2, 0.2))) == 5
    assert select_checkpoint(ScoreSeries("v", (7,), (0.4,))) == 7
    assert select_checkpoint(ScoreSeries("loss", (5, 10, 15), (3.0, 1.0, 2.0)), minimize=True) == 10


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=10),
       st.sampled_from([lambda v: 2 * v + 3, lambda v: v ** 3, np.exp, lambda v: np.log1p(v)]))
def test_select_checkpoint_monotone_invariant(vals, f):
    ep = tuple(range(5, 5 * len(vals) + 1, 5))
    s = ScoreSeries("v", ep, tuple(vals))
    t = ScoreSeries("v", ep, tuple(float(f(np.float64(v))) for v in vals))
    if len(set(t.values)) != len(set(s.values)):  # transform collapsed distinct floats
        return
    assert select_checkpoint(s) == select_checkpoint(t)


def test_correlation_matrix_properties():
    rng = np.random.default_rng(2)
    m = correlation_matrix({k: rng.random(6) for k in "abcd"})
    np.testing.assert_array_equal(m.pearson, m.pearson.T)
    np.testing.assert_array_equal(m.spearman, m.spearman.T)
    assert np.all(np.diag(m.pearson) == 1.0)
    same = correlation_matrix({"x": [1, 2, 5], "y": [1, 2, 5]})
    assert np.all(same.pearson == 1.0) and np.all(same.spearman == 1.0)
    perm = correlation_matrix({"x": [1, 2, 5, 9], "y": [10, 20, 50, 90], "z": [0.1, 0.2, 3, 4]})
    assert perm.get("x", "z", "spearman") == 1.0
    ex = correlation_matrix({"x": [1, 2, 3], "c": [4, 4, 4], "y": [3, 1, 2]})
    assert ex.excluded == ["c"]
    assert np.isnan(ex.get("c", "x")) and np.isfinite(ex.get("x", "y"))
    assert ex.to_dict()["pearson"][1][0] is None


def test_smoothed_loss():
    first, last = smoothed_loss([10.0] * 20 + [1.0] * 20)
    assert (first, last) == (10.0, 1.0)


def test_config_errors_name_field_paths():
    with pytest.raises(ConfigError, match=r"^towns\.test"):
        config_from_dict({"towns": {"train": [1, 2], "test": [2]}})
    with pytest.raises(ConfigError, match=r"valsets\.sets\[0\]\.count"):
        config_from_dict({"valsets": {"sets": [{"name": "a", "type": "tiny", "count": 0, "seed": 1}]}})
    with pytest.raises(ConfigError, match=r"train\.lr"):
        config_from_dict({"train": {"lr": "fast"}})
    with pytest.raises(ConfigError, match=r"^bogus"):
        config_from_dict({"bogus": {}})
    cfg = config_from_dict(load_config_file(ROOT / "configs" / "desk.toml"))
    assert cfg.train.epochs == 20 and cfg.eval_epochs == (5, 10, 15, 20)


def _bundle(tmp_path, name):
    cfg = config_from_dict(load_config_file(ROOT / "configs" / "tiny.toml"))
    out = tmp_path / name
    summary = run_experiment(cfg, out)
    return out, summary


def test_degenerate_experiment_is_complete_and_repeatable(tmp_path):
    out, summary = _bundle(tmp_path, "a")
    for rel in ("summary.json", "report.txt", "table_closed_loop.txt", "analysis/selection.json",
                "analysis/correlation_pooled.json", "analysis/correlation_pooled.svg", "eval/expert.csv"):
        assert (out / rel).is_file(), rel
    sel = json.loads((out / "analysis/selection.json").read_text())
    row = sel["runs"][0]
    assert row["best_val_epoch"] == row["final_epoch"] == 1
    assert row["test_DS_final"] == pytest.approx(summary["scaling"]["d200"]["mean"] / 100)
    out2, _ = _bundle(tmp_path, "b")
    # wall-clock timings are the only file allowed to differ
    files = sorted(p.relative_to(out) for p in out.rglob("*") if p.is_file() and p.name != TIMINGS_FILE)
    assert files == sorted(p.relative_to(out2) for p in out2.rglob("*") if p.is_file() and p.name != TIMINGS_FILE)
    for f in files:
        assert (out / f).read_bytes() == (out2 / f).read_bytes(), f
    assert bundle_digest(out) == bundle_digest(out2)
    assert set(json.loads((out / TIMINGS_FILE).read_text())) >= {"routes", "datasets", "train", "test_eval"}
