import json
import math

import numpy as np
import pytest

from neural_descent.baselines import metrics, state_joints
from neural_descent.bench import (
    BenchConfig, BenchmarkReport, COLUMNS, ablate_metaloss, ablation_csv, content_hash, crossover_table, manifest,
    parse_method, run_benchmark,
)
from neural_descent.hund import RefinerParams, TrainConfig, refiner_shape_for

FAST = BenchConfig(gd_steps=5, bfgs_max_iters=5)


@pytest.fixture(scope="module")
def params(skeleton):
    p = RefinerParams.init(refiner_shape_for(skeleton, TrainConfig()), 0)
    p.arrays["out_w"] = np.random.default_rng(0).uniform(-0.01, 0.01, p.arrays["out_w"].shape)
    return p


@pytest.fixture(scope="module")
def report(small_dataset, params):
    return run_benchmark(small_dataset.subset(range(3)), ["hund", "gd", "bfgs", "hybrid(3)"], params, FAST)


def test_parse_method():
    assert parse_method("hund") == ("hund", None)
    assert parse_method("hybrid3") == ("hybrid", 3)
    assert parse_method("hybrid(5)") == ("hybrid", 5)
    with pytest.raises(ValueError):
        parse_method("adam")


def test_content_hash_matches_git():
    assert content_hash(b"hello\n") == "ce013625030ba8dba906f756967f9e9ca394464a"
    assert content_hash(b"") == "e69de29bb2d1d6434b8b29ae775ad8c2e48c5391"


def test_empty_method_list(small_dataset):
    rep = run_benchmark(small_dataset, [], None, FAST)
    assert len(rep) == 0
    assert rep.to_csv() == ",".join(COLUMNS) + "\n"


def test_refiner_methods_need_params(small_dataset):
    with pytest.raises(ValueError):
        run_benchmark(small_dataset, ["bfgs", "hund"], None, FAST)
    with pytest.raises(ValueError):
        run_benchmark(small_dataset, ["hybrid9"], object(), FAST)


def test_row_counts_and_order(report):
    assert report.methods() == ["bfgs", "gd", "hund", "hybrid3"]
    keys = [(r["method"], r["sample_id"], r["index"]) for r in report.rows]
    assert keys == sorted(keys)
    assert sum(r["method"] == "hund" for r in report.rows) == 3 * 6
    assert sum(r["method"] == "gd" for r in report.rows) == 3 * 6
    for m in report.methods():
        for sid in range(3):
            tr = report.trace(m, sid)
            assert [r["index"] for r in tr] == list(range(len(tr)))
            assert all(a["evals"] < b["evals"] for a, b in zip(tr, tr[1:]))


def test_csv_round_trip_and_determinism(report, small_dataset, params):
    text = report.to_csv()
    assert BenchmarkReport.from_csv(text).rows == report.rows
    again = run_benchmark(small_dataset.subset(range(3)), ["hund", "gd", "bfgs", "hybrid(3)"], params, FAST)
    assert again.to_csv() == text


def test_threads_match_serial(report, small_dataset, params):
    par = run_benchmark(small_dataset.subset(range(3)), ["hund", "gd", "bfgs", "hybrid(3)"], params, BenchConfig(gd_steps=5, bfgs_max_iters=5, threads=2))
    assert par.to_csv() == report.to_csv()


def test_summary_recomputable_from_csv(report):
    rows = BenchmarkReport.from_csv(report.to_csv()).rows
    summary = report.summary()
    for m, s in summary.items():
        finals = {}
        for r in rows:
            if r["method"] == m:
                finals[r["sample_id"]] = r
        assert s["samples"] == len(finals)
        assert s["median_loss_total"] == float(np.median([r["loss_total"] for r in finals.values()]))
        assert s["median_evals"] == float(np.median([r["evals"] for r in finals.values()]))


def test_stored_metrics_match_online(report, small_dataset, params):
    from neural_descent.baselines import hund_trace
    smp = small_dataset.samples[1]
    tr = hund_trace(smp.observation, params, 5, cfg=small_dataset.raster)
    for row, x in zip(report.trace("hund", 1), tr.iterates):
        mp, pa, t = metrics(state_joints(x), smp.observation.gt_joints)
        assert row["mpjpe_mm"] == 1000 * mp and row["mpjpe_pa_mm"] == 1000 * pa and row["mpjpe_trans_mm"] == 1000 * t


def test_crossover_table(report):
    table = crossover_table(report, "hund", "bfgs")
    assert len(table["rows"]) == 3
    assert table["median_hund_evals"] == 6.0
    for r in table["rows"]:
        trace = report.trace("bfgs", r["sample_id"])
        if r["baseline_evals"] is None:
            assert all(t["loss_total"] > r["hund_loss"] for t in trace)
        else:
            first = next(t for t in trace if t["evals"] == r["baseline_evals"])
            assert first["loss_total"] <= r["hund_loss"]
    if table["never_matched"] >= 2:
        assert math.isinf(table["median_baseline_evals"])


def test_manifest_is_stable():
    a = manifest("generate", {"n": 3, "w": np.float64(0.5)}, {"x": b"abc"}, {"y": b"hello\n"})
    b = manifest("generate", {"w": np.float64(0.5), "n": 3}, {"x": b"abc"}, {"y": b"hello\n"})
    assert a == b
    doc = json.loads(a)
    assert doc["outputs"]["y"] == "ce013625030ba8dba906f756967f9e9ca394464a"


def test_ablation_single_kind(tmp_path):
    from neural_descent.dataset import generate_dataset
    train_set = generate_dataset(4, seed=1, raster_size=4)
    test_set = generate_dataset(3, seed=2, raster_size=4)
    config = TrainConfig(max_steps=2, batch_size=2, regime="fs", learning_rate=1e-3, context_dim=4, encoder_hidden=8, hidden=8)
    a = ablate_metaloss(train_set, test_set, ["last"], config, seeds=(0,))
    b = ablate_metaloss(train_set, test_set, ["last"], config, seeds=(0,))
    assert len(a["runs"]) == 1 and len(a["table"]) == 1
    assert ablation_csv(a) == ablation_csv(b)
    with pytest.raises(ValueError):
        ablate_metaloss(train_set, test_set, [], config)


def test_ablation_records_diverged_runs(monkeypatch):
    from neural_descent import bench
    from neural_descent.dataset import generate_dataset
    from neural_descent.hund import TrainingDiverged

    real = bench.train

    def flaky(obs, config, *args, **kw):
        if config.meta_loss_kind == "oi":
            raise TrainingDiverged("three consecutive non-finite steps")
        return real(obs, config, *args, **kw)

    monkeypatch.setattr(bench, "train", flaky)
    data = generate_dataset(4, seed=1, raster_size=4)
    config = TrainConfig(max_steps=1, batch_size=2, regime="fs", context_dim=4, encoder_hidden=8, hidden=8)
    res = ablate_metaloss(data, data, ["last", "oi"], config, seeds=(0, 1))
    status = {(r["kind"], r["seed"]): r["status"] for r in res["runs"]}
    assert status == {("last", 0): "ok", ("last", 1): "ok", ("oi", 0): "diverged", ("oi", 1): "diverged"}
    table = {r["kind"]: r["median_mpjpe_mm"] for r in res["table"]}
    assert math.isfinite(table["last"]) and math.isinf(table["oi"])
    assert ",diverged,inf," in ablation_csv(res)
