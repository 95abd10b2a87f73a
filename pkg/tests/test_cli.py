import csv
import json

import numpy as np
import pytest

from trajdiff import dataset as ds_mod
from trajdiff.cli import main
from trajdiff.denoiser import load_checkpoint
from trajdiff.diffusion import make_schedule, sample_many

TRAIN = ["--epochs", "1", "--batch-size", "16", "--K", "8", "--n-gt", "2"]


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["gen-data", "--task", "tabletop", "--horizon", "4", "--problems", "12", "--guesses", "2",
                 "--seed", "0", "--out", str(root / "d")]) == 0
    assert main(["train", "--data", str(root / "d"), *TRAIN, "--constraint-aware", "--lambda", "0.01",
                 "--seed", "1", "--out", str(root / "c")]) == 0
    return root


def test_gen_data_outputs(work):
    ds = ds_mod.load(work / "d")
    assert len(ds) >= 1
    assert (work / "d" / "generation_log.json").is_file()
    prov = json.loads((work / "d" / "provenance.json").read_text())
    assert prov["seed"] == 0 and prov["command"] == "gen-data"
    assert len(prov["config_digest"]) == 16 and "torch" in prov["versions"]


def test_gen_data_deterministic(work, tmp_path):
    assert main(["gen-data", "--task", "tabletop", "--horizon", "4", "--problems", "12", "--guesses", "2",
                 "--seed", "0", "--out", str(tmp_path / "d")]) == 0
    assert (tmp_path / "d" / "data.f32").read_bytes() == (work / "d" / "data.f32").read_bytes()


def test_usage_errors(work, tmp_path):
    assert main(["gen-data", "--task", "tabletop", "--problems", "0", "--out", str(tmp_path / "x")]) == 2
    assert main(["train", "--data", str(tmp_path / "missing"), "--out", str(tmp_path / "c")]) == 2
    assert main(["sample", "--ckpt", str(tmp_path / "nope"), "--data", str(work / "d"), "--out", str(tmp_path / "s")]) == 2
    cfg = tmp_path / "bad.json"
    cfg.write_text(json.dumps({"dataset": {"problemz": 3}}))
    assert main(["gen-data", "--config", str(cfg), "--out", str(tmp_path / "y")]) == 2


def test_config_file_and_flag_precedence(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"task": "tabletop", "horizon": 3, "dataset": {"problems": 2, "guesses": 1}, "seed": 4}))
    assert main(["gen-data", "--config", str(cfg), "--problems", "3", "--out", str(tmp_path / "d")]) == 0
    prov = json.loads((tmp_path / "d" / "provenance.json").read_text())
    assert prov["config"]["dataset"]["problems"] == 3 and prov["config"]["horizon"] == 3 and prov["seed"] == 4


def test_train_outputs(work):
    model = load_checkpoint(work / "c" / "final")
    assert model.config.horizon == 4
    with open(work / "c" / "loss_log.csv") as fh:
        assert len(list(csv.reader(fh))) == 2
    assert json.loads((work / "c" / "provenance.json").read_text())["command"] == "train"


def test_lambda_zero_checkpoint_identical(work, tmp_path):
    d = str(work / "d")
    assert main(["train", "--data", d, *TRAIN, "--seed", "5", "--out", str(tmp_path / "plain")]) == 0
    assert main(["train", "--data", d, *TRAIN, "--constraint-aware", "--lambda", "0", "--seed", "5",
                 "--out", str(tmp_path / "aware")]) == 0
    a = (tmp_path / "plain" / "final" / "params.f32").read_bytes()
    b = (tmp_path / "aware" / "final" / "params.f32").read_bytes()
    assert a == b


def test_sample_counts_and_determinism(work, tmp_path):
    args = ["sample", "--ckpt", str(work / "c"), "--data", str(work / "d"), "--n", "10", "--omega", "1.0", "--seed", "7"]
    assert main([*args, "--out", str(tmp_path / "s1")]) == 0
    assert main([*args, "--out", str(tmp_path / "s2")]) == 0
    s = ds_mod.load(tmp_path / "s1")
    assert s.kind == "samples" and s.provenance["method"] == "constr_diff"
    counts = np.bincount(s.problem_index)
    assert np.all(counts == 10)
    assert (tmp_path / "s1" / "data.f32").read_bytes() == (tmp_path / "s2" / "data.f32").read_bytes()


def test_sample_omega_zero_is_conditional_only(work, tmp_path):
    base = ["sample", "--ckpt", str(work / "c"), "--data", str(work / "d"), "--n", "2", "--seed", "3", "--split", "all"]
    assert main([*base, "--omega", "0", "--out", str(tmp_path / "s0")]) == 0
    assert main([*base, "--omega", "1", "--out", str(tmp_path / "s1")]) == 0
    s0, s1 = ds_mod.load(tmp_path / "s0"), ds_mod.load(tmp_path / "s1")
    model = load_checkpoint(work / "c" / "final").eval()
    meta = json.loads((work / "c" / "final" / "meta.json").read_text())["provenance"]["schedule"]
    sched = make_schedule(meta["K"], meta["beta_start"], meta["beta_end"])
    _, first = np.unique(s0.problem_index, return_index=True)
    cond = s0.y[first]
    # with omega = 0 the guided sampler never evaluates the null branch, so this is the conditional chain
    direct, _ = sample_many(model, cond, 2, 0.0, sched, seed=3)
    np.testing.assert_array_equal(s0.x, np.asarray(direct, dtype=np.float32))
    assert not np.array_equal(s0.x, s1.x)


def test_eval_on_dataset_and_all_methods(work, tmp_path):
    assert main(["eval", "--data", str(work / "d"), "--seed", "0", "--out", str(tmp_path / "e0")]) == 0
    rep = json.loads((tmp_path / "e0" / "report.json").read_text())
    assert rep["table1"][0]["method"] == "dataset"
    assert rep["table1"][0]["feasible_per_mille"] == 1000.0

    assert main(["sample", "--ckpt", str(work / "c"), "--data", str(work / "d"), "--n", "2", "--seed", "1",
                 "--out", str(tmp_path / "s")]) == 0
    assert main(["eval", "--data", str(work / "d"), "--samples", str(tmp_path / "s"), "--samples", str(work / "d"),
                 "--uniform-baseline", "--warm-start", "--curves", "--K", "8", "--seed", "0",
                 "--out", str(tmp_path / "e1")]) == 0
    rep = json.loads((tmp_path / "e1" / "report.json").read_text())
    assert {r["method"] for r in rep["table1"]} == {"constr_diff", "dataset", "uniform"}
    assert {r["method"] for r in rep["table2"]} == {"constr_diff", "dataset", "uniform"}
    with open(tmp_path / "e1" / "curve.csv") as fh:
        assert len(list(csv.reader(fh))) == 8 + 1
    assert (tmp_path / "e1" / "provenance.json").is_file()


def test_threads_env_fallback(work, tmp_path, monkeypatch):
    monkeypatch.setenv("TRAJDIFF_THREADS", "1")
    assert main(["eval", "--data", str(work / "d"), "--out", str(tmp_path / "e")]) == 0
    prov = json.loads((tmp_path / "e" / "provenance.json").read_text())
    assert prov["config"]["threads"] in (None, 1)
