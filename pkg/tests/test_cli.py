import json

import pytest

from geodyn.cli import main

SYNTH = {"counts": {"live": 8, "replay": 8, "print_rigid": 6, "print_bent": 5, "mask_rigid": 5},
         "frames": 16}
GCN = {"epochs": 2, "batch_size": 8, "lr_decay_epochs": [1],
       "model": {"channels": [4, 8], "strides": [1, 2], "kernel_size": 3, "seq_len": 8}}
FUSION = {"epochs": 3, "attn_dim": 8}


def _write(path, obj):
    path.write_text(json.dumps(obj))
    return str(path)


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfgs = {k: _write(root / f"{k}.json", v) for k, v in
            (("synth", SYNTH), ("gcn", GCN), ("fusion", FUSION))}
    assert main(["synth", "--config", cfgs["synth"], "--out", str(root / "data")]) == 0
    assert main(["train-gcn", "--data", str(root / "data"), "--config", cfgs["gcn"],
                 "--out", str(root / "m1"), "--seed", "7"]) == 0
    return root, cfgs


def test_synth_outputs(run):
    root, _ = run
    names = {p.name for p in (root / "data").iterdir()}
    assert {"landmarks.jsonl", "features.jsonl", "manifest.txt", "graph.json",
            "resolved_config.json", "log.jsonl"} <= names
    resolved = json.loads((root / "data" / "resolved_config.json").read_text())
    assert resolved["synth"]["counts"] == SYNTH["counts"]
    assert resolved["synth"]["motion"]["noise_sigma"] == 0.2  # defaults are filled in


def test_train_twice_is_byte_identical(run):
    root, cfgs = run
    graph = str(root / "data" / "graph.json")
    assert main(["train-gcn", "--data", str(root / "data"), "--graph", graph, "--config", cfgs["gcn"],
                 "--out", str(root / "m2"), "--seed", "7"]) == 0
    for name in ("best.json", "resolved_config.json", "log.jsonl"):
        assert (root / "m1" / name).read_bytes() == (root / "m2" / name).read_bytes(), name
    log = [json.loads(line) for line in (root / "m1" / "log.jsonl").read_text().splitlines()]
    assert [r["epoch"] for r in log] == [1, 2] and all("dev_auc" in r for r in log)


def test_eval_writes_report_and_scores(run):
    root, _ = run
    args = ["eval", "--checkpoint", str(root / "m1" / "best"), "--data", str(root / "data"),
            "--split", "test"]
    assert main(args) == 0
    out = root / "m1" / "eval-test"
    report = json.loads((out / "report.json").read_text())
    assert report["threshold_policy"] == "eer-dev" and report["auc"] is not None
    assert report["extra"]["gcn_config_hash"]
    first = (out / "report.json").read_bytes(), (out / "scores.csv").read_bytes()
    assert main(args + ["--out", str(root / "eval2")]) == 0
    assert (root / "eval2" / "report.json").read_bytes() == first[0]
    assert (root / "eval2" / "scores.csv").read_bytes() == first[1]


def test_eval_fixed_threshold(run):
    root, _ = run
    assert main(["eval", "--checkpoint", str(root / "m1" / "best.json"), "--data", str(root / "data"),
                 "--threshold-policy", "fixed", "--threshold", "0.5", "--out", str(root / "ev")]) == 0
    report = json.loads((root / "ev" / "report.json").read_text())
    assert report["threshold"] == 0.5 and report["threshold_policy"] == "fixed"


def test_fusion_train_and_eval(run):
    root, cfgs = run
    assert main(["train-fusion", "--data", str(root / "data"), "--gcn", str(root / "m1" / "best.json"),
                 "--config", cfgs["fusion"], "--out", str(root / "f1")]) == 0
    assert (root / "f1" / "best.json").is_file()
    assert main(["eval", "--checkpoint", str(root / "m1" / "best.json"), "--fusion",
                 str(root / "f1" / "best.json"), "--data", str(root / "data"),
                 "--out", str(root / "fe")]) == 0
    report = json.loads((root / "fe" / "report.json").read_text())
    assert report["extra"]["protocol"]["score_source"] == "fusion"


def test_activations_and_gradcheck(run, capsys):
    root, _ = run
    assert main(["activations", "--checkpoint", str(root / "m1" / "best.json"), "--data",
                 str(root / "data"), "--id", "live_0000", "--out", str(root / "act")]) == 0
    lines = (root / "act" / "activations.csv").read_text().splitlines()
    assert lines[0] == "node,time,activation" and len(lines) == 1 + 48 * 4
    assert main(["gradcheck", "--seeds", "2", "--out", str(root / "gc")]) == 0
    assert "PASS" in capsys.readouterr().out


def test_validation_errors_exit_one_and_write_nothing(run, tmp_path, capsys):
    root, cfgs = run
    data = str(root / "data")
    assert main(["frobnicate"]) == 1
    assert main(["train-gcn", "--data", data]) == 1
    bad = _write(tmp_path / "bad.json", {**GCN, "learning_rate": 0.1})
    out = tmp_path / "never"
    assert main(["train-gcn", "--data", data, "--config", bad, "--out", str(out)]) == 1
    assert not out.exists()
    assert "learning_rate" in capsys.readouterr().err
    assert main(["train-gcn", "--data", str(tmp_path / "nope"), "--out", str(out)]) == 1
    assert main(["eval", "--checkpoint", str(tmp_path / "missing.json"), "--data", data]) == 1
    assert main(["eval", "--checkpoint", str(root / "m1" / "best.json"), "--data", data,
                 "--split", "holdout", "--out", str(out)]) == 1
    assert main(["activations", "--checkpoint", str(root / "m1" / "best.json"), "--data", data,
                 "--id", "ghost", "--out", str(out)]) == 1
    assert not out.exists()


def test_thread_cap_validation(run, monkeypatch):
    monkeypatch.setenv("GEODYN_THREADS", "zero")
    assert main(["gradcheck", "--seeds", "1"]) == 1
    monkeypatch.setenv("GEODYN_THREADS", "2")
    assert main(["gradcheck", "--seeds", "1"]) == 0
