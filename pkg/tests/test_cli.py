import csv
import hashlib
import json
import shutil
import subprocess

import pytest
import yaml

from moetune.cli import main
from moetune.evaluation import SAFE, VULNERABLE

TINY = {
    "data": {"n_train": 8, "n_test": 4, "n_corpus": 16},
    "model": {"preset": "desk", "overrides": {"n_layers": 2, "d_model": 16, "n_heads": 2, "d_ff": 16}},
    "pretrain": {"max_steps": 3, "batch_size": 4},
    "upcycle": {"experts": 4, "top_k": 2},
    "moe_tune": {"max_steps": 2, "batch_size": 4},
    "infer": {"max_new_tokens": 8},
}


@pytest.fixture
def tiny_config(tmp_path):
    p = tmp_path / "run.yaml"
    p.write_text(yaml.safe_dump(TINY))
    return p


def run(*argv):
    return main([str(a) for a in argv])


# ---------------------------------------------------------------- param-count


def test_param_count(tmp_path, capsys):
    assert run("param-count", "--out-dir", tmp_path) == 0
    out = capsys.readouterr().out
    assert "total=18017409024" in out and "activated=5333833728" in out
    payload = json.loads((tmp_path / "param_count.json").read_text())
    assert abs(payload["total"] - 18e9) / 18e9 < 0.15
    assert abs(payload["activated"] - 5e9) / 5e9 < 0.15


def test_param_count_flags(tmp_path):
    assert run("param-count", "--top-k", 1, "--out-dir", tmp_path) == 0
    assert json.loads((tmp_path / "param_count.json").read_text())["activated"] == 3219904512


# ---------------------------------------------------------------- eval


def _predictions(path):
    rows = ([(VULNERABLE, VULNERABLE)] * 3 + [(VULNERABLE, SAFE)] * 2 + [(SAFE, VULNERABLE)]
            + [(SAFE, SAFE)] * 4)
    with open(path, "w") as fh:
        for i, (gold, pred) in enumerate(rows):
            fh.write(json.dumps({"id": f"x{i}", "gold_label": gold, "samples": [f"LABEL: {pred}"] * 5}) + "\n")


def test_eval_crafted_file(tmp_path, capsys):
    _predictions(tmp_path / "p.jsonl")
    assert run("eval", "--dataset", tmp_path / "p.jsonl", "--out-dir", tmp_path) == 0
    assert "f1=0.6667" in capsys.readouterr().out
    report = json.loads((tmp_path / "metrics.json").read_text())
    assert report["metrics"]["counts"] == {"tp": 3, "fp": 1, "tn": 4, "fn": 2}


def test_manifest_records_hashes(tmp_path):
    _predictions(tmp_path / "p.jsonl")
    run("eval", "--dataset", tmp_path / "p.jsonl", "--out-dir", tmp_path, "--seed", 7)
    m = json.loads((tmp_path / "run_manifest.json").read_text())
    assert m["command"] == "eval" and m["seed"] == 7
    metrics = str(tmp_path / "metrics.json")
    assert m["outputs"][metrics] == hashlib.sha256((tmp_path / "metrics.json").read_bytes()).hexdigest()
    assert str(tmp_path / "p.jsonl") in m["inputs"]


# ---------------------------------------------------------------- errors


def test_missing_required_flag(tmp_path, capsys):
    assert run("upcycle", "--out-dir", tmp_path) == 2
    assert "--model is required" in capsys.readouterr().err
    assert not (tmp_path / "run_manifest.json").exists()


def test_unknown_config_key(tmp_path, capsys):
    p = tmp_path / "bad.yaml"
    p.write_text("moe_tune:\n  learning_rate: 1\n")
    assert run("param-count", "--config", p, "--out-dir", tmp_path) == 2
    assert "learning_rate" in capsys.readouterr().err


def test_corrupt_checkpoint(tmp_path, capsys):
    (tmp_path / "m.ckpt").write_bytes(b"junk\n")
    assert run("upcycle", "--model", tmp_path / "m.ckpt", "--out-dir", tmp_path) == 2
    assert "corrupt" in capsys.readouterr().err


def test_bad_predictions_file(tmp_path):
    (tmp_path / "p.jsonl").write_text('{"id": "a"}\n')
    assert run("eval", "--dataset", tmp_path / "p.jsonl", "--out-dir", tmp_path) == 2


# ---------------------------------------------------------------- ratings


def _ratings(path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["item_id", "rater_id", "dimension", "score"])
        for item, (a, b) in enumerate([(4, 4), (2, 3), (3, 4), (1, 1), (3, 3)]):
            w.writerow([f"i{item}", "r1", "correctness", a])
            w.writerow([f"i{item}", "r2", "correctness", b])


def test_kappa_and_likert(tmp_path):
    _ratings(tmp_path / "r.csv")
    assert run("kappa", "--dataset", tmp_path / "r.csv", "--out-dir", tmp_path) == 0
    k = json.loads((tmp_path / "kappa.json").read_text())
    assert set(k) == {"correctness:r1|r2"}
    assert run("likert", "--dataset", tmp_path / "r.csv", "--out-dir", tmp_path) == 0
    lk = json.loads((tmp_path / "likert.json").read_text())
    assert [q["item_id"] for q in lk["third_rater_queue"]] == ["i1"]


# ---------------------------------------------------------------- annotation


def test_annotate_scripted(tmp_path):
    items = tmp_path / "items.jsonl"
    items.write_text("".join(json.dumps({"id": f"c{i}", "code": "function f(){}", "vulnerability_type": "timestamp"})
                             + "\n" for i in range(3)))
    assert run("annotate", "--dataset", items, "--out-dir", tmp_path / "ann") == 0
    report = json.loads((tmp_path / "ann" / "report.json").read_text())
    assert report["verified"] == 3


# ---------------------------------------------------------------- pipeline


def test_pipeline_end_to_end(tmp_path, tiny_config):
    cfg = ["--config", tiny_config, "--seed", 3]
    assert run("synth-data", *cfg, "--out-dir", tmp_path) == 0
    assert run("pretrain", *cfg, "--dataset", tmp_path / "corpus.jsonl", "--out-dir", tmp_path) == 0
    assert run("upcycle", *cfg, "--model", tmp_path / "dense.ckpt", "--out-dir", tmp_path) == 0
    assert run("moe-tune", *cfg, "--model", tmp_path / "moe.ckpt", "--dataset", tmp_path / "train.jsonl",
               "--out-dir", tmp_path) == 0
    assert run("infer", *cfg, "--model", tmp_path / "moe_tuned.ckpt", "--dataset", tmp_path / "test.jsonl",
               "--out-dir", tmp_path) == 0
    rows = [json.loads(line) for line in (tmp_path / "predictions.jsonl").read_text().splitlines()]
    assert len(rows) == 4
    # greedy decoding: five identical votes per prompt
    assert all(len(r["samples"]) == 5 and len(set(r["samples"])) == 1 for r in rows)
    assert run("eval", *cfg, "--dataset", tmp_path / "predictions.jsonl", "--out-dir", tmp_path) == 0
    assert run("analyze-routing", *cfg, "--model", tmp_path / "moe_tuned.ckpt", "--dataset",
               tmp_path / "test.jsonl", "--layers", "0,1", "--out-dir", tmp_path) == 0
    summary = json.loads((tmp_path / "routing_summary.json").read_text())
    assert summary["layers"] == [0, 1]
    assert run("analyze-routing", *cfg, "--model", tmp_path / "moe_tuned.ckpt", "--dataset",
               tmp_path / "test.jsonl", "--layers", "5", "--out-dir", tmp_path) == 2
    assert run("upcycle", *cfg, "--model", tmp_path / "moe.ckpt", "--out-dir", tmp_path) == 2


@pytest.mark.skipif(shutil.which("moetune") is None, reason="console script not installed")
def test_console_script():
    out = subprocess.run(["moetune", "--version"], capture_output=True, text=True, check=True)
    assert out.stdout.startswith("moetune ")
