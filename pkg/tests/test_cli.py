import json

import pytest

from distilkit.cli import main


def run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


def test_params(capsys):
    code, out, _ = run(capsys, "params", "--spec", "110M")
    assert code == 0 and "109,338,624" in out


def test_plan_single_and_recommend(capsys, tmp_path):
    code, out, _ = run(capsys, "plan", "--teacher", "100B", "--student", "20B", "--mp", "8", "--offload")
    assert code == 0 and "feasible=true" in out
    code, out, _ = run(capsys, "plan", "--teacher", "6B", "--student", "1.2B", "--previous", "--dp", "8")
    assert "feasible=false" in out
    js = tmp_path / "rec.json"
    code, out, _ = run(capsys, "plan", "--teacher", "10B", "--student", "2B", "--recommend", "--json", str(js))
    assert code == 0 and "recommended:" in out
    doc = json.loads(js.read_text())
    assert doc["trace"][0]["ZeRO"] is False and doc["recommended"] is not None


def test_plan_measured(capsys):
    code, out, _ = run(capsys, "plan", "--measured")
    assert code == 0 and "110M=>66M" in out and out.count("\n") >= 17


def test_errors_are_one_line(capsys, tmp_path):
    code, _, err = run(capsys, "distill", "--config", str(tmp_path / "missing.json"))
    assert code == 2 and err.startswith("config-error:") and err.count("\n") == 1
    code, _, err = run(capsys, "plan", "--mp", "5")
    assert code == 2 and err.startswith("split-error:")
    code, _, err = run(capsys, "combine", "KD", "TMKD")
    assert code == 2 and err.startswith("combination-error:")


def test_combine_matches_bestc(capsys, tmp_path):
    out_file = tmp_path / "c.json"
    code, _, _ = run(capsys, "combine", "TinyBERT-Att", "MiniLMv2", "--name", "mix", "--out", str(out_file))
    assert code == 0
    doc = json.loads(out_file.read_text())
    assert doc["name"] == "mix"
    feats = {(t["feature"], t["distance"]["kind"]) for t in doc["stages"][0]["loss_terms"]}
    assert feats == {("Emb", "MSE"), ("HS", "MSE"), ("Q", "KL"), ("K", "KL"), ("V", "KL")}


def test_distill_and_analyze(capsys, tmp_path, monkeypatch):
    monkeypatch.delenv("GKD_OUT", raising=False)
    cfg = {"method": "KD", "stages": {"iterations": 12, "batch_size": 8, "snapshot_every": 3},
           "seeds": [0, 1], "data": {"size": 120}, "teacher_iterations": [8, 8]}
    path = tmp_path / "kd.json"
    path.write_text(json.dumps(cfg))
    out = tmp_path / "run"
    code, text, _ = run(capsys, "distill", "--config", str(path), "--out", str(out))
    assert code == 0 and "mean over 2 seed(s)" in text
    summary = json.loads((out / "summary.json").read_text())
    assert [r["seed"] for r in summary["seeds"]] == [0, 1]
    assert set(summary["summary"]) == {"accuracy", "perplexity", "final_loss"}
    assert (out / "config.resolved.json").exists()
    assert (out / "seed-0" / "checkpoints" / "student.ckpt").exists()

    tel = out / "seed-0" / "telemetry.jsonl"
    rt = tmp_path / "rt.jsonl"
    js = tmp_path / "an.json"
    code, text, _ = run(capsys, "analyze", str(tel), "--json", str(js), "--roundtrip", str(rt))
    assert code == 0 and "pearson" in text and "normalized loss:" in text
    assert rt.read_text() == tel.read_text()
    assert json.loads(js.read_text())["correlation"]["against"] == "loss"
