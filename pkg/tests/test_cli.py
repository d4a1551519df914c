import json

import pytest

from mitodetect.cli import main
from mitodetect.config import RunConfig
from mitodetect.data_model import load_manifest
from mitodetect.evaluation import write_classification_predictions
from mitodetect.models import SegModelConfig
from mitodetect.splitting import FoldPlan


def run(*argv):
    return main([str(a) for a in argv])


def test_synth_is_byte_identical_on_rerun(tmp_path):
    a, b = tmp_path / "a" / "m.jsonl", tmp_path / "b" / "m.jsonl"
    assert run("synth", "--track", "detection", "--slides", 4, "--patches", 8, "--seed", 1, "--out", a) == 0
    assert run("synth", "--track", "detection", "--slides", 4, "--patches", 8, "--seed", 1, "--out", b) == 0
    assert len(load_manifest(a)) == 32
    assert a.read_bytes() == b.read_bytes()
    for img in sorted((tmp_path / "a" / "images").iterdir()):
        assert img.read_bytes() == (tmp_path / "b" / "images" / img.name).read_bytes()


def test_usage_errors_exit_2(tmp_path, capsys):
    assert run("synth", "--track", "detection") == 2
    assert run("frobnicate") == 2
    assert run("split", "--manifest", tmp_path / "missing.jsonl", "--out", tmp_path / "p.json") == 2
    assert run("infer", "--runs", tmp_path / "empty", "--out", tmp_path / "o.csv") == 2
    assert "no trained run" in capsys.readouterr().err


def test_split_writes_valid_plan(tmp_path, det_manifest_file):
    out = tmp_path / "plan.json"
    assert run("split", "--manifest", det_manifest_file, "--k", 4, "--out", out) == 0
    plan = FoldPlan.load(out)
    manifest = load_manifest(det_manifest_file)
    plan.check(manifest)
    assert plan.k == 4
    assert (plan.strat_key, plan.group_key) == ("tissue_domain", "none")
    # 32 records, 4 domains: the one-per-stratum floor beats round(0.1 * 32) = 3
    assert len(plan.test_ids) == 4


def test_split_too_many_folds_exits_2(tmp_path, capsys):
    m = tmp_path / "m.jsonl"
    run("synth", "--track", "classification", "--slides", 10, "--patches", 2, "--image-size", 32,
        "--positive-rate", 0.5, "--out", m)
    assert run("split", "--manifest", m, "--k", 20, "--out", tmp_path / "p.json") == 2
    assert "distinct groups" in capsys.readouterr().err


def test_classification_eval_by_domain_and_report(tmp_path, capsys):
    m = tmp_path / "m.jsonl"
    run("synth", "--track", "classification", "--slides", 8, "--patches", 4, "--image-size", 32,
        "--positive-rate", 0.3, "--out", m)
    manifest = load_manifest(m)
    rows = [(r.patch_id, 0.8 if r.class_label else 0.2, r.domain_id) for r in manifest]
    preds = tmp_path / "preds.csv"
    write_classification_predictions(preds, rows)
    out = tmp_path / "report"
    assert run("eval", "--predictions", preds, "--manifest", m, "--by-domain", "--out", out) == 0
    report = json.loads((out / "report.json").read_text())
    assert sorted(report["domains"]) == ["0", "1", "2", "3"]
    assert report["overall"]["balanced_accuracy"] == 1.0
    table = (out / "report.txt").read_text().splitlines()
    assert [line.split()[0] for line in table if line[:1].isdigit() or line.startswith("Overall")] == \
        ["0", "1", "2", "3", "Overall"]
    capsys.readouterr()
    assert run("report", "--report", out / "report.json") == 0
    assert "Overall" in capsys.readouterr().out


def test_detection_train_infer_eval(tmp_path, det_manifest_file, monkeypatch):
    plan = tmp_path / "plan.json"
    assert run("split", "--manifest", det_manifest_file, "--k", 2, "--out", plan) == 0
    cfg = RunConfig.for_track("detection")
    cfg.model = SegModelConfig(encoder_channels=[4, 8, 16], input_size=128)
    cfg.train.max_epochs = 2
    cfg.ensemble_k = 2
    cfg_path = tmp_path / "cfg.json"
    cfg.save(cfg_path)
    monkeypatch.setenv("MITODETECT_RUN_ROOT", str(tmp_path / "runs"))
    assert run("train", "--config", cfg_path, "--manifest", det_manifest_file, "--plan", plan, "--fold", 0) == 0
    fold0 = tmp_path / "runs" / "fold0"
    assert (fold0 / "config.json").is_file()
    assert (fold0 / "metrics" / "summary.json").is_file()
    ledger = json.loads((fold0 / "ledger.json").read_text())
    assert ledger["stop_reason"] == "reached max_epochs=2"
    assert sorted(p.name for p in (fold0 / "checkpoints").iterdir()) == \
        ["fold0_epoch0001.pt", "fold0_epoch0002.pt"]

    preds = tmp_path / "det.csv"
    assert run("infer", "--runs", tmp_path / "runs", "--plan", plan, "--out", preds) == 0
    assert preds.read_text().splitlines()[0] == "patch_id,x,y,score"
    out = tmp_path / "eval"
    assert run("eval", "--predictions", preds, "--manifest", det_manifest_file, "--plan", plan,
               "--out", out) == 0
    scores = json.loads((out / "detection.json").read_text())
    assert scores["tp"] + scores["fn"] == sum(
        len(r.centroids) for r in load_manifest(det_manifest_file) if r.patch_id in FoldPlan.load(plan).test_ids
    )


def test_train_requires_plan(tmp_path, det_manifest_file):
    assert run("train", "--manifest", det_manifest_file) == 2


@pytest.mark.parametrize("bad_fold", [5, -1])
def test_train_fold_out_of_range(tmp_path, det_manifest_file, bad_fold):
    plan = tmp_path / "plan.json"
    run("split", "--manifest", det_manifest_file, "--k", 2, "--out", plan)
    assert run("train", "--manifest", det_manifest_file, "--plan", plan, "--fold", bad_fold,
               "--run-root", tmp_path / "r") == 2
