import json

import numpy as np
import pytest

from meltriage import seeds
from meltriage.aggregator import attention_weights, forward, load_checkpoint
from meltriage.cli import run
from meltriage.evaluation import read_predictions
from meltriage.manifest import load_case_bag, load_manifest
from meltriage.splits import Partition, cases_on_side, split_patients


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """One small end-to-end run shared by the artifact checks."""
    root = tmp_path_factory.mktemp("pipeline")
    data = root / "data"
    models = root / "models"
    preds = root / "predictions.csv"
    evaldir = root / "eval"
    simdir = root / "sim"

    assert run([
        "synth", "--out", str(data), "--patients", "60",
        "--prevalence", "0.3", "--separation", "8.0", "--seed", "0",
    ]) == 0
    manifest = data / "manifest.json"
    assert run([
        "train-ensemble", "--manifest", str(manifest), "--out", str(models),
        "--iterations", "120", "--accumulation", "4",
        "--validation-period", "40", "--folds", "2", "--seed", "0",
    ]) == 0
    assert run([
        "predict", "--manifest", str(manifest), "--checkpoints", str(models),
        "--subset", "test", "--out", str(preds), "--seed", "0",
    ]) == 0
    assert run([
        "evaluate", "--predictions", str(preds), "--out", str(evaldir),
        "--bootstrap", "50", "--seed", "0",
    ]) == 0
    assert run([
        "simulate", "--predictions", str(preds), "--out", str(simdir),
        "--iterations", "300", "--seed", "0",
    ]) == 0
    return {
        "root": root,
        "data": data,
        "manifest": manifest,
        "models": models,
        "preds": preds,
        "evaldir": evaldir,
        "simdir": simdir,
    }


def test_pipeline_artifacts_exist(pipeline):
    for fold in (0, 1):
        assert (pipeline["models"] / f"fold_{fold}.ckpt").is_file()
        assert (pipeline["models"] / f"history_fold_{fold}.csv").is_file()
    assert pipeline["preds"].is_file()
    for name in ("report.json", "roc_points.csv", "pr_points.csv",
                 "calibration.csv"):
        assert (pipeline["evaldir"] / name).is_file()
    assert (pipeline["simdir"] / "report.json").is_file()
    assert (pipeline["simdir"] / "counts.csv").is_file()


def test_pipeline_predictions_cover_test_subset(pipeline):
    sset = read_predictions(pipeline["preds"])
    cases = load_manifest(pipeline["manifest"])
    split = split_patients(cases, 0.2, seeds.derive(0, "split"))
    expected = cases_on_side(cases, split, Partition.TEST)
    assert list(sset.case_ids) == [c.case_id for c in expected]
    assert sset.scores.min() >= 0.0 and sset.scores.max() <= 1.0
    assert set(np.unique(sset.labels)) == {0, 1}


def test_pipeline_reports_parse(pipeline):
    report = json.loads((pipeline["evaldir"] / "report.json").read_text())
    sset = read_predictions(pipeline["preds"])
    assert report["n"] == sset.n
    assert report["bootstrap_replicates"] == 50
    assert 0.0 <= report["auroc"]["point"] <= 1.0
    assert report["auroc"]["lower"] <= report["auroc"]["upper"]
    sim = json.loads((pipeline["simdir"] / "report.json").read_text())
    assert sim["iterations"] == 300
    assert set(sim["baseline"]) == {"expert", "general"}


def test_predict_is_deterministic(pipeline):
    again = pipeline["root"] / "predictions_again.csv"
    assert run([
        "predict", "--manifest", str(pipeline["manifest"]),
        "--checkpoints", str(pipeline["models"]),
        "--subset", "test", "--out", str(again), "--seed", "0",
    ]) == 0
    a = pipeline["preds"].read_text()
    b = again.read_text()
    # only the self-reported output path may differ
    assert [l for l in a.splitlines() if not l.startswith("#")] == [
        l for l in b.splitlines() if not l.startswith("#")
    ]


def test_single_checkpoint_predict_matches_forward(pipeline):
    single = pipeline["root"] / "predictions_single.csv"
    ckpt = pipeline["models"] / "fold_0.ckpt"
    assert run([
        "predict", "--manifest", str(pipeline["manifest"]),
        "--checkpoints", str(ckpt),
        "--subset", "test", "--out", str(single), "--seed", "0",
    ]) == 0
    sset = read_predictions(single)
    params, config, _ = load_checkpoint(ckpt)
    cases = {c.case_id: c for c in load_manifest(pipeline["manifest"])}
    for case_id, prob in zip(sset.case_ids, sset.scores):
        bag = load_case_bag(cases[case_id], pipeline["data"])
        assert forward(params, config, bag).prob_high == prob


def test_attention_command_matches_library(pipeline):
    sset = read_predictions(pipeline["preds"])
    case_id = sset.case_ids[0]
    out = pipeline["root"] / "attention.csv"
    ckpt = pipeline["models"] / "fold_0.ckpt"
    assert run([
        "attention", "--manifest", str(pipeline["manifest"]),
        "--checkpoint", str(ckpt), "--case-id", case_id, "--out", str(out),
    ]) == 0
    cases = {c.case_id: c for c in load_manifest(pipeline["manifest"])}
    bag = load_case_bag(cases[case_id], pipeline["data"])
    params, config, _ = load_checkpoint(ckpt)
    expected = attention_weights(params, config, bag)
    rows = [
        line.split(",")
        for line in out.read_text().splitlines()
        if not line.startswith("#")
    ]
    assert rows[0] == ["slide_id", "grid_x", "grid_y", "section_id", "weight"]
    weights = np.array([float(r[4]) for r in rows[1:]])
    np.testing.assert_array_equal(weights, expected)
    assert rows[1][0] == bag.slide_ids[0]
    assert run([
        "attention", "--manifest", str(pipeline["manifest"]),
        "--checkpoint", str(ckpt), "--case-id", "NOPE", "--out", str(out),
    ]) == 1


def test_train_single_fold_writes_history(pipeline, tmp_path):
    ckpt = tmp_path / "fold.ckpt"
    history = tmp_path / "history.csv"
    assert run([
        "train", "--manifest", str(pipeline["manifest"]),
        "--fold", "0", "--out", str(ckpt), "--history", str(history),
        "--iterations", "40", "--accumulation", "4",
        "--validation-period", "20", "--folds", "2", "--seed", "0",
    ]) == 0
    _, _, meta = load_checkpoint(ckpt)
    assert meta["fold_id"] == 0
    assert meta["train_config"]["total_iterations"] == 40
    lines = history.read_text().splitlines()
    data_rows = [l for l in lines if not l.startswith("#")]
    assert data_rows[0] == "iteration,validation_loss,lr"
    assert [int(r.split(",")[0]) for r in data_rows[1:]] == [20, 40]


def test_train_config_file_and_flag_precedence(pipeline, tmp_path):
    cfg = tmp_path / "train.cfg"
    cfg.write_text(
        "# training settings\n"
        "total_iterations = 40\n"
        "accumulation_steps = 2\n"
        "validation_period = 20\n"
        "base_lr = 0.01\n"
        "seed = 3\n"
    )
    ckpt = tmp_path / "from_file.ckpt"
    assert run([
        "train", "--manifest", str(pipeline["manifest"]),
        "--fold", "0", "--out", str(ckpt), "--config", str(cfg),
        "--folds", "2",
    ]) == 0
    _, _, meta = load_checkpoint(ckpt)
    assert meta["train_config"]["total_iterations"] == 40
    assert meta["train_config"]["base_lr"] == 0.01
    assert meta["train_config"]["seed"] == 3

    overridden = tmp_path / "overridden.ckpt"
    assert run([
        "train", "--manifest", str(pipeline["manifest"]),
        "--fold", "0", "--out", str(overridden), "--config", str(cfg),
        "--iterations", "20", "--seed", "5", "--folds", "2",
    ]) == 0
    _, _, meta = load_checkpoint(overridden)
    assert meta["train_config"]["total_iterations"] == 20
    assert meta["train_config"]["seed"] == 5
    assert meta["train_config"]["base_lr"] == 0.01

    bad = tmp_path / "bad.cfg"
    bad.write_text("no_such_knob = 1\n")
    assert run([
        "train", "--manifest", str(pipeline["manifest"]),
        "--fold", "0", "--out", str(ckpt), "--config", str(bad), "--folds", "2",
    ]) == 1


def test_evaluate_partition_flag(tmp_path):
    preds = tmp_path / "preds.csv"
    preds.write_text(
        "case_id,prob_high,label,tags\n"
        "A,0.9,high,scanner_b\n"
        "B,0.2,low,scanner_b\n"
        "C,0.8,high,\n"
        "D,0.1,low,\n"
    )
    out = tmp_path / "eval"
    assert run([
        "evaluate", "--predictions", str(preds), "--out", str(out),
        "--bootstrap", "20", "--partition", "scanner_b", "--seed", "0",
    ]) == 0
    part = out / "report_scanner_b.json"
    assert part.is_file()
    report = json.loads(part.read_text())
    assert report["partition_tag"] == "scanner_b"
    assert report["n"] == 2
    assert run([
        "evaluate", "--predictions", str(preds), "--out", str(out),
        "--bootstrap", "20", "--partition", "no_such_tag", "--seed", "0",
    ]) == 1


def test_exit_codes(tmp_path):
    assert run(["--help"]) == 0
    assert run([]) == 1
    assert run(["frobnicate"]) == 1
    assert run(["synth", "--out", str(tmp_path / "d"), "--patients", "0"]) == 1
    missing = tmp_path / "missing.csv"
    assert run([
        "evaluate", "--predictions", str(missing), "--out", str(tmp_path / "e"),
    ]) == 2
    empty = tmp_path / "empty.csv"
    empty.write_text("")
    assert run([
        "evaluate", "--predictions", str(empty), "--out", str(tmp_path / "e2"),
    ]) == 1
    no_ckpts = tmp_path / "no_models"
    no_ckpts.mkdir()
    assert run([
        "predict", "--manifest", str(tmp_path / "nope.json"),
        "--checkpoints", str(no_ckpts), "--out", str(tmp_path / "p.csv"),
    ]) == 1


def test_tessellate_command(tmp_path):
    from meltriage.tessellation import SegmentationMap, write_mask

    tissue = np.zeros((32, 32), dtype=bool)
    tissue[:16, :] = True
    # default 1.25x mask under the 20x target: every mask pixel spans
    # 16 slide pixels, so a 128px tile reads an 8x8 mask window
    smap = SegmentationMap(
        tissue=tissue, pen=np.zeros((32, 32), dtype=bool),
        mask_magnification=1.25,
    )
    mask_path = tmp_path / "mask.png"
    write_mask(smap, mask_path)
    plan_path = tmp_path / "plan.csv"
    assert run([
        "tessellate", "--mask", str(mask_path), "--extent", "512x512",
        "--tile-size", "128", "--min-coverage", "0.05",
        "--slide-id", "s1", "--out", str(plan_path),
    ]) == 0
    rows = [
        line for line in plan_path.read_text().splitlines()
        if not line.startswith("#")
    ]
    assert rows[0] == "slide_id,grid_x,grid_y,coverage,status"
    assert len(rows) == 1 + 16  # 4x4 grid of 128px tiles
    by_status = {"included": 0, "excluded_low_coverage": 0}
    for r in rows[1:]:
        by_status[r.split(",")[4]] += 1
    assert by_status == {"included": 8, "excluded_low_coverage": 8}
    assert run([
        "tessellate", "--mask", str(mask_path), "--extent", "512by512",
        "--tile-size", "128", "--out", str(plan_path),
    ]) == 1
