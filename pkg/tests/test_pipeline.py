import json

import numpy as np
import pandas as pd
import pytest
import torch
from click.testing import CliRunner

from necroseg.benchmark import run_benchmark, summarize
from necroseg.classifier import finetune_lora
from necroseg.cli import cli
from necroseg.configuration.configuration import load_config
from necroseg.core.ledger import RunLedger
from necroseg.core.workspace import Workspace
from necroseg.evaluate import run_evaluate, run_report
from necroseg.exceptions import FrozenBaseError, MissingArtifactError
from necroseg.generate import run_generate
from necroseg.infer import run_infer
from necroseg.synthgen import read_labels
from necroseg.train import run_train_classifier, run_train_refiner
from necroseg.validate import run_validation


@pytest.fixture(scope="module")
def finished_run(test_data_dir, tmp_path_factory):
    """Every pipeline stage of the tiny experiment, in order"""
    root = tmp_path_factory.mktemp("run") / "workspace"
    config = load_config(test_data_dir / "tiny_config.yaml").update({"paths.workspace": str(root)})
    run_generate(config)
    run_validation(config.workspace, datasets=(), schema=None, markdown=False, verbose=False)
    run_train_classifier(config)
    run_train_refiner(config)
    run_infer(config)
    run_evaluate(config)
    return config, Workspace(root)


def test_generate_layout(finished_run):
    config, ws = finished_run
    assert len(list(ws.wsi_dir("source").glob("*.json"))) == 1
    assert len(list(ws.wsi_dir("train").glob("*.json"))) == 2
    assert sorted(p.name for p in ws.wsi_dir("eval").glob("*.json")) == ["eval_00.json"]
    for name in ("source", "patches"):
        for split in ("train", "valid", "test"):
            assert ws.manifest(name, split).exists()
    assert ws.manifest("regions", "train").exists()
    assert (ws.reports / "class_distribution.csv").exists()


def test_checkpoints_and_predictions(finished_run):
    _, ws = finished_run
    assert ws.classifier_lora.stat().st_size < ws.classifier_base.stat().st_size
    assert ws.refiner.exists()
    coarse = read_labels(ws.prediction("eval_00", "coarse"))
    refined = read_labels(ws.prediction("eval_00", "refined"))
    assert coarse.shape == refined.shape == (64, 64)
    assert refined.max() <= 6
    # coarse rasters are constant on every patch footprint
    for r in range(0, 64, 8):
        for c in range(0, 64, 8):
            assert np.all(coarse[r:r + 8, c:c + 8] == coarse[r, c])


def test_evaluation_outputs(finished_run):
    _, ws = finished_run
    with open(ws.reports / "metrics.json") as fh:
        metrics = json.load(fh)
    assert metrics["policy"] == "present"
    assert set(metrics["overall"]) == {"coarse", "refined"}
    for method in ("coarse", "refined"):
        scores = metrics["overall"][method]["scores"]
        for key in ("miou", "precision", "recall"):
            assert 0.0 <= scores[key] <= 1.0
    for name in ("segmentation.csv", "necrosis.csv", "summary.csv"):
        assert (ws.reports / name).exists()
    assert (ws.figures / "eval_00.png").exists()


def test_ledger(finished_run):
    config, ws = finished_run
    ledger = RunLedger(ws.ledger)
    curves = ledger.curves("refiner")
    assert len(curves) == config.refiner.train_steps
    np.testing.assert_allclose(
        curves["l_ref"], curves["l_trans"] + config.refiner.lam * curves["l_seg"], rtol=1e-5
    )
    assert len(ledger.curves("pretrain")) == config.classifier.pretrain_epochs
    assert ledger.latest_artifact("refiner")["path"] == str(ws.refiner)
    assert ledger.latest_artifact("coarse")["path"] == str(ws.prediction("eval_00", "coarse"))
    configs = [e for e in ledger.entries if e["kind"] == "config"]
    assert configs and all(e["config"]["seed"] == 5 for e in configs)


def test_coarse_cache_hit_on_rerun(finished_run):
    config, ws = finished_run
    run_train_refiner(config)
    hits = [
        e["value"]
        for e in RunLedger(ws.ledger).entries
        if e["kind"] == "metric" and e["name"] == "coarse_cache_hit"
    ]
    assert hits[0] is False
    assert hits[-1] is True
    assert len(list(ws.coarse_cache.glob("*.bin"))) == 1


def test_report(finished_run, capsys):
    config, _ = finished_run
    summary = run_report(config, markdown=True)
    assert list(summary.index) == ["coarse", "refined"]
    out = capsys.readouterr().out
    assert "## Segmentation" in out
    assert "## Class distribution" in out


def test_cli_run_is_reproducible(finished_run, test_data_dir, tmp_path):
    config, ws = finished_run
    args = ["-c", str(test_data_dir / "tiny_config.yaml"), "-w", str(tmp_path / "again")]
    runner = CliRunner()
    for command in ("generate", "train-classifier", "train-refiner", "infer", "evaluate"):
        result = runner.invoke(cli, args + [command])
        assert result.exit_code == 0, result.output
    again = Workspace(tmp_path / "again")
    assert (again.reports / "metrics.json").read_bytes() == (ws.reports / "metrics.json").read_bytes()
    np.testing.assert_array_equal(
        read_labels(again.prediction("eval_00", "refined")), read_labels(ws.prediction("eval_00", "refined"))
    )


def test_infer_thread_count_does_not_change_output(finished_run, tmp_path):
    config, ws = finished_run
    reference = read_labels(ws.prediction("eval_00", "refined"))
    config.update({"threads": 3})
    try:
        run_infer(config)
    finally:
        config.update({"threads": 1})
    np.testing.assert_array_equal(read_labels(ws.prediction("eval_00", "refined")), reference)


def test_cli_missing_artifact(test_data_dir, tmp_path):
    args = ["-c", str(test_data_dir / "tiny_config.yaml"), "-w", str(tmp_path / "empty")]
    result = CliRunner().invoke(cli, args + ["train-refiner"])
    assert result.exit_code == 3
    result = CliRunner().invoke(cli, args + ["evaluate"])
    assert result.exit_code == 3


def test_cli_bad_config(test_data_dir, tmp_path):
    args = ["-w", str(tmp_path / "ws")]
    result = CliRunner().invoke(cli, ["-c", str(test_data_dir / "bad_geometry.yaml")] + args + ["generate"])
    assert result.exit_code == 2
    result = CliRunner().invoke(cli, ["-c", str(test_data_dir / "unknown_key.yaml")] + args + ["generate"])
    assert result.exit_code == 2


def test_run_infer_unreadable_slide(finished_run, tmp_path):
    config, _ = finished_run
    bogus = tmp_path / "bogus.png"
    bogus.write_text("not an image")
    with pytest.raises(MissingArtifactError):
        run_infer(config, wsi=[bogus])


def test_summary_matches_metrics(finished_run):
    _, ws = finished_run
    with open(ws.reports / "metrics.json") as fh:
        overall = json.load(fh)["overall"]
    summary = pd.read_csv(ws.reports / "summary.csv").set_index("method")
    assert list(summary.columns) == ["mIOU", "Precision", "Recall", "TNR diff"]
    for method in ("coarse", "refined"):
        assert summary.loc[method, "mIOU"] == pytest.approx(overall[method]["scores"]["miou"])
        assert summary.loc[method, "Recall"] == pytest.approx(overall[method]["scores"]["recall"])


def test_frozen_base_change_is_fatal(tiny_config, monkeypatch):
    run_generate(tiny_config)

    def finetune_and_touch_backbone(model, *args, **kwargs):
        result = finetune_lora(model, *args, **kwargs)
        frozen = next(p for _, p in model.named_parameters() if not p.requires_grad)
        with torch.no_grad():
            frozen.add_(1.0)
        return result

    monkeypatch.setattr("necroseg.train.finetune_lora", finetune_and_touch_backbone)
    with pytest.raises(FrozenBaseError):
        run_train_classifier(tiny_config)
    assert not Workspace(tiny_config.workspace).classifier_lora.exists()


def test_benchmark(finished_run, test_data_dir, tmp_path):
    _, ws = finished_run
    config = load_config(test_data_dir / "tiny_config.yaml").update({"paths.workspace": str(tmp_path / "bench")})
    table = run_benchmark(config, seeds=(5, 6))
    bench = Workspace(tmp_path / "bench")

    assert list(table.index) == [5, 6]
    np.testing.assert_allclose(table["mIOU gain"], table["refined mIOU"] - table["coarse mIOU"])
    # seed 5 reproduces the single run of the same config
    assert (bench.seed_run(5) / "reports" / "metrics.json").read_bytes() == (ws.reports / "metrics.json").read_bytes()
    assert (bench.seed_run(6) / "reports" / "metrics.json").exists()

    with open(bench.reports / "benchmark.json") as fh:
        result = json.load(fh)
    checks = result["checks"]
    assert checks["n_seeds"] == 2
    assert checks["miou_gain_pp"] == pytest.approx(100 * table["mIOU gain"].mean())
    assert checks["miou_gain_ok"] == (checks["miou_gain_pp"] >= 1.0)
    assert checks["tnr_not_worse"] in (True, False, None)
    assert [row["seed"] for row in result["seeds"]] == [5, 6]
    assert (bench.reports / "benchmark.csv").exists()

    ledger = RunLedger(bench.ledger)
    names = {e["name"] for e in ledger.entries if e["kind"] == "metric" and e["stage"] == "benchmark"}
    assert {"mIOU gain", "miou_gain_pp", "tnr_not_worse"} <= names
    assert ledger.latest_artifact("benchmark") is not None


def test_benchmark_summary():
    table = pd.DataFrame(
        {
            "coarse mIOU": [0.40, 0.50],
            "refined mIOU": [0.42, 0.51],
            "mIOU gain": [0.02, 0.01],
            "coarse TNR diff": [0.10, float("nan")],
            "refined TNR diff": [0.05, float("nan")],
        },
        index=pd.Index([1, 2], name="seed"),
    )
    checks = summarize(table, min_gain_pp=1.0)
    assert checks["miou_gain_pp"] == pytest.approx(1.5)
    assert checks["miou_gain_ok"] is True
    assert checks["tnr_not_worse"] is True
    assert summarize(table, min_gain_pp=2.0)["miou_gain_ok"] is False
    table["refined TNR diff"] = [0.2, float("nan")]
    assert summarize(table, min_gain_pp=1.0)["tnr_not_worse"] is False
