from pathlib import Path
from typing import Dict, Optional
import json
import warnings

import numpy as np
import pandas as pd
from rich.console import Console
from rich.table import Table

from necroseg.core import logger
from necroseg.core.workspace import Workspace, open_run, require
from necroseg.evaluate.figures import comparison_figure
from necroseg.exceptions import MissingArtifactError, UndefinedRateError
from necroseg.metrics import (
    ConfusionMatrix,
    NecrosisReport,
    confusion,
    scores_table,
    segmentation_metrics,
    tnr_report,
)
from necroseg.synthgen import read_labels, read_rgb

METHODS = ("coarse", "refined")


def evaluate_slide(gt: np.ndarray, predictions: Dict[str, np.ndarray], policy: str) -> dict:
    """Scores and necrosis report of every method on one slide"""
    result = {}
    for method, pred in predictions.items():
        cm = confusion(pred, gt)
        entry = {"confusion": cm, "scores": segmentation_metrics(cm, policy), "necrosis": None}
        try:
            entry["necrosis"] = tnr_report(pred, gt)
        except UndefinedRateError as e:
            logger.warning(f"Skipping necrosis rate: {e.message}")
        result[method] = entry
    return result


def _necrosis_row(wsi_id: str, method: str, report: Optional[NecrosisReport]) -> dict:
    row = {"wsi": wsi_id, "method": method}
    if report is not None:
        row.update(report.to_row())
    return row


def run_evaluate(config, verbose=False, **kwargs) -> Path:
    """Score coarse and refined rasters of every evaluation slide

    Returns:
        Path: metrics JSON
    """
    if not verbose:
        warnings.filterwarnings("ignore")
    workspace, ledger = open_run(config, "evaluate")
    policy = config.evaluation.policy
    sidecars = sorted(workspace.wsi_dir("eval").glob("*.json"))
    if not sidecars:
        raise MissingArtifactError(f"No evaluation slides in {workspace.wsi_dir('eval')}, run `necroseg generate` first")

    totals = {method: ConfusionMatrix() for method in METHODS}
    per_wsi = {}
    seg_rows, necro_rows = [], []
    for sidecar in sidecars:
        wsi_id = sidecar.stem
        gt = read_labels(sidecar.with_name(f"{wsi_id}_labels.png"))
        predictions = {
            method: read_labels(require(workspace.prediction(wsi_id, method), "infer")) for method in METHODS
        }
        result = evaluate_slide(gt, predictions, policy)
        per_wsi[wsi_id] = {}
        for method, entry in result.items():
            totals[method] = totals[method] + entry["confusion"]
            scores = entry["scores"]
            per_wsi[wsi_id][method] = {
                "scores": scores.to_dict(),
                "necrosis": entry["necrosis"].to_dict() if entry["necrosis"] is not None else None,
            }
            seg_rows.append(
                {"wsi": wsi_id, "method": method, "mIOU": scores.miou, "Precision": scores.precision, "Recall": scores.recall}
            )
            necro_rows.append(_necrosis_row(wsi_id, method, entry["necrosis"]))
        if config.evaluation.figures:
            figure = comparison_figure(
                read_rgb(sidecar.with_suffix(".png")),
                gt,
                predictions["coarse"],
                predictions["refined"],
                workspace.figures / f"{wsi_id}.png",
                title=wsi_id,
            )
            ledger.log_artifact(figure, "figure")

    necrosis = pd.DataFrame(necro_rows)
    overall_scores, tnr_diffs, overall = {}, {}, {}
    for method in METHODS:
        scores = segmentation_metrics(totals[method], policy)
        diffs = necrosis.loc[necrosis["method"] == method, "abs_diff"] if "abs_diff" in necrosis else pd.Series(dtype=float)
        tnr_diffs[method] = float(diffs.mean()) if diffs.notna().any() else None
        overall_scores[method] = scores
        overall[method] = {"scores": scores.to_dict(), "tnr_abs_diff": tnr_diffs[method]}
        for name, value in (("miou", scores.miou), ("precision", scores.precision), ("recall", scores.recall)):
            ledger.log_metric("evaluate", name, value, method=method)

    reports = workspace.reports
    reports.mkdir(parents=True, exist_ok=True)
    metrics_path = reports / "metrics.json"
    with open(metrics_path, "w") as fw:
        json.dump({"policy": policy, "wsis": per_wsi, "overall": overall}, fw, indent=1, sort_keys=True)
    pd.DataFrame(seg_rows).to_csv(reports / "segmentation.csv", index=False)
    necrosis.to_csv(reports / "necrosis.csv", index=False)
    summary = scores_table(overall_scores, tnr_diffs)
    summary.to_csv(reports / "summary.csv")
    for name in ("metrics.json", "segmentation.csv", "necrosis.csv", "summary.csv"):
        ledger.log_artifact(reports / name, "report")
    print_summary(summary)
    return metrics_path


def _fmt(value) -> str:
    if value is None or (isinstance(value, float) and value != value):
        return "-"
    if isinstance(value, float):
        return f"{100 * value:.2f}"
    return str(value)


def print_summary(table: pd.DataFrame, title: str = "Segmentation and necrosis rate (%)") -> None:
    rich_table = Table(title=title)
    rich_table.add_column(table.index.name or "")
    for column in table.columns:
        rich_table.add_column(str(column), justify="right")
    for name, row in table.iterrows():
        rich_table.add_row(str(name), *[_fmt(v) for v in row.tolist()])
    Console().print(rich_table)


def run_report(config, markdown=False, verbose=False, **kwargs) -> pd.DataFrame:
    """Print the tables written by evaluate, as rich tables or markdown"""
    workspace = Workspace(config.workspace)
    summary = pd.read_csv(require(workspace.reports / "summary.csv", "evaluate")).set_index("method")
    necrosis = pd.read_csv(require(workspace.reports / "necrosis.csv", "evaluate"))
    distribution_path = workspace.reports / "class_distribution.csv"
    if markdown:
        print("## Segmentation\n")
        print(summary.to_markdown())
        print("\n## Necrosis rate per slide\n")
        print(necrosis.to_markdown(index=False))
        if distribution_path.exists():
            print("\n## Class distribution\n")
            print(pd.read_csv(distribution_path, index_col=0).to_markdown())
    else:
        print_summary(summary)
        print_summary(necrosis.set_index(["wsi", "method"]).reset_index(level=1), "Necrosis rate per slide (%)")
    return summary
