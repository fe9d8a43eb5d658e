"""Refinement benefit over several seeds

Each seed runs the whole pipeline in its own workspace under ``seeds/``. The
benchmark then compares refined against coarse rasters on the held-out slides:
the mean mIOU gain in percentage points, and whether refinement brings the
necrosis rate closer to the reference on average.
"""
from pathlib import Path
from typing import Iterable, Optional
import json
import math
import warnings

import pandas as pd

from necroseg.configuration.configuration import ExperimentConfig
from necroseg.core import logger, seed_everything
from necroseg.core.workspace import open_run, require
from necroseg.evaluate import print_summary, run_evaluate
from necroseg.generate import run_generate
from necroseg.infer import run_infer
from necroseg.train import run_train_classifier, run_train_refiner

COLUMNS = ["coarse mIOU", "refined mIOU", "mIOU gain", "coarse TNR diff", "refined TNR diff"]


def seed_config(config, seed: int, root: Path) -> ExperimentConfig:
    """Copy of the experiment with another seed and workspace"""
    return ExperimentConfig.from_dict(config.to_dict()).update({"seed": seed, "paths.workspace": str(root)})


def run_seed(config, verbose=False) -> Path:
    """Full pipeline of one seed

    Returns:
        Path: metrics JSON of the seed
    """
    seed_everything(config.seed)
    run_generate(config, verbose=verbose)
    run_train_classifier(config, verbose=verbose)
    run_train_refiner(config, verbose=verbose)
    run_infer(config, verbose=verbose)
    return run_evaluate(config, verbose=verbose)


def _nan(value: Optional[float]) -> float:
    return math.nan if value is None else float(value)


def seed_row(metrics_path: Path) -> dict:
    with open(require(metrics_path, "evaluate")) as fh:
        overall = json.load(fh)["overall"]
    coarse, refined = overall["coarse"], overall["refined"]
    return {
        "coarse mIOU": coarse["scores"]["miou"],
        "refined mIOU": refined["scores"]["miou"],
        "mIOU gain": refined["scores"]["miou"] - coarse["scores"]["miou"],
        "coarse TNR diff": _nan(coarse["tnr_abs_diff"]),
        "refined TNR diff": _nan(refined["tnr_abs_diff"]),
    }


def summarize(table: pd.DataFrame, min_gain_pp: float) -> dict:
    """Mean mIOU gain and TNR comparison over the seeds of a benchmark table"""
    mean = table[COLUMNS].mean()
    gain_pp = 100 * float(mean["mIOU gain"])
    tnr = table[["coarse TNR diff", "refined TNR diff"]].dropna()
    tnr_not_worse = None
    if len(tnr):
        tnr_not_worse = bool(tnr["refined TNR diff"].mean() <= tnr["coarse TNR diff"].mean())
    return {
        "n_seeds": int(len(table)),
        "miou_gain_pp": gain_pp,
        "min_gain_pp": float(min_gain_pp),
        "miou_gain_ok": bool(gain_pp >= min_gain_pp),
        "tnr_not_worse": tnr_not_worse,
    }


def run_benchmark(
    config,
    seeds: Optional[Iterable[int]] = None,
    n_seeds: int = 3,
    min_gain: float = 1.0,
    verbose=False,
    **kwargs,
) -> pd.DataFrame:
    """Run the pipeline for several seeds and compare refined with coarse masks

    Args:
        config (ExperimentConfig): experiment, its workspace holds the per-seed runs
        seeds (Iterable[int]): seeds to run, default the config seed and the next n_seeds - 1
        n_seeds (int): number of seeds when none are given
        min_gain (float): required mean mIOU gain of refinement, in percentage points
    Returns:
        pd.DataFrame: one row per seed, fractions, indexed by seed
    """
    if not verbose:
        warnings.filterwarnings("ignore")
    seeds = list(seeds) if seeds else [config.seed + i for i in range(n_seeds)]
    workspace, ledger = open_run(config, "benchmark")

    rows = []
    for seed in seeds:
        run_config = seed_config(config, seed, workspace.seed_run(seed))
        logger.info(f"benchmark: seed {seed} in {run_config.workspace}")
        with ledger.timing(f"seed_{seed}"):
            metrics_path = run_seed(run_config, verbose=verbose)
        row = seed_row(metrics_path)
        ledger.log_artifact(metrics_path, "seed-metrics")
        for name, value in row.items():
            ledger.log_metric("benchmark", name, None if math.isnan(value) else value, seed=seed)
        rows.append({"seed": seed, **row})

    table = pd.DataFrame(rows).set_index("seed")
    checks = summarize(table, min_gain)
    for name, value in checks.items():
        ledger.log_metric("benchmark", name, value)

    reports = workspace.reports
    reports.mkdir(parents=True, exist_ok=True)
    table.to_csv(reports / "benchmark.csv")
    with open(reports / "benchmark.json", "w") as fw:
        per_seed = [{k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in row.items()} for row in rows]
        json.dump({"seeds": per_seed, "checks": checks}, fw, indent=1, sort_keys=True)
    for name in ("benchmark.csv", "benchmark.json"):
        ledger.log_artifact(reports / name, "benchmark")

    shown = table.copy()
    shown.index = shown.index.astype(str)
    shown.loc["mean"] = table[COLUMNS].mean()
    print_summary(shown, "Coarse versus refined over seeds (%)")
    if not checks["miou_gain_ok"]:
        logger.warning(
            f"Mean mIOU gain of refinement is {checks['miou_gain_pp']:.2f} pp, below {min_gain:.2f} pp"
        )
    if checks["tnr_not_worse"] is False:
        logger.warning("Refinement moved the necrosis rate further from the reference on average")
    return table
