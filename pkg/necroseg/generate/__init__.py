from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Dict, List
import warnings

import pandas as pd
from rich.console import Console
from rich.table import Table

from necroseg.core import derive_seed, logger
from necroseg.core.ledger import RunLedger
from necroseg.core.workspace import Workspace, open_run
from necroseg.synthgen import (
    SPLITS,
    DatasetManifest,
    SyntheticWsi,
    class_distribution_table,
    derive_patch_dataset,
    derive_region_dataset,
    generate_wsi,
    merge_manifests,
    save_wsi,
)

# seed stream index of each slide group
WSI_GROUP_STREAMS = {"source": 0, "train": 1, "eval": 2}


def wsi_specs(config) -> List[dict]:
    """Seed, texture and identifier of every slide of an experiment"""
    gen = config.generator
    counts = {"source": gen.n_source, "train": gen.n_train, "eval": gen.n_eval}
    specs = []
    for group, n in counts.items():
        texture = gen.source_texture if group == "source" else gen.texture
        for i in range(n):
            specs.append(
                {
                    "group": group,
                    "seed": derive_seed(config.seed, WSI_GROUP_STREAMS[group], i),
                    "texture": texture,
                    "wsi_id": f"{group}_{i:02d}",
                }
            )
    return specs


def generate_slides(config, workspace: Workspace) -> Dict[str, List[SyntheticWsi]]:
    """Generate and save every slide, fanning out over config.threads workers"""
    specs = wsi_specs(config)
    geometry = config.geometry

    def make(spec):
        wsi = generate_wsi(
            spec["seed"],
            geometry.wsi_height,
            geometry.wsi_width,
            config.generator.class_freqs,
            texture=spec["texture"],
            wsi_id=spec["wsi_id"],
            region_size=geometry.region,
        )
        save_wsi(wsi, workspace.wsi_dir(spec["group"]))
        return wsi

    with ThreadPoolExecutor(max_workers=config.threads) as pool:
        slides = list(pool.map(make, specs))
    grouped = {group: [] for group in WSI_GROUP_STREAMS}
    for spec, wsi in zip(specs, slides):
        grouped[spec["group"]].append(wsi)
    return grouped


def _save_split_manifests(per_wsi: List[Dict[str, DatasetManifest]], workspace: Workspace, name: str) -> Dict[str, DatasetManifest]:
    merged = {}
    for split in SPLITS:
        merged[split] = merge_manifests([m[split] for m in per_wsi])
        merged[split].save(workspace.manifest(name, split))
    return merged


def log_tree(ledger: RunLedger, directory: Path, role: str) -> None:
    for path in sorted(Path(directory).rglob("*")):
        if path.is_file():
            ledger.log_artifact(path, role)


def print_distribution(table: pd.DataFrame, title: str) -> None:
    rich_table = Table(title=title)
    rich_table.add_column(table.index.name or "")
    for column in table.columns:
        rich_table.add_column(str(column), justify="right")
    for name, row in table.iterrows():
        rich_table.add_row(str(name), *[f"{v:g}" for v in row.tolist()])
    Console().print(rich_table)


def run_generate(config, verbose=False, **kwargs) -> Dict[str, Dict[str, DatasetManifest]]:
    """Write the source, patch and region datasets and the evaluation slides

    Returns:
        Dict[str, Dict[str, DatasetManifest]]: manifests per dataset and split
    """
    if not verbose:
        warnings.filterwarnings("ignore")
    workspace, ledger = open_run(config, "generate")
    geometry = config.geometry
    splits = tuple(config.generator.splits)
    with ledger.timing("generate"):
        slides = generate_slides(config, workspace)
        manifests = {
            "source": _save_split_manifests(
                [
                    derive_patch_dataset(wsi, geometry.patch, workspace.dataset_dir("source"), splits, config.seed)
                    for wsi in slides["source"]
                ],
                workspace,
                "source",
            ),
            "patches": _save_split_manifests(
                [
                    derive_patch_dataset(wsi, geometry.patch, workspace.dataset_dir("patches"), splits, config.seed)
                    for wsi in slides["train"]
                ],
                workspace,
                "patches",
            ),
        }
        regions = merge_manifests(
            [
                derive_region_dataset(wsi, geometry.region, workspace.dataset_dir("regions"), geometry.patch)
                for wsi in slides["train"]
            ]
        )
        regions.save(workspace.manifest("regions", "train"))
        manifests["regions"] = {"train": regions}

    workspace.reports.mkdir(parents=True, exist_ok=True)
    table = class_distribution_table(manifests["patches"])
    table.to_csv(workspace.reports / "class_distribution.csv")
    print_distribution(class_distribution_table(manifests["source"]), "Source patch dataset")
    print_distribution(table, "Target patch dataset")

    log_tree(ledger, workspace.data, "data")
    ledger.log_artifact(workspace.reports / "class_distribution.csv", "report")
    for name, by_split in manifests.items():
        sizes = ", ".join(f"{split} {len(m)}" for split, m in by_split.items())
        logger.info(f"{name}: {sizes}")
    return manifests
