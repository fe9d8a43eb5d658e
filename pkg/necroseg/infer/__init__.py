from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Tuple
import warnings

import numpy as np
import torch
from PIL import UnidentifiedImageError
from rich.progress import track

from necroseg.classifier import TinyViT, classify_region, load_lora_checkpoint
from necroseg.core import PathLike, derive_seed, logger
from necroseg.core.tensorio import write_tensors
from necroseg.core.workspace import open_run, require
from necroseg.exceptions import MissingArtifactError
from necroseg.refiner import Refiner, load_refiner, refine_region
from necroseg.synthgen import read_rgb, write_labels
from necroseg.tiling import ProbMask, merge_regions, split_into_regions

# seed stream of the per-region sampling noise
STREAM_SAMPLING = 30


def infer_image(
    classifier: TinyViT,
    refiner: Refiner,
    image: np.ndarray,
    region_size: int,
    seed: int = 0,
    threads: int = 1,
) -> Tuple[np.ndarray, np.ndarray, List[ProbMask]]:
    """Coarse and refined label rasters of a slide image

    Every region gets its own sampling seed, so results do not depend on the
    number of workers.

    Returns:
        Tuple[np.ndarray, np.ndarray, List[ProbMask]]: coarse raster, refined raster and
        the refined region masks
    """
    grid, regions = split_into_regions(image, (region_size, region_size))
    coarse = [classify_region(classifier, region) for region in regions]

    def refine(index: int) -> ProbMask:
        return refine_region(
            refiner, coarse[index], regions[index], seed=derive_seed(seed, STREAM_SAMPLING, index)
        )

    with ThreadPoolExecutor(max_workers=threads) as pool:
        refined = list(
            track(pool.map(refine, range(grid.n_regions)), total=grid.n_regions, description="Refining regions")
        )
    return merge_regions(coarse, grid), merge_regions(refined, grid), refined


def _read_slide(path: Path) -> Tuple[str, np.ndarray]:
    """Identifier and RGB image of a slide given as PNG or JSON sidecar"""
    path = Path(path)
    if path.suffix == ".json":
        path = path.with_suffix(".png")
    try:
        return path.stem, read_rgb(path)
    except (UnidentifiedImageError, OSError) as e:
        raise MissingArtifactError(f"Cannot read slide image {path}: {e}")


def run_infer(config, wsi: Optional[Iterable[PathLike]] = None, verbose=False, **kwargs) -> Dict[str, Tuple[Path, Path]]:
    """Segment slides with the fine-tuned classifier and the refiner

    Args:
        config (ExperimentConfig): experiment configuration
        wsi (Iterable[PathLike]): slide PNGs or sidecars; the evaluation slides by default
    Returns:
        Dict[str, Tuple[Path, Path]]: coarse and refined raster paths per slide
    """
    if not verbose:
        warnings.filterwarnings("ignore")
    workspace, ledger = open_run(config, "infer")
    torch.set_num_threads(1)
    classifier = load_lora_checkpoint(require(workspace.classifier_lora, "train-classifier"))
    refiner = load_refiner(require(workspace.refiner, "train-refiner"))
    paths = list(wsi) if wsi else sorted(workspace.wsi_dir("eval").glob("*.json"))
    if not paths:
        raise MissingArtifactError(f"No slides to segment in {workspace.wsi_dir('eval')}, run `necroseg generate` first")

    outputs = {}
    with ledger.timing("infer"):
        for path in paths:
            wsi_id, image = _read_slide(path)
            coarse, refined, masks = infer_image(
                classifier,
                refiner,
                image,
                config.geometry.region,
                seed=config.seed,
                threads=config.threads,
            )
            coarse_path = workspace.prediction(wsi_id, "coarse")
            refined_path = workspace.prediction(wsi_id, "refined")
            write_labels(coarse, coarse_path)
            write_labels(refined, refined_path)
            ledger.log_artifact(coarse_path, "coarse")
            ledger.log_artifact(refined_path, "refined")
            if config.evaluation.save_probs:
                probs_path = workspace.inference / f"{wsi_id}_refined_probs.bin"
                write_tensors(
                    probs_path,
                    {f"region_{i:04d}": mask.values for i, mask in enumerate(masks)},
                    meta={"kind": "refined-probs", "wsi": wsi_id, "region": config.geometry.region},
                )
                ledger.log_artifact(probs_path, "refined-probs")
            logger.info(f"{wsi_id}: wrote {coarse_path.name} and {refined_path.name}")
            outputs[wsi_id] = (coarse_path, refined_path)
    return outputs
