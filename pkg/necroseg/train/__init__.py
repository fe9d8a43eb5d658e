from pathlib import Path
from typing import Tuple
import warnings

import numpy as np
import torch
from rich.progress import track

from necroseg.classifier import (
    classify_region,
    evaluate_accuracy,
    finetune_lora,
    frozen_checksum,
    init_classifier,
    inject_lora,
    load_lora_checkpoint,
    pretrain_base,
    save_base_checkpoint,
    save_lora_checkpoint,
)
from necroseg.core import derive_seed, logger, sha256_bytes, sha256_file
from necroseg.core.tensorio import read_tensors, write_tensors
from necroseg.core.workspace import Workspace, open_run, require
from necroseg.exceptions import EmptyDatasetError, FrozenBaseError
from necroseg.refiner import (
    Refiner,
    RegionBatch,
    downsample_region,
    save_refiner,
    train_refiner,
)
from necroseg.synthgen import (
    DatasetManifest,
    load_patch_arrays,
    load_region_mask,
    read_rgb,
)

# seed stream indices of the training stages
STREAM_CLASSIFIER_INIT = 10
STREAM_PRETRAIN = 11
STREAM_LORA_INIT = 12
STREAM_LORA = 13
STREAM_REFINER_INIT = 20
STREAM_REFINER = 21


def _load_split(workspace: Workspace, name: str, split: str) -> Tuple[np.ndarray, np.ndarray]:
    manifest = DatasetManifest.load(require(workspace.manifest(name, split), "generate"))
    return load_patch_arrays(manifest)


def run_train_classifier(config, verbose=False, **kwargs) -> Path:
    """Pretrain the ViT on the source family, then LoRA fine-tune it on the target family

    Returns:
        Path: the LoRA checkpoint
    """
    if not verbose:
        warnings.filterwarnings("ignore")
    workspace, ledger = open_run(config, "train-classifier")
    torch.set_num_threads(1)
    cc = config.classifier
    source_train = _load_split(workspace, "source", "train")
    source_valid = _load_split(workspace, "source", "valid")
    target_train = _load_split(workspace, "patches", "train")
    target_valid = _load_split(workspace, "patches", "valid")
    target_test = _load_split(workspace, "patches", "test")
    if len(source_train[1]) == 0 or len(target_train[1]) == 0:
        raise EmptyDatasetError("Training splits are empty, check the generator settings")

    with ledger.timing("pretrain"):
        model = init_classifier(cc.vit, derive_seed(config.seed, STREAM_CLASSIFIER_INIT))
        pretrain_base(
            model,
            *source_train,
            epochs=cc.pretrain_epochs,
            lr=cc.pretrain_lr,
            batch_size=cc.batch_size,
            seed=derive_seed(config.seed, STREAM_PRETRAIN),
            ledger=ledger,
        )
    if len(source_valid[1]):
        ledger.log_metric("pretrain", "source_valid_accuracy", evaluate_accuracy(model, *source_valid))
    if len(target_valid[1]):
        accuracy = evaluate_accuracy(model, *target_valid)
        ledger.log_metric("pretrain", "target_valid_accuracy", accuracy)
        logger.info(f"Base classifier accuracy on target validation tiles: {accuracy:.3f}")
    base_checksum = save_base_checkpoint(model, workspace.classifier_base)
    ledger.log_artifact(workspace.classifier_base, "classifier-base")

    with ledger.timing("lora"):
        inject_lora(model, cc.rank, seed=derive_seed(config.seed, STREAM_LORA_INIT))
        finetune_lora(
            model,
            target_train,
            target_valid,
            epochs=cc.epochs,
            lr=cc.lr,
            batch_size=cc.batch_size,
            seed=derive_seed(config.seed, STREAM_LORA),
            ledger=ledger,
        )
    if len(target_test[1]):
        ledger.log_metric("lora", "target_test_accuracy", evaluate_accuracy(model, *target_test))
    if frozen_checksum(model) != base_checksum:
        raise FrozenBaseError(
            f"Frozen backbone changed during fine-tuning: {base_checksum} became {frozen_checksum(model)}"
        )
    ledger.log_metric("lora", "base_checksum", base_checksum)
    save_lora_checkpoint(model, workspace.classifier_lora, workspace.classifier_base)
    ledger.log_artifact(workspace.classifier_lora, "classifier-lora")
    return workspace.classifier_lora


def coarse_cache_key(lora_checkpoint: Path, manifest_path: Path) -> str:
    return sha256_bytes(sha256_file(lora_checkpoint).encode(), sha256_file(manifest_path).encode())


def coarse_masks(model, manifest: DatasetManifest, cache_dir: Path, key: str) -> Tuple[np.ndarray, bool]:
    """Coarse masks of every region in a manifest, read from the cache when the key matches

    Returns:
        Tuple[np.ndarray, bool]: (N, C, h, w) masks and whether the cache was hit
    """
    path = Path(cache_dir) / f"{key}.bin"
    if path.exists():
        logger.info(f"Reusing cached coarse masks {path.name}")
        return read_tensors(path).tensors["coarse"], True
    masks = [
        classify_region(model, read_rgb(manifest.resolve(item.path))).values
        for item in track(manifest.items, description="Classifying regions")
    ]
    stacked = np.stack(masks).astype(np.float32)
    path.parent.mkdir(parents=True, exist_ok=True)
    write_tensors(path, {"coarse": stacked}, meta={"kind": "coarse-cache", "key": key})
    return stacked, False


def load_region_batch(manifest: DatasetManifest, coarse: np.ndarray, downsample: int) -> RegionBatch:
    x0 = np.stack([load_region_mask(manifest, item).values for item in manifest.items])
    images = [downsample_region(read_rgb(manifest.resolve(item.path)), downsample) for item in manifest.items]
    return RegionBatch(
        x0=torch.from_numpy(x0.astype(np.float32)),
        y=torch.from_numpy(coarse.astype(np.float32)),
        image=torch.stack(images),
    )


def run_train_refiner(config, verbose=False, **kwargs) -> Path:
    """Train the refiner on (ground truth, coarse mask, tissue) triples of the region dataset

    Returns:
        Path: the refiner checkpoint
    """
    if not verbose:
        warnings.filterwarnings("ignore")
    workspace, ledger = open_run(config, "train-refiner")
    torch.set_num_threads(1)
    lora_path = require(workspace.classifier_lora, "train-classifier")
    manifest_path = require(workspace.manifest("regions", "train"), "generate")
    manifest = DatasetManifest.load(manifest_path)
    if len(manifest) == 0:
        raise EmptyDatasetError("Region dataset is empty")

    classifier = load_lora_checkpoint(lora_path)
    key = coarse_cache_key(lora_path, manifest_path)
    coarse, hit = coarse_masks(classifier, manifest, workspace.coarse_cache, key)
    ledger.log_metric("refiner", "coarse_cache_hit", hit, key=key)
    ledger.log_artifact(workspace.coarse_cache / f"{key}.bin", "coarse-cache")
    data = load_region_batch(manifest, coarse, config.refiner.condition_downsample)

    with ledger.timing("refiner"):
        state = Refiner(config.refiner, seed=derive_seed(config.seed, STREAM_REFINER_INIT))
        train_refiner(
            state,
            data,
            steps=config.refiner.train_steps,
            seed=derive_seed(config.seed, STREAM_REFINER),
            ledger=ledger,
        )
    save_refiner(state, workspace.refiner)
    ledger.log_artifact(workspace.refiner, "refiner")
    return workspace.refiner
