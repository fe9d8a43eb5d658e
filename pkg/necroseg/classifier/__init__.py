"""Patch classifier: a tiny ViT pretrained on the source family and adapted with LoRA"""
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from rich.progress import track

from necroseg.classifier.lora import (
    LORA_TARGETS,
    LoraLinear,
    adapter_linkage,
    canonical_name,
    lora_modules,
)
from necroseg.classifier.vit import TinyViT, TinyVitConfig
from necroseg.core import N_CLASSES, PathLike, logger, sha256_bytes
from necroseg.core.ledger import RunLedger
from necroseg.core.tensorio import read_tensors, write_tensors
from necroseg.exceptions import (
    EmptyDatasetError,
    InvalidModelConfigError,
    LoraRankError,
    MissingArtifactError,
    NumericalError,
    ShapeMismatchError,
)
from necroseg.tiling import ProbMask, assemble_coarse_mask, split_into_patches

__all__ = [
    "LoraLinear",
    "TinyViT",
    "TinyVitConfig",
    "classify_patch",
    "classify_patches",
    "classify_region",
    "evaluate_accuracy",
    "finetune_lora",
    "freeze_base",
    "frozen_checksum",
    "init_classifier",
    "inject_lora",
    "load_base_checkpoint",
    "load_lora_checkpoint",
    "lora_train_step",
    "merge_lora",
    "pretrain_base",
    "save_base_checkpoint",
    "save_lora_checkpoint",
    "trainable_parameters",
]


def init_classifier(config: TinyVitConfig, seed: int, dtype=torch.float32) -> TinyViT:
    """Randomly initialised classifier, identical for identical seeds"""
    config.validate()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = TinyViT(config)
    return model.to(dtype=dtype)


def to_input(patches: np.ndarray, like: nn.Module) -> torch.Tensor:
    """uint8 patches (N, h, w, 3) to a float batch (N, 3, h, w) in [0, 1]"""
    param = next(like.parameters())
    x = torch.as_tensor(np.ascontiguousarray(patches))
    if x.ndim == 3:
        x = x.unsqueeze(0)
    return x.permute(0, 3, 1, 2).to(dtype=param.dtype, device=param.device) / 255.0


def _check_patches(model: TinyViT, patches: np.ndarray) -> None:
    s = model.config.image_size
    if patches.ndim != 4 or patches.shape[1:] != (s, s, 3):
        raise ShapeMismatchError(f"Classifier expects ({s}, {s}, 3) patches, got {patches.shape[1:]}")


def _batches(n: int, batch_size: int, generator: Optional[torch.Generator] = None) -> Iterator[torch.Tensor]:
    order = torch.randperm(n, generator=generator) if generator is not None else torch.arange(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def freeze_base(model: nn.Module) -> nn.Module:
    for p in model.parameters():
        p.requires_grad_(False)
    return model


def is_frozen(model: nn.Module) -> bool:
    return not any(p.requires_grad for name, p in model.named_parameters() if "lora_" not in name and not name.startswith("head."))


def trainable_parameters(model: nn.Module) -> List[Tuple[str, nn.Parameter]]:
    return [(name, p) for name, p in model.named_parameters() if p.requires_grad]


def base_parameters(model: nn.Module) -> Iterator[Tuple[str, torch.Tensor]]:
    """Backbone parameters under their pre-injection names, head and adapters excluded"""
    for name, p in model.named_parameters():
        if "lora_" in name or name.startswith("head."):
            continue
        yield canonical_name(name), p


def frozen_checksum(model: nn.Module) -> str:
    """sha256 over the backbone parameters in name order"""
    chunks = []
    for name, p in sorted(base_parameters(model), key=lambda item: item[0]):
        chunks.append(name.encode())
        chunks.append(p.detach().cpu().numpy().tobytes())
    return sha256_bytes(*chunks)


def evaluate_accuracy(model: TinyViT, patches: np.ndarray, labels: np.ndarray, batch_size: int = 256) -> float:
    if len(labels) == 0:
        raise EmptyDatasetError("Cannot compute accuracy of an empty split")
    probs = classify_patches(model, patches, batch_size=batch_size)
    return float(np.mean(probs.argmax(axis=1) == labels))


def pretrain_base(
    model: TinyViT,
    patches: np.ndarray,
    labels: np.ndarray,
    epochs: int = 3,
    lr: float = 1e-3,
    batch_size: int = 64,
    seed: int = 0,
    ledger: Optional[RunLedger] = None,
) -> TinyViT:
    """Train every parameter on the source family, then freeze the model

    Args:
        model (TinyViT): freshly initialised classifier
        patches (np.ndarray): N×s×s×3 uint8 tiles
        labels (np.ndarray): N dominant-class labels
        epochs (int): passes over the data
        lr (float): Adam learning rate
        batch_size (int): tiles per step
        seed (int): seed of the shuffling order
        ledger (RunLedger): optional run ledger receiving the loss curve
    Returns:
        TinyViT: the same model, frozen
    """
    if len(labels) == 0:
        raise EmptyDatasetError("Pretraining set is empty")
    _check_patches(model, patches)
    for p in model.parameters():
        p.requires_grad_(True)
    optimizer = torch.optim.Adam(model.parameters(), lr=lr)
    generator = torch.Generator().manual_seed(seed)
    x_all = to_input(patches, model)
    y_all = torch.as_tensor(labels, dtype=torch.long)
    step = 0
    model.train()
    for epoch in track(range(epochs), description="Pretraining classifier"):
        total = 0.0
        for idx in _batches(len(y_all), batch_size, generator):
            loss = F.cross_entropy(model(x_all[idx]), y_all[idx])
            if not torch.isfinite(loss):
                raise NumericalError(f"Non-finite pretraining loss at epoch {epoch}, step {step}")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            total += float(loss) * len(idx)
            step += 1
        mean_loss = total / len(y_all)
        logger.info(f"pretrain epoch {epoch + 1}/{epochs}: loss {mean_loss:.4f}")
        if ledger is not None:
            ledger.log_step("pretrain", epoch, loss=mean_loss)
    model.eval()
    return freeze_base(model)


def inject_lora(model: TinyViT, rank: int, seed: int = 0) -> TinyViT:
    """Wrap the q, k, v and o projections of every block with rank-r adapters

    The backbone must be frozen. The classification head becomes trainable
    alongside the adapters. Injection is in place.
    """
    if any(True for _ in lora_modules(model)):
        raise InvalidModelConfigError("Model already carries LoRA adapters")
    if not is_frozen(model):
        raise InvalidModelConfigError("Freeze the pretrained backbone before injecting adapters")
    d = model.config.embed_dim
    if rank <= 0 or rank > d:
        raise LoraRankError(f"LoRA rank must lie in 1..{d}, got {rank}")
    generator = torch.Generator().manual_seed(seed)
    for block in model.blocks:
        for target in LORA_TARGETS:
            setattr(block.attn, target, LoraLinear(getattr(block.attn, target), rank, generator))
    for p in model.head.parameters():
        p.requires_grad_(True)
    model.lora_rank = rank
    logger.debug(
        f"Injected rank-{rank} adapters, {sum(p.numel() for _, p in trainable_parameters(model))} trainable parameters"
    )
    return model


def lora_train_step(model: TinyViT, batch: Tuple[torch.Tensor, torch.Tensor], lr: float) -> float:
    """One plain gradient step on the adapters and the head

    Args:
        model (TinyViT): model with injected adapters
        batch: float inputs (N, 3, s, s) and long labels (N,)
        lr (float): step size
    Returns:
        float: cross-entropy loss before the update
    """
    x, y = batch
    if len(y) == 0:
        raise EmptyDatasetError("Training batch is empty")
    params = [p for _, p in trainable_parameters(model)]
    loss = F.cross_entropy(model(x), y)
    if not torch.isfinite(loss):
        raise NumericalError(f"Non-finite LoRA training loss ({float(loss)})")
    grads = torch.autograd.grad(loss, params)
    with torch.no_grad():
        for p, g in zip(params, grads):
            p.sub_(lr * g)
    return float(loss)


def finetune_lora(
    model: TinyViT,
    train: Tuple[np.ndarray, np.ndarray],
    valid: Optional[Tuple[np.ndarray, np.ndarray]] = None,
    epochs: int = 5,
    lr: float = 1e-2,
    batch_size: int = 64,
    seed: int = 0,
    ledger: Optional[RunLedger] = None,
) -> List[float]:
    """Adapt the injected model to the target family

    Returns:
        List[float]: validation accuracy after every epoch, empty without a validation split
    """
    patches, labels = train
    if len(labels) == 0:
        raise EmptyDatasetError("Fine-tuning set is empty")
    _check_patches(model, patches)
    x_all = to_input(patches, model)
    y_all = torch.as_tensor(labels, dtype=torch.long)
    generator = torch.Generator().manual_seed(seed)
    accuracies = []
    step = 0
    for epoch in track(range(epochs), description="Fine-tuning LoRA"):
        model.train()
        losses = []
        for idx in _batches(len(y_all), batch_size, generator):
            losses.append(lora_train_step(model, (x_all[idx], y_all[idx]), lr))
            if ledger is not None:
                ledger.log_step("lora", step, loss=losses[-1])
            step += 1
        message = f"lora epoch {epoch + 1}/{epochs}: loss {np.mean(losses):.4f}"
        if valid is not None and len(valid[1]):
            accuracies.append(evaluate_accuracy(model, *valid))
            message += f", valid accuracy {accuracies[-1]:.3f}"
            if ledger is not None:
                ledger.log_metric("lora", "valid_accuracy", accuracies[-1], epoch=epoch)
        logger.info(message)
    model.eval()
    return accuracies


@torch.no_grad()
def classify_patches(model: TinyViT, patches: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Class distributions of N patches, shape (N, C)"""
    patches = np.asarray(patches)
    _check_patches(model, patches)
    model.eval()
    out = []
    for idx in _batches(len(patches), batch_size):
        logits = model(to_input(patches[idx.numpy()], model))
        out.append(F.softmax(logits.double(), dim=1).cpu().numpy())
    if not out:
        return np.zeros((0, N_CLASSES))
    return np.concatenate(out)


def classify_patch(model: TinyViT, patch: np.ndarray) -> np.ndarray:
    """Class distribution of one s×s×3 patch"""
    patch = np.asarray(patch)
    if patch.ndim != 3:
        raise ShapeMismatchError(f"Expected a single h×w×3 patch, got shape {patch.shape}")
    return classify_patches(model, patch[None])[0]


def classify_region(model: TinyViT, region: np.ndarray, batch_size: int = 256) -> ProbMask:
    """Coarse mask of a region: each patch footprint filled with its class distribution"""
    s = model.config.image_size
    grid, patches = split_into_patches(region, (s, s))
    probs = classify_patches(model, np.stack(patches), batch_size=batch_size)
    return assemble_coarse_mask(probs, grid)


def merge_lora(model: TinyViT) -> TinyViT:
    """Copy of the model with every adapter folded into its base weight"""
    merged = TinyViT(model.config).to(dtype=next(model.parameters()).dtype)
    state = {canonical_name(name): t for name, t in model.state_dict().items() if "lora_" not in name}
    merged.load_state_dict(state)
    for block, source in zip(merged.blocks, model.blocks):
        for target in LORA_TARGETS:
            layer = getattr(source.attn, target)
            if isinstance(layer, LoraLinear):
                setattr(block.attn, target, layer.merged())
    return freeze_base(merged.eval())


def _numpy_state(tensors: Dict[str, torch.Tensor]) -> Dict[str, np.ndarray]:
    return {name: t.detach().cpu().numpy() for name, t in tensors.items()}


def save_base_checkpoint(model: TinyViT, path: PathLike) -> str:
    """Write the pretrained classifier

    Returns:
        str: frozen-backbone checksum stored in the header
    """
    checksum = frozen_checksum(model)
    state = _numpy_state(model.state_dict())
    write_tensors(
        path,
        state,
        meta={"kind": "classifier-base", "config": model.config.to_dict(), "base_checksum": checksum},
        frozen={name: True for name in state},
    )
    return checksum


def load_base_checkpoint(path: PathLike) -> TinyViT:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"Classifier checkpoint {path} not found, run train-classifier first")
    stored = read_tensors(path)
    if stored.meta.get("kind") != "classifier-base":
        raise MissingArtifactError(f"{path} is not a base classifier checkpoint")
    model = TinyViT(TinyVitConfig(**stored.meta["config"]))
    model.load_state_dict({name: torch.from_numpy(a) for name, a in stored.tensors.items()})
    return freeze_base(model.eval())


def save_lora_checkpoint(model: TinyViT, path: PathLike, base_path: PathLike) -> None:
    """Write only the adapters and the head, linked to the base checkpoint they extend"""
    state = model.state_dict()
    kept = {name: t for name, t in state.items() if "lora_" in name or name.startswith("head.")}
    write_tensors(
        path,
        _numpy_state(kept),
        meta={
            "kind": "classifier-lora",
            "rank": int(model.lora_rank),
            "base": Path(base_path).name,
            "base_checksum": frozen_checksum(model),
        },
        adapters=adapter_linkage(model),
    )


def load_lora_checkpoint(path: PathLike, base_path: Optional[PathLike] = None) -> TinyViT:
    """Rebuild the adapted classifier from its base and LoRA checkpoints

    The base checkpoint defaults to the file named in the LoRA header, next to it.
    """
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"LoRA checkpoint {path} not found, run train-classifier first")
    stored = read_tensors(path)
    if stored.meta.get("kind") != "classifier-lora":
        raise MissingArtifactError(f"{path} is not a LoRA checkpoint")
    base_path = Path(base_path) if base_path is not None else path.parent / stored.meta["base"]
    model = load_base_checkpoint(base_path)
    if frozen_checksum(model) != stored.meta["base_checksum"]:
        raise MissingArtifactError(f"{base_path} does not match the backbone {path} was trained on")
    inject_lora(model, stored.meta["rank"])
    result = model.load_state_dict(
        {name: torch.from_numpy(a) for name, a in stored.tensors.items()}, strict=False
    )
    if result.unexpected_keys:
        raise MissingArtifactError(f"{path} holds unknown tensors {result.unexpected_keys}")
    # base weights come from the base checkpoint, everything else must be in the LoRA file
    absent = [name for name in result.missing_keys if "lora_" in name or name.startswith("head.")]
    if absent:
        raise MissingArtifactError(f"{path} lacks adapter or head tensors {absent}")
    return model.eval()
