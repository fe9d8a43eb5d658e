"""Region refiner: a conditional Brownian-bridge diffusion from coarse to fine masks"""
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from rich.progress import track

from necroseg.core import N_CLASSES, PathLike, logger
from necroseg.core.ledger import RunLedger
from necroseg.core.tensorio import read_tensors, write_tensors
from necroseg.exceptions import (
    EmptyDatasetError,
    InvalidModelConfigError,
    MissingArtifactError,
    NumericalError,
    ShapeMismatchError,
)
from necroseg.refiner.bridge import (
    BridgeSchedule,
    Posterior,
    build_schedule,
    forward_sample,
    noise_target,
    posterior,
    reconstruct_x0,
    residual_to_noise,
    residual_to_x0,
    sampling_timesteps,
    segmentation_loss,
    transition_loss,
)
from necroseg.refiner.models import ConditionEncoder, Denoiser
from necroseg.tiling import MaskKind, ProbMask

__all__ = [
    "BridgeSchedule",
    "Posterior",
    "Refiner",
    "RefinerConfig",
    "RegionBatch",
    "build_schedule",
    "downsample_region",
    "forward_sample",
    "load_refiner",
    "noise_target",
    "posterior",
    "reconstruct_x0",
    "refine_region",
    "refiner_loss",
    "refiner_train_step",
    "residual_to_noise",
    "sample_refined",
    "save_refiner",
    "segmentation_loss",
    "train_refiner",
    "transition_loss",
]

SAMPLING_MODES = ("ddim", "ancestral")


@dataclass
class RefinerConfig:
    T: int = 200
    s: float = 1.0
    lam: float = 1.0
    base_width: int = 32
    cond_width: int = 32
    condition_downsample: int = 1
    n_steps: int = 20
    mode: str = "ddim"
    train_steps: int = 2000
    batch_size: int = 4
    lr: float = 5e-4

    def validate(self) -> "RefinerConfig":
        if self.lam < 0:
            raise InvalidModelConfigError(f"Segmentation loss weight must be >= 0, got {self.lam}")
        if self.base_width <= 0 or self.base_width % 8:
            raise InvalidModelConfigError(f"base_width must be a positive multiple of 8, got {self.base_width}")
        if self.cond_width <= 0:
            raise InvalidModelConfigError(f"cond_width must be positive, got {self.cond_width}")
        if self.condition_downsample not in (1, 2, 4):
            raise InvalidModelConfigError(
                f"condition_downsample must be 1, 2 or 4, got {self.condition_downsample}"
            )
        if self.mode not in SAMPLING_MODES:
            raise InvalidModelConfigError(f"Sampling mode must be one of {SAMPLING_MODES}, got {self.mode}")
        return self

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class RegionBatch:
    """Training triples: one-hot x0, coarse y (N, C, h, w) and tissue image O (N, 3, h', w')"""

    x0: torch.Tensor
    y: torch.Tensor
    image: torch.Tensor

    def __len__(self):
        return self.x0.shape[0]

    def __post_init__(self):
        if self.x0.shape != self.y.shape:
            raise ShapeMismatchError(f"x0 {tuple(self.x0.shape)} and y {tuple(self.y.shape)} differ in shape")
        if self.image.shape[0] != self.x0.shape[0] or self.image.shape[1] != 3:
            raise ShapeMismatchError(f"Tissue batch of shape {tuple(self.image.shape)} does not match the masks")

    def select(self, idx: torch.Tensor) -> "RegionBatch":
        return RegionBatch(self.x0[idx], self.y[idx], self.image[idx])


class Refiner(nn.Module):
    """Schedule, condition encoder and denoiser of the refiner

    Args:
        config (RefinerConfig): schedule and network sizes
        seed (int): seed of the parameter initialisation
    """

    def __init__(self, config: RefinerConfig, seed: int = 0):
        super().__init__()
        self.config = config.validate()
        self.seed = seed
        self.schedule = build_schedule(config.T, config.s)
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.encoder = ConditionEncoder(N_CLASSES, config.cond_width)
            self.denoiser = Denoiser(N_CLASSES, config.cond_width, config.base_width)
        self.optimizer: Optional[torch.optim.Optimizer] = None
        self.step = 0

    @property
    def lam(self) -> float:
        return self.config.lam

    @property
    def dtype(self) -> torch.dtype:
        return next(self.parameters()).dtype

    def predict_residual(self, x_t: torch.Tensor, y: torch.Tensor, image: torch.Tensor, t) -> torch.Tensor:
        """Residual x_t - x0 predicted from the noisy state and the conditioning"""
        if not isinstance(t, torch.Tensor):
            t = torch.full((x_t.shape[0],), int(t))
        t_frac = t.to(dtype=x_t.dtype, device=x_t.device) / self.schedule.T
        return self.denoiser(x_t, self.encoder(y, image), t_frac)

    def get_optimizer(self) -> torch.optim.Optimizer:
        if self.optimizer is None:
            self.optimizer = torch.optim.Adam(self.parameters(), lr=self.config.lr)
        return self.optimizer


def downsample_region(region: np.ndarray, factor: int = 1, dtype=torch.float32) -> torch.Tensor:
    """h×w×3 uint8 region to a (3, h/factor, w/factor) float tensor in [0, 1]"""
    image = torch.as_tensor(np.ascontiguousarray(region)).permute(2, 0, 1).to(dtype) / 255.0
    if factor > 1:
        image = F.interpolate(image[None], scale_factor=1.0 / factor, mode="bilinear", align_corners=False)[0]
    return image


def refiner_loss(
    state: Refiner, batch: RegionBatch, t: torch.Tensor, eps: torch.Tensor
) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """L_ref = L_trans + lam * L_seg for fixed timesteps and noise

    Returns:
        Tuple[torch.Tensor, torch.Tensor, torch.Tensor]: L_ref, L_trans and L_seg
    """
    schedule = state.schedule
    m = torch.as_tensor(schedule.m, dtype=batch.x0.dtype)[t].reshape(-1, 1, 1, 1)
    sd = torch.as_tensor(np.sqrt(schedule.delta), dtype=batch.x0.dtype)[t].reshape(-1, 1, 1, 1)
    x_t = (1.0 - m) * batch.x0 + m * batch.y + sd * eps
    target = noise_target(batch.x0, batch.y, t, eps, schedule)
    prediction = state.predict_residual(x_t, batch.y, batch.image, t)
    l_trans = transition_loss(prediction, target, t, schedule)
    l_seg = segmentation_loss(residual_to_x0(prediction, x_t), batch.x0)
    return l_trans + state.lam * l_seg, l_trans, l_seg


def refiner_train_step(state: Refiner, batch: RegionBatch, generator: torch.Generator) -> Tuple[float, float, float]:
    """One optimiser step on a batch, t drawn uniformly from 1..T-1 per example"""
    if len(batch) == 0:
        raise EmptyDatasetError("Refiner training batch is empty")
    state.train()
    t = torch.randint(1, state.schedule.T, (len(batch),), generator=generator)
    eps = torch.randn(batch.x0.shape, generator=generator, dtype=batch.x0.dtype)
    l_ref, l_trans, l_seg = refiner_loss(state, batch, t, eps)
    if not torch.isfinite(l_ref):
        raise NumericalError(
            f"Non-finite refiner loss at step {state.step} "
            f"(L_trans={float(l_trans)}, L_seg={float(l_seg)}, t={t.tolist()})"
        )
    optimizer = state.get_optimizer()
    optimizer.zero_grad()
    l_ref.backward()
    optimizer.step()
    state.step += 1
    return float(l_ref), float(l_trans), float(l_seg)


def _flip(batch: RegionBatch, dims: Tuple[int, ...]) -> RegionBatch:
    if not dims:
        return batch
    return RegionBatch(batch.x0.flip(dims), batch.y.flip(dims), batch.image.flip(dims))


def train_refiner(
    state: Refiner,
    data: RegionBatch,
    steps: int,
    seed: int = 0,
    augment: bool = True,
    ledger: Optional[RunLedger] = None,
    log_every: int = 50,
) -> Refiner:
    """Run `steps` training steps on random batches with flip augmentation"""
    if len(data) == 0:
        raise EmptyDatasetError("Refiner training set is empty")
    generator = torch.Generator().manual_seed(seed)
    batch_size = min(state.config.batch_size, len(data))
    for step in track(range(steps), description="Training refiner"):
        idx = torch.randperm(len(data), generator=generator)[:batch_size]
        batch = data.select(idx)
        if augment:
            flips = torch.randint(0, 2, (2,), generator=generator).tolist()
            batch = _flip(batch, tuple(d for d, f in zip((-1, -2), flips) if f))
        l_ref, l_trans, l_seg = refiner_train_step(state, batch, generator)
        if ledger is not None:
            ledger.log_step("refiner", step, l_ref=l_ref, l_trans=l_trans, l_seg=l_seg)
        if step % log_every == 0 or step == steps - 1:
            logger.debug(f"refiner step {step}: L_ref {l_ref:.4f} (trans {l_trans:.4f}, seg {l_seg:.4f})")
    state.eval()
    return state


@torch.no_grad()
def sample_refined_batch(
    state: Refiner,
    y: torch.Tensor,
    image: torch.Tensor,
    n_steps: int,
    mode: str = "ddim",
    generator: torch.Generator = None,
) -> torch.Tensor:
    """Reverse the bridge from x_T = y; returns channel-softmax probabilities (B, C, h, w)"""
    if mode not in SAMPLING_MODES:
        raise InvalidModelConfigError(f"Sampling mode must be one of {SAMPLING_MODES}, got {mode}")
    schedule = state.schedule
    steps = sampling_timesteps(schedule.T, n_steps)
    state.eval()
    x = y.clone()
    for t, t_next in zip(steps[:-1], steps[1:]):
        t, t_next = int(t), int(t_next)
        x0_hat = residual_to_x0(state.predict_residual(x, y, image, t), x)
        if t_next == 0:
            x = x0_hat
            break
        m_t, m_n = schedule.m[t], schedule.m[t_next]
        mean = (1.0 - m_n) * x0_hat + m_n * y
        if mode == "ddim":
            d_t = schedule.delta[t]
            if d_t > 0.0:
                mean = mean + np.sqrt(schedule.delta[t_next] / d_t) * (x - (1.0 - m_t) * x0_hat - m_t * y)
            x = mean
        else:
            post = posterior(schedule, t, t_next)
            noise = torch.randn(x.shape, generator=generator, dtype=x.dtype)
            x = post.c_x0 * x0_hat + post.c_xt * x + post.c_y * y + np.sqrt(post.var) * noise
    return F.softmax(x, dim=1)


def sample_refined(
    state: Refiner,
    y: ProbMask,
    image: torch.Tensor,
    n_steps: int,
    mode: str = "ddim",
    generator: torch.Generator = None,
) -> ProbMask:
    """Refined mask of one region from its coarse mask and tissue image"""
    y_t = torch.from_numpy(np.asarray(y.values)).to(state.dtype)[None]
    probs = sample_refined_batch(state, y_t, image.to(state.dtype)[None], n_steps, mode, generator)
    return ProbMask(probs[0].double().numpy(), MaskKind.REFINED)


def refine_region(state: Refiner, coarse: ProbMask, region: np.ndarray, n_steps: int = None, mode: str = None, seed: int = 0) -> ProbMask:
    config = state.config
    image = downsample_region(region, config.condition_downsample, state.dtype)
    generator = torch.Generator().manual_seed(seed)
    return sample_refined(state, coarse, image, n_steps or config.n_steps, mode or config.mode, generator)


def save_refiner(state: Refiner, path: PathLike) -> None:
    """Write the networks with the schedule and config in the header"""
    tensors = {name: t.detach().cpu().numpy() for name, t in state.state_dict().items()}
    write_tensors(
        path,
        tensors,
        meta={
            "kind": "refiner",
            "schedule": state.schedule.to_dict(),
            "config": state.config.to_dict(),
            "seed": state.seed,
            "step": state.step,
        },
    )


def load_refiner(path: PathLike) -> Refiner:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"Refiner checkpoint {path} not found, run train-refiner first")
    stored = read_tensors(path)
    if stored.meta.get("kind") != "refiner":
        raise MissingArtifactError(f"{path} is not a refiner checkpoint")
    state = Refiner(RefinerConfig(**stored.meta["config"]), seed=stored.meta.get("seed", 0))
    dtype = next(iter(stored.tensors.values())).dtype
    state = state.to(torch.float64 if dtype == np.float64 else torch.float32)
    state.load_state_dict({name: torch.from_numpy(a) for name, a in stored.tensors.items()})
    state.step = stored.meta.get("step", 0)
    return state.eval()
