import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from necroseg.core import N_CLASSES


def timestep_embedding(t_frac: torch.Tensor, dim: int) -> torch.Tensor:
    """Sinusoidal embedding of t / T in [0, 1], shape (B, dim)"""
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=t_frac.dtype, device=t_frac.device) / half
    )
    args = 1000.0 * t_frac[:, None] * freqs[None]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1)


class ConditionEncoder(nn.Module):
    """Features of the coarse mask y stacked with the tissue image O

    When O has a lower resolution than y, y is average-pooled to O's size and
    the features are upsampled back with nearest-neighbour interpolation.
    """

    def __init__(self, n_classes: int = N_CLASSES, width: int = 32):
        super().__init__()
        self.width = width
        self.net = nn.Sequential(
            nn.Conv2d(n_classes + 3, width, 3, padding=1),
            nn.SiLU(),
            nn.Conv2d(width, width, 3, padding=1),
            nn.SiLU(),
            nn.Conv2d(width, width, 3, padding=1),
        )

    def forward(self, y: torch.Tensor, image: torch.Tensor) -> torch.Tensor:
        factor = y.shape[-1] // image.shape[-1]
        if factor > 1:
            y = F.avg_pool2d(y, factor)
        features = self.net(torch.cat([y, image], dim=1))
        if factor > 1:
            features = F.interpolate(features, scale_factor=factor, mode="nearest")
        return features


class ResBlock(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, time_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(8, in_channels)
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, padding=1)
        self.time = nn.Linear(time_dim, out_channels)
        self.norm2 = nn.GroupNorm(8, out_channels)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, padding=1)
        self.skip = (
            nn.Conv2d(in_channels, out_channels, 1) if in_channels != out_channels else nn.Identity()
        )

    def forward(self, x: torch.Tensor, emb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.time(emb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class Denoiser(nn.Module):
    """Two-level U-Net predicting the bridge residual from x_t and conditioning features

    Args:
        n_classes (int): channels of x_t and of the output
        cond_channels (int): channels of the conditioning features
        base_width (int): channels at full resolution, a multiple of 8
    """

    def __init__(self, n_classes: int = N_CLASSES, cond_channels: int = 32, base_width: int = 32):
        super().__init__()
        w = base_width
        self.time_dim = 2 * w
        self.time_mlp = nn.Sequential(
            nn.Linear(w, self.time_dim), nn.SiLU(), nn.Linear(self.time_dim, self.time_dim)
        )
        self.inp = nn.Conv2d(n_classes + cond_channels, w, 3, padding=1)
        self.enc1 = ResBlock(w, w, self.time_dim)
        self.down = nn.Conv2d(w, 2 * w, 3, stride=2, padding=1)
        self.enc2 = ResBlock(2 * w, 2 * w, self.time_dim)
        self.mid = ResBlock(2 * w, 2 * w, self.time_dim)
        self.up = nn.Conv2d(2 * w, w, 3, padding=1)
        self.dec1 = ResBlock(2 * w, w, self.time_dim)
        self.out_norm = nn.GroupNorm(8, w)
        self.out = nn.Conv2d(w, n_classes, 3, padding=1)

    def forward(self, x_t: torch.Tensor, cond: torch.Tensor, t_frac: torch.Tensor) -> torch.Tensor:
        emb = self.time_mlp(timestep_embedding(t_frac, self.inp.out_channels))
        h1 = self.enc1(self.inp(torch.cat([x_t, cond], dim=1)), emb)
        h2 = self.mid(self.enc2(self.down(h1), emb), emb)
        up = self.up(F.interpolate(h2, size=h1.shape[-2:], mode="nearest"))
        h = self.dec1(torch.cat([up, h1], dim=1), emb)
        return self.out(F.silu(self.out_norm(h)))
