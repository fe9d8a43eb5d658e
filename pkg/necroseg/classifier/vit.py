from dataclasses import asdict, dataclass
import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from necroseg.core import N_CLASSES
from necroseg.exceptions import InvalidModelConfigError


@dataclass
class TinyVitConfig:
    """Shape of the patch classifier

    Args:
        image_size (int): side of an input patch in pixels
        token_size (int): side of the square pixel block embedded as one token
        embed_dim (int): token width d
        depth (int): number of encoder blocks
        heads (int): attention heads per block
        mlp_ratio (int): hidden width of the MLP relative to d
        n_classes (int): output classes
    """

    image_size: int = 16
    token_size: int = 4
    embed_dim: int = 32
    depth: int = 2
    heads: int = 2
    mlp_ratio: int = 2
    n_classes: int = N_CLASSES

    def validate(self) -> "TinyVitConfig":
        for name, value in asdict(self).items():
            if not isinstance(value, int) or value <= 0:
                raise InvalidModelConfigError(f"{name} must be a positive integer, got {value!r}")
        if self.image_size % self.token_size:
            raise InvalidModelConfigError(
                f"image_size {self.image_size} is not a multiple of token_size {self.token_size}"
            )
        if self.embed_dim % self.heads:
            raise InvalidModelConfigError(
                f"embed_dim {self.embed_dim} is not divisible by {self.heads} heads"
            )
        return self

    @property
    def n_tokens(self) -> int:
        return (self.image_size // self.token_size) ** 2

    def to_dict(self) -> dict:
        return asdict(self)


class Attention(nn.Module):
    """Multi-head self-attention with separate q, k, v and output projections"""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.o = nn.Linear(dim, dim)

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        b, n, d = x.shape
        return x.reshape(b, n, self.heads, d // self.heads).transpose(1, 2)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, n, d = x.shape
        q, k, v = self._split(self.q(x)), self._split(self.k(x)), self._split(self.v(x))
        scores = q @ k.transpose(-2, -1) / math.sqrt(d // self.heads)
        out = F.softmax(scores, dim=-1) @ v
        return self.o(out.transpose(1, 2).reshape(b, n, d))


class Block(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.fc1 = nn.Linear(dim, dim * mlp_ratio)
        self.fc2 = nn.Linear(dim * mlp_ratio, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.fc2(F.gelu(self.fc1(self.norm2(x))))


class TinyViT(nn.Module):
    """Vision transformer for small RGB patches

    Input is a float batch (N, 3, s, s) with values in [0, 1]; output is
    (N, n_classes) logits read from the class token.
    """

    def __init__(self, config: TinyVitConfig):
        super().__init__()
        self.config = config.validate()
        d = config.embed_dim
        self.patch_embed = nn.Conv2d(3, d, kernel_size=config.token_size, stride=config.token_size)
        self.cls_token = nn.Parameter(torch.randn(1, 1, d) * 0.02)
        self.pos_embed = nn.Parameter(torch.randn(1, config.n_tokens + 1, d) * 0.02)
        self.blocks = nn.ModuleList(
            [Block(d, config.heads, config.mlp_ratio) for _ in range(config.depth)]
        )
        self.norm = nn.LayerNorm(d)
        self.head = nn.Linear(d, config.n_classes)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = (x - 0.5) / 0.25
        tokens = self.patch_embed(x).flatten(2).transpose(1, 2)
        cls = self.cls_token.expand(tokens.shape[0], -1, -1)
        x = torch.cat([cls, tokens], dim=1) + self.pos_embed
        for block in self.blocks:
            x = block(x)
        return self.head(self.norm(x[:, 0]))
