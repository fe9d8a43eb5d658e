"""Low-rank adapters for frozen linear layers"""
from typing import Dict, Iterator, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from necroseg.exceptions import LoraRankError

LORA_TARGETS = ("q", "k", "v", "o")
A_INIT_STD = 0.02


class LoraLinear(nn.Module):
    """Frozen ``nn.Linear`` plus a trainable low-rank update

    The effective weight is ``W + B @ A`` with W of shape (d, k), B (d, r) and
    A (r, k). B starts at zero, so a freshly wrapped layer computes exactly what
    the base layer did.

    Args:
        base (nn.Linear): layer to adapt, its parameters are frozen
        rank (int): rank r of the update
        generator (torch.Generator): source of the Gaussian init of A
    """

    def __init__(self, base: nn.Linear, rank: int, generator: torch.Generator = None):
        super().__init__()
        d, k = base.weight.shape
        if rank <= 0 or rank > min(d, k):
            raise LoraRankError(f"LoRA rank must lie in 1..{min(d, k)} for a {d}x{k} weight, got {rank}")
        self.base = base
        for p in self.base.parameters():
            p.requires_grad_(False)
        self.rank = rank
        weight = base.weight
        self.lora_A = nn.Parameter(
            torch.randn(rank, k, generator=generator, dtype=weight.dtype).to(weight.device) * A_INIT_STD
        )
        self.lora_B = nn.Parameter(torch.zeros(d, rank, dtype=weight.dtype, device=weight.device))

    def __repr__(self):
        d, k = self.base.weight.shape
        return f"LoraLinear(d={d}, k={k}, rank={self.rank})"

    def delta_weight(self) -> torch.Tensor:
        """ΔW = B A"""
        return self.lora_B @ self.lora_A

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.base(x) + F.linear(F.linear(x, self.lora_A), self.lora_B)

    def merged(self) -> nn.Linear:
        """Plain linear layer with the update folded into its weight"""
        d, k = self.base.weight.shape
        layer = nn.Linear(k, d, bias=self.base.bias is not None)
        layer = layer.to(dtype=self.base.weight.dtype, device=self.base.weight.device)
        with torch.no_grad():
            layer.weight.copy_(self.base.weight + self.delta_weight())
            if self.base.bias is not None:
                layer.bias.copy_(self.base.bias)
        return layer


def lora_modules(model: nn.Module) -> Iterator[Tuple[str, LoraLinear]]:
    for name, module in model.named_modules():
        if isinstance(module, LoraLinear):
            yield name, module


def adapter_linkage(model: nn.Module) -> Dict[str, str]:
    """Map every adapter parameter name to the base weight it modifies"""
    links = {}
    for name, _ in lora_modules(model):
        links[f"{name}.lora_A"] = f"{name}.weight"
        links[f"{name}.lora_B"] = f"{name}.weight"
    return links


def canonical_name(name: str) -> str:
    """Parameter name as it was before the layer got wrapped"""
    return name.replace(".base.", ".")
