"""Low-rank adapters wrapped around frozen linear projections.

The wrapped projection computes W x + (alpha/r) * B A x with B zero-initialized,
so a freshly adapted model is an exact no-op relative to its base.
"""

from __future__ import annotations

import math

import torch
from torch import nn
from torch.nn import functional as F


class LoraLinear(nn.Module):
    def __init__(self, base: nn.Linear, rank: int, alpha: float):
        super().__init__()
        if rank <= 0:
            raise ValueError("LoraLinear requires rank >= 1; use the plain Linear for rank 0")
        self.base = base
        self.base.weight.requires_grad_(False)
        if self.base.bias is not None:
            self.base.bias.requires_grad_(False)
        self.rank = rank
        self.scaling = alpha / rank
        a_std = 1.0 / math.sqrt(base.in_features)
        self.lora_a = nn.Parameter(torch.randn(rank, base.in_features) * a_std)
        self.lora_b = nn.Parameter(torch.zeros(base.out_features, rank))
        self.merged = False

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = F.linear(x, self.base.weight, self.base.bias)
        if not self.merged:
            out = out + self.scaling * F.linear(F.linear(x, self.lora_a), self.lora_b)
        return out

    @torch.no_grad()
    def merge_(self) -> None:
        """Fold the adapter into the base weight; the adapter is consumed."""
        if self.merged:
            raise RuntimeError("adapter already merged")
        self.base.weight += self.scaling * (self.lora_b @ self.lora_a)
        self.lora_a.requires_grad_(False)
        self.lora_b.requires_grad_(False)
        self.merged = True

    def extra_repr(self) -> str:
        return f"rank={self.rank}, scaling={self.scaling}, merged={self.merged}"


def iter_adapters(model: nn.Module):
    for module in model.modules():
        if isinstance(module, LoraLinear):
            yield module


def merge_lora(model: nn.Module) -> nn.Module:
    """Fold every adapter in `model` into its base weights, in place.

    A model without adapters (rank 0) is returned unchanged; merging twice
    raises because the adapters were consumed by the first call.
    """
    adapters = list(iter_adapters(model))
    if not adapters:
        return model
    if all(a.merged for a in adapters):
        raise RuntimeError("adapters already merged")
    for adapter in adapters:
        if not adapter.merged:
            adapter.merge_()
    return model
