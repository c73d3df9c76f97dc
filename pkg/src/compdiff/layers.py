"""Small nn.Module wrappers around the numerics primitives."""
from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from .numerics import attention, conv2d, group_norm


def zero_(module: nn.Module) -> nn.Module:
    for p in module.parameters():
        nn.init.zeros_(p)
    return module


class Conv2d(nn.Module):
    def __init__(self, cin: int, cout: int, kernel: int = 3, stride: int = 1, padding: int | None = None):
        super().__init__()
        self.stride = stride
        self.padding = kernel // 2 if padding is None else padding
        self.weight = nn.Parameter(torch.empty(cout, cin, kernel, kernel))
        self.bias = nn.Parameter(torch.empty(cout))
        fan_in = cin * kernel * kernel
        bound = 1.0 / math.sqrt(fan_in)
        nn.init.uniform_(self.weight, -bound, bound)
        nn.init.uniform_(self.bias, -bound, bound)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return conv2d(x, self.weight, self.bias, self.stride, self.padding)


class GroupNorm(nn.Module):
    def __init__(self, groups: int, channels: int, affine: bool = True, eps: float = 1e-5):
        super().__init__()
        self.groups = groups
        self.eps = eps
        if affine:
            self.weight = nn.Parameter(torch.ones(channels))
            self.bias = nn.Parameter(torch.zeros(channels))
        else:
            self.register_parameter("weight", None)
            self.register_parameter("bias", None)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return group_norm(x, self.groups, self.weight, self.bias, self.eps)


class Attention(nn.Module):
    """Single-head attention with separate query/context projections.

    ``forward`` returns ``(out, weights)``; the output projection can be
    zero-initialised so a residual branch starts as the identity.
    """

    def __init__(self, query_dim: int, context_dim: int | None = None, inner_dim: int | None = None,
                 out_dim: int | None = None, zero_out: bool = False):
        super().__init__()
        context_dim = context_dim or query_dim
        inner_dim = inner_dim or query_dim
        self.to_q = nn.Linear(query_dim, inner_dim, bias=False)
        self.to_k = nn.Linear(context_dim, inner_dim, bias=False)
        self.to_v = nn.Linear(context_dim, inner_dim, bias=False)
        self.to_out = nn.Linear(inner_dim, out_dim or query_dim)
        if zero_out:
            zero_(self.to_out)

    def forward(self, x: torch.Tensor, context: torch.Tensor | None = None) -> tuple[torch.Tensor, torch.Tensor]:
        context = x if context is None else context
        out, weights = attention(self.to_q(x), self.to_k(context), self.to_v(context))
        return self.to_out(out), weights


class FeedForward(nn.Module):
    def __init__(self, dim: int, mult: int = 4):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(dim, dim * mult), nn.GELU(), nn.Linear(dim * mult, dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb
