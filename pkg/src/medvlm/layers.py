"""Minimal pre-LN transformer blocks shared by the vision encoder and the LM.

Everything runs in float64 on CPU: desk scale is tiny and double precision
keeps finite-difference gradient checks and determinism tests honest.
"""

from __future__ import annotations

import math

import torch
from torch import nn

DTYPE = torch.float64


class MultiHeadSelfAttention(nn.Module):
    """Standard multi-head self-attention; optionally causal."""

    def __init__(self, dim: int, heads: int, causal: bool) -> None:
        super().__init__()
        if dim % heads != 0:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        self.heads = heads
        self.head_dim = dim // heads
        self.causal = causal
        self.q_proj = nn.Linear(dim, dim, dtype=DTYPE)
        self.k_proj = nn.Linear(dim, dim, dtype=DTYPE)
        self.v_proj = nn.Linear(dim, dim, dtype=DTYPE)
        self.out_proj = nn.Linear(dim, dim, dtype=DTYPE)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, n, d = x.shape
        shape = (b, n, self.heads, self.head_dim)
        q = self.q_proj(x).view(shape).transpose(1, 2)
        k = self.k_proj(x).view(shape).transpose(1, 2)
        v = self.v_proj(x).view(shape).transpose(1, 2)
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        if self.causal:
            mask = torch.triu(torch.ones(n, n, dtype=torch.bool, device=x.device), diagonal=1)
            scores = scores.masked_fill(mask, float("-inf"))
        attn = torch.softmax(scores, dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, n, d)
        return self.out_proj(out)


class TransformerBlock(nn.Module):
    def __init__(self, dim: int, heads: int, causal: bool, mlp_ratio: int = 4) -> None:
        super().__init__()
        self.norm1 = nn.LayerNorm(dim, dtype=DTYPE)
        self.attn = MultiHeadSelfAttention(dim, heads, causal)
        self.norm2 = nn.LayerNorm(dim, dtype=DTYPE)
        self.mlp = nn.Sequential(
            nn.Linear(dim, mlp_ratio * dim, dtype=DTYPE),
            nn.GELU(),
            nn.Linear(mlp_ratio * dim, dim, dtype=DTYPE),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.norm1(x))
        x = x + self.mlp(self.norm2(x))
        return x


def init_weights(module: nn.Module, generator: torch.Generator) -> None:
    """Normal(0, 0.02) linears / embeddings, zero biases, under one generator."""
    for m in module.modules():
        if isinstance(m, nn.Linear):
            with torch.no_grad():
                m.weight.normal_(0.0, 0.02, generator=generator)
                if m.bias is not None:
                    m.bias.zero_()
        elif isinstance(m, nn.Embedding):
            with torch.no_grad():
                m.weight.normal_(0.0, 0.02, generator=generator)
