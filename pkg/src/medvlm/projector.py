"""Merge groups of four sequence-adjacent visual tokens and project them into
the language model's embedding space."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .layers import DTYPE
from .vision import ShapeError, VisualTokens

GROUP_SIZE = 4


@dataclass(frozen=True)
class ProjectionConfig:
    d_vis: int
    d_lm: int
    group_size: int = GROUP_SIZE

    def __post_init__(self) -> None:
        if self.group_size != GROUP_SIZE:
            raise ValueError(f"group_size is fixed at {GROUP_SIZE}")
        if self.d_vis < 1 or self.d_lm < 1:
            raise ValueError("embedding dims must be >= 1")


def group_tokens(visual: VisualTokens) -> torch.Tensor:
    """Concatenate tokens 4i..4i+3 (row-major sequence order) into one vector.

    (n, d) -> (n/4, 4d); n must be divisible by 4.
    """
    tokens = visual.tokens
    n, d = tokens.shape
    if n % GROUP_SIZE != 0:
        raise ShapeError(f"token count {n} not divisible by group size {GROUP_SIZE}")
    return tokens.reshape(n // GROUP_SIZE, GROUP_SIZE * d)


class TokenProjector(nn.Module):
    """Trainable affine map from grouped visual vectors to LM embeddings.

    Parameters serialize as ``projector.weight`` / ``projector.bias``.
    """

    def __init__(self, cfg: ProjectionConfig) -> None:
        super().__init__()
        self.cfg = cfg
        in_dim = GROUP_SIZE * cfg.d_vis
        self.weight = nn.Parameter(torch.empty(cfg.d_lm, in_dim, dtype=DTYPE))
        self.bias = nn.Parameter(torch.zeros(cfg.d_lm, dtype=DTYPE))
        with torch.no_grad():
            self.weight.normal_(0.0, in_dim**-0.5)

    def forward(self, grouped: torch.Tensor) -> torch.Tensor:
        if grouped.shape[-1] != GROUP_SIZE * self.cfg.d_vis:
            raise ShapeError(
                f"grouped dim {grouped.shape[-1]} != {GROUP_SIZE}*{self.cfg.d_vis}"
            )
        return F.linear(grouped, self.weight, self.bias)


def project(grouped: torch.Tensor, projector: TokenProjector) -> torch.Tensor:
    return projector(grouped)
