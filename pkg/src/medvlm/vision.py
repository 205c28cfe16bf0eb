"""Image preprocessing and a frozen toy vision encoder.

The encoder is a stand-in with the same interface a pretrained backbone would
have: patch embedding, interpolated 2D positional encoding, a small
transformer stack, fixed random weights under a recorded seed, and all
parameters frozen. Swapping in a real backbone is a construction-time change.
"""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError
from torch import nn

from .layers import DTYPE, TransformerBlock, init_weights

# Fixed natural-image channel statistics; applied after scaling to [0,1].
CHANNEL_MEAN = (0.485, 0.456, 0.406)
CHANNEL_STD = (0.229, 0.224, 0.225)


class ImageDecodeError(ValueError):
    """Raw bytes could not be decoded as an image."""


class ShapeError(ValueError):
    """Tensor shape incompatible with the configured geometry."""


@dataclass(frozen=True)
class EncoderConfig:
    patch_size: int = 8
    embed_dim: int = 32
    depth: int = 2
    heads: int = 2
    native_grid: int = 8
    seed: int = 0

    def __post_init__(self) -> None:
        if self.patch_size < 1:
            raise ValueError("patch_size must be >= 1")
        if self.embed_dim % self.heads != 0:
            raise ValueError("embed_dim must be divisible by heads")
        if self.native_grid < 2:
            raise ValueError("native_grid must be >= 2")


@dataclass(frozen=True)
class VisualTokens:
    """Row-major grid of token vectors: tokens[r * grid_side + c] is cell (r, c)."""

    tokens: torch.Tensor  # (grid_side**2, embed_dim)
    grid_side: int

    def __post_init__(self) -> None:
        if self.tokens.shape[0] != self.grid_side**2:
            raise ShapeError(
                f"{self.tokens.shape[0]} tokens do not fill a {self.grid_side}x{self.grid_side} grid"
            )


def decode_image(data: bytes) -> Image.Image:
    try:
        img = Image.open(io.BytesIO(data))
        img.load()
    except (UnidentifiedImageError, OSError, ValueError) as exc:
        raise ImageDecodeError(f"cannot decode image bytes: {exc}") from exc
    return img.convert("RGB")


def preprocess(data: bytes, target_side: int) -> torch.Tensor:
    """Decode, bilinear-resize to target_side², and channel-normalize.

    No augmentation of any kind: the same bytes always produce the same
    tensor. Returns (3, target_side, target_side) float64.
    """
    img = decode_image(data).resize((target_side, target_side), Image.BILINEAR)
    arr = np.asarray(img, dtype=np.float64) / 255.0  # (H, W, 3)
    mean = np.asarray(CHANNEL_MEAN)
    std = np.asarray(CHANNEL_STD)
    arr = (arr - mean) / std
    return torch.from_numpy(arr.transpose(2, 0, 1).copy())


def interpolate_positional_encoding(pe: torch.Tensor, native_grid: int, target_grid: int) -> torch.Tensor:
    """Resample a (native_grid², d) positional table to (target_grid², d).

    Corner-aligned bilinear over the 2D grid: the four corner vectors are
    preserved exactly, and target_grid == native_grid is an exact identity.
    """
    if target_grid < 1:
        raise ValueError(f"target_grid must be >= 1, got {target_grid}")
    if native_grid < 2:
        raise ValueError(f"native_grid must be >= 2, got {native_grid}")
    if pe.shape[0] != native_grid**2:
        raise ShapeError(f"positional table has {pe.shape[0]} rows, expected {native_grid**2}")
    if target_grid == native_grid:
        return pe.clone()

    d = pe.shape[1]
    grid = pe.reshape(native_grid, native_grid, d)
    if target_grid == 1:
        coords = torch.zeros(1, dtype=DTYPE)
    else:
        idx = torch.arange(target_grid, dtype=DTYPE)
        coords = idx * (native_grid - 1) / (target_grid - 1)
    lo = coords.floor().long().clamp(max=native_grid - 2)
    frac = (coords - lo.to(DTYPE)).reshape(-1, 1)

    rows = grid[lo] * (1 - frac).unsqueeze(-1) + grid[lo + 1] * frac.unsqueeze(-1)
    # rows: (target_grid, native_grid, d); now interpolate along columns
    out = rows[:, lo, :] * (1 - frac).unsqueeze(0) + rows[:, lo + 1, :] * frac.unsqueeze(0)
    return out.reshape(target_grid**2, d)


class VisionEncoder(nn.Module):
    """Frozen ViT-style encoder producing a row-major token grid."""

    def __init__(self, cfg: EncoderConfig) -> None:
        super().__init__()
        self.cfg = cfg
        p = cfg.patch_size
        self.patch_embed = nn.Linear(3 * p * p, cfg.embed_dim, dtype=DTYPE)
        self.pos_embed = nn.Parameter(torch.empty(cfg.native_grid**2, cfg.embed_dim, dtype=DTYPE))
        self.blocks = nn.ModuleList(
            TransformerBlock(cfg.embed_dim, cfg.heads, causal=False) for _ in range(cfg.depth)
        )
        self.norm = nn.LayerNorm(cfg.embed_dim, dtype=DTYPE)

        gen = torch.Generator().manual_seed(cfg.seed)
        init_weights(self, gen)
        with torch.no_grad():
            self.pos_embed.normal_(0.0, 0.02, generator=gen)
        self.requires_grad_(False)
        self.eval()

    def extract_patches(self, img: torch.Tensor) -> torch.Tensor:
        """(3, S, S) image -> (grid², 3·p²) row-major patch vectors."""
        if img.ndim != 3 or img.shape[0] != 3 or img.shape[1] != img.shape[2]:
            raise ShapeError(f"expected square (3, S, S) image, got {tuple(img.shape)}")
        side = img.shape[1]
        p = self.cfg.patch_size
        if side % p != 0:
            raise ShapeError(f"resolution {side} not divisible by patch size {p}")
        g = side // p
        patches = img.reshape(3, g, p, g, p).permute(1, 3, 0, 2, 4)  # (g, g, 3, p, p)
        return patches.reshape(g * g, 3 * p * p).to(DTYPE)

    def forward(self, img: torch.Tensor) -> VisualTokens:
        patches = self.extract_patches(img)
        grid_side = int(round(patches.shape[0] ** 0.5))
        x = self.patch_embed(patches)
        if self.cfg.depth == 0:
            # Patch-embedding-only ablation: no positions, no mixing.
            return VisualTokens(tokens=x, grid_side=grid_side)
        x = x + interpolate_positional_encoding(self.pos_embed, self.cfg.native_grid, grid_side)
        x = x.unsqueeze(0)
        for block in self.blocks:
            x = block(x)
        return VisualTokens(tokens=self.norm(x).squeeze(0), grid_side=grid_side)


def encode_image(img: torch.Tensor, encoder: VisionEncoder) -> VisualTokens:
    """Functional wrapper; the encoder is frozen, so this is deterministic."""
    with torch.no_grad():
        return encoder(img)
