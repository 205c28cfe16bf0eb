"""Byte-level toy causal language model: the unified multi-task interface.

Tokenization with template special tokens, splicing projected visual
embeddings into the text stream, autoregressive decoding, and low-rank
adapters on the attention query/value projections.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import torch
import torch.nn.functional as F
from torch import nn

from .layers import DTYPE, TransformerBlock
from .prompts import IMAGE_FEATURE, IMG_CLOSE, IMG_OPEN, INST_CLOSE, INST_OPEN

BOS = "<s>"
EOS = "</s>"
PAD = "<pad>"

SPECIAL_TOKENS = (IMG_OPEN, IMG_CLOSE, IMAGE_FEATURE, INST_OPEN, INST_CLOSE, BOS, EOS, PAD)


class TemplateError(ValueError):
    """Prompt does not carry exactly one image slot."""


class ContextLengthError(ValueError):
    """Sequence longer than the model's context window."""


class LoRAConfigError(ValueError):
    """Adapter target name matches nothing in the model."""


class Vocabulary:
    """256 byte tokens plus single-token template specials.

    Special-token strings map greedily to their single ids before byte
    fallback, and are never produced by byte decomposition.
    """

    def __init__(self, specials: tuple[str, ...] = SPECIAL_TOKENS) -> None:
        self.specials = tuple(specials)
        self._special_ids = {tok: 256 + i for i, tok in enumerate(self.specials)}
        self._by_length = sorted(self.specials, key=len, reverse=True)

    @property
    def size(self) -> int:
        return 256 + len(self.specials)

    def special_id(self, token: str) -> int:
        return self._special_ids[token]

    @property
    def bos_id(self) -> int:
        return self._special_ids[BOS]

    @property
    def eos_id(self) -> int:
        return self._special_ids[EOS]

    @property
    def pad_id(self) -> int:
        return self._special_ids[PAD]

    @property
    def image_feature_id(self) -> int:
        return self._special_ids[IMAGE_FEATURE]

    def tokenize(self, text: str) -> list[int]:
        ids: list[int] = []
        i = 0
        while i < len(text):
            for tok in self._by_length:
                if text.startswith(tok, i):
                    ids.append(self._special_ids[tok])
                    i += len(tok)
                    break
            else:
                # Plain text up to the next special occurrence.
                nxt = min(
                    (j for j in (text.find(t, i) for t in self.specials) if j != -1),
                    default=len(text),
                )
                ids.extend(text[i:nxt].encode("utf-8"))
                i = nxt
        return ids

    def detokenize(self, ids: list[int]) -> str:
        parts: list[str] = []
        buf = bytearray()
        for tid in ids:
            if tid < 256:
                buf.append(tid)
            else:
                if buf:
                    parts.append(buf.decode("utf-8", errors="replace"))
                    buf = bytearray()
                parts.append(self.specials[tid - 256])
        if buf:
            parts.append(buf.decode("utf-8", errors="replace"))
        return "".join(parts)


@dataclass(frozen=True)
class LMConfig:
    d_lm: int = 64
    layers: int = 2
    heads: int = 2
    context_length: int = 256
    vocab_size: int = 256 + len(SPECIAL_TOKENS)

    def __post_init__(self) -> None:
        if self.d_lm % self.heads != 0:
            raise ValueError("d_lm must be divisible by heads")


@dataclass(frozen=True)
class LoRAConfig:
    rank: int = 4
    alpha: float = 8.0
    targets: tuple[str, ...] = ("q_proj", "v_proj")
    dropout: float = 0.0

    def __post_init__(self) -> None:
        if self.rank < 1:
            raise ValueError("rank must be >= 1")
        if self.alpha <= 0:
            raise ValueError("alpha must be > 0")
        if self.dropout != 0.0:
            raise ValueError("adapter dropout is fixed at 0")


@dataclass(frozen=True)
class GenerationConfig:
    max_new_tokens: int = 64
    mode: str = "greedy"  # "greedy" | "sample"
    temperature: float = 1.0
    seed: Optional[int] = None

    def __post_init__(self) -> None:
        if self.max_new_tokens < 1:
            raise ValueError("max_new_tokens must be >= 1")
        if self.mode not in ("greedy", "sample"):
            raise ValueError(f"unknown decode mode {self.mode!r}")
        if self.mode == "sample" and self.temperature <= 0:
            raise ValueError("temperature must be > 0 when sampling")


@dataclass
class GenerationResult:
    text: str
    token_ids: list[int] = field(default_factory=list)
    truncated: bool = False


class TinyCausalLM(nn.Module):
    """Decoder-only transformer over the byte+special vocabulary."""

    def __init__(self, cfg: LMConfig) -> None:
        super().__init__()
        self.cfg = cfg
        self.tok_embed = nn.Embedding(cfg.vocab_size, cfg.d_lm, dtype=DTYPE)
        self.pos_embed = nn.Parameter(torch.zeros(cfg.context_length, cfg.d_lm, dtype=DTYPE))
        self.blocks = nn.ModuleList(
            TransformerBlock(cfg.d_lm, cfg.heads, causal=True) for _ in range(cfg.layers)
        )
        self.norm = nn.LayerNorm(cfg.d_lm, dtype=DTYPE)
        self.head = nn.Linear(cfg.d_lm, cfg.vocab_size, bias=False, dtype=DTYPE)

    def embed_tokens(self, ids: list[int] | torch.Tensor) -> torch.Tensor:
        if not isinstance(ids, torch.Tensor):
            ids = torch.tensor(ids, dtype=torch.long)
        return self.tok_embed(ids)

    def forward_embeddings(self, embs: torch.Tensor) -> torch.Tensor:
        """(L, d) or (B, L, d) content embeddings -> logits over the vocabulary.

        Positions are indexed continuously across the sequence, so spliced
        visual embeddings share the text positional table.
        """
        single = embs.ndim == 2
        if single:
            embs = embs.unsqueeze(0)
        length = embs.shape[1]
        if length > self.cfg.context_length:
            raise ContextLengthError(f"sequence {length} > context {self.cfg.context_length}")
        x = embs + self.pos_embed[:length]
        for block in self.blocks:
            x = block(x)
        logits = self.head(self.norm(x))
        return logits.squeeze(0) if single else logits

    def forward_tokens(self, ids: list[int] | torch.Tensor) -> torch.Tensor:
        return self.forward_embeddings(self.embed_tokens(ids))


def embed_sequence(lm: TinyCausalLM, vocab: Vocabulary, prompt_ids: list[int], visual: torch.Tensor) -> torch.Tensor:
    """Replace the single <ImageFeature> position with the projected visual
    sequence; length grows by len(visual) - 1."""
    slots = [i for i, t in enumerate(prompt_ids) if t == vocab.image_feature_id]
    if len(slots) != 1:
        raise TemplateError(f"prompt must contain exactly one image slot, found {len(slots)}")
    if visual.ndim != 2 or visual.shape[0] < 1:
        raise TemplateError("visual embedding sequence must be non-empty (m, d_lm)")
    k = slots[0]
    embs = lm.embed_tokens(prompt_ids)
    return torch.cat([embs[:k], visual.to(embs.dtype), embs[k + 1 :]], dim=0)


def generate(
    lm: TinyCausalLM,
    vocab: Vocabulary,
    prompt_embs: torch.Tensor,
    gen: GenerationConfig,
) -> GenerationResult:
    """Autoregressive decoding from spliced prompt embeddings.

    Greedy mode is deterministic; sampling is deterministic under a fixed
    seed. Stops at EOS (excluded from the output) or max_new_tokens; hitting
    the context window mid-generation sets the truncated flag.
    """
    rng = None
    if gen.mode == "sample":
        rng = torch.Generator()
        rng.manual_seed(gen.seed if gen.seed is not None else 0)

    embs = prompt_embs
    out_ids: list[int] = []
    truncated = False
    with torch.no_grad():
        for _ in range(gen.max_new_tokens):
            if embs.shape[0] >= lm.cfg.context_length:
                truncated = True
                break
            logits = lm.forward_embeddings(embs)[-1]
            if gen.mode == "greedy":
                next_id = int(torch.argmax(logits).item())
            else:
                probs = torch.softmax(logits / gen.temperature, dim=-1)
                next_id = int(torch.multinomial(probs, 1, generator=rng).item())
            if next_id == vocab.eos_id:
                break
            out_ids.append(next_id)
            embs = torch.cat([embs, lm.embed_tokens([next_id])], dim=0)
    return GenerationResult(text=vocab.detokenize(out_ids), token_ids=out_ids, truncated=truncated)


class LoRALinear(nn.Module):
    """W x + (alpha/r)·B·A x with the base weight frozen.

    A starts small-random, B starts at zero, so the adapted model is exactly
    the base model at initialization.
    """

    def __init__(self, base: nn.Linear, cfg: LoRAConfig, generator: Optional[torch.Generator] = None) -> None:
        super().__init__()
        self.base = base
        self.base.requires_grad_(False)
        in_dim = base.in_features
        out_dim = base.out_features
        a = torch.empty(cfg.rank, in_dim, dtype=DTYPE)
        a.normal_(0.0, 0.02, generator=generator)
        self.A = nn.Parameter(a)
        self.B = nn.Parameter(torch.zeros(out_dim, cfg.rank, dtype=DTYPE))
        self.scaling = cfg.alpha / cfg.rank

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.base(x) + self.scaling * F.linear(F.linear(x, self.A), self.B)


def apply_lora(
    model: nn.Module, cfg: LoRAConfig, generator: Optional[torch.Generator] = None
) -> list[str]:
    """Wrap every target linear in-place; returns the adapted module paths.

    Only A and B join the trainable partition; everything else in the model
    is frozen here.
    """
    model.requires_grad_(False)
    adapted: list[str] = []
    for target in cfg.targets:
        hits = [
            (name, module)
            for name, module in model.named_modules()
            if hasattr(module, target) and isinstance(getattr(module, target), nn.Linear)
        ]
        if not hits:
            raise LoRAConfigError(f"no linear named {target!r} in model")
        for name, module in hits:
            wrapped = LoRALinear(getattr(module, target), cfg, generator)
            setattr(module, target, wrapped)
            adapted.append(f"{name}.{target}" if name else target)
    return adapted


def lora_parameter_count(model: nn.Module) -> int:
    """Σ over adapted targets of r·(d_in + d_out)."""
    total = 0
    for module in model.modules():
        if isinstance(module, LoRALinear):
            total += module.A.numel() + module.B.numel()
    return total
