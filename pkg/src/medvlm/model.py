"""Model bundle: frozen vision encoder + trainable projector + causal LM with
low-rank adapters, plus the end-to-end inference path.

The bundle owns the canonical weight naming used by checkpoints:
``encoder.*``, ``projector.weight``/``projector.bias``, ``lm.<layer>.<matrix>``
for base LM weights, and ``lora.<target>.A``/``.B`` for adapters.
"""

from __future__ import annotations

import hashlib
import time
from dataclasses import asdict, dataclass, field
from typing import Optional

import torch
from torch import nn

from .boxes import GroundedSpan, ImageSize
from .data import TrainingSample
from .lm import (
    GenerationConfig,
    GenerationResult,
    LMConfig,
    LoRAConfig,
    TinyCausalLM,
    Vocabulary,
    apply_lora,
    embed_sequence,
    generate,
)
from .projector import ProjectionConfig, TokenProjector, group_tokens
from .prompts import PromptSpec, TaskIdentifier, render_prompt
from .vision import EncoderConfig, VisionEncoder, decode_image, preprocess
from . import boxes as box_codec


@dataclass(frozen=True)
class BundleConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    projector: ProjectionConfig = field(default_factory=lambda: ProjectionConfig(d_vis=32, d_lm=64))
    lm: LMConfig = field(default_factory=LMConfig)
    lora: Optional[LoRAConfig] = field(default_factory=LoRAConfig)
    image_side: int = 64
    seed: int = 0

    def __post_init__(self) -> None:
        if self.projector.d_vis != self.encoder.embed_dim:
            raise ValueError("projector d_vis must equal encoder embed_dim")
        if self.image_side % self.encoder.patch_size != 0:
            raise ValueError("image_side must be divisible by encoder patch_size")

    def to_dict(self) -> dict:
        d = asdict(self)
        if self.lora is not None:
            d["lora"]["targets"] = list(self.lora.targets)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "BundleConfig":
        lora = d.get("lora")
        return cls(
            encoder=EncoderConfig(**d["encoder"]),
            projector=ProjectionConfig(**d["projector"]),
            lm=LMConfig(**d["lm"]),
            lora=LoRAConfig(
                rank=lora["rank"],
                alpha=lora["alpha"],
                targets=tuple(lora["targets"]),
                dropout=lora["dropout"],
            )
            if lora
            else None,
            image_side=d["image_side"],
            seed=d["seed"],
        )


@dataclass
class InferenceOutput:
    text: str
    spans: list[GroundedSpan]
    malformed_count: int
    original_size: ImageSize
    truncated: bool


class ModelBundle(nn.Module):
    """Everything needed to run or fine-tune the pipeline on one machine."""

    def __init__(self, config: BundleConfig, vocab: Optional[Vocabulary] = None) -> None:
        super().__init__()
        self.config = config
        self.vocab = vocab or Vocabulary()
        torch.manual_seed(config.seed)
        self.encoder = VisionEncoder(config.encoder)
        self.projector = TokenProjector(config.projector)
        self.lm = TinyCausalLM(config.lm)
        if config.lora is not None:
            gen = torch.Generator().manual_seed(config.seed + 1)
            self.adapted_targets = apply_lora(self.lm, config.lora, gen)
        else:
            self.adapted_targets = []
        self.encoder.requires_grad_(False)
        self.created_at = time.time()

    # -- partitions ---------------------------------------------------------

    def trainable_parameters(self) -> list[nn.Parameter]:
        return [p for p in self.parameters() if p.requires_grad]

    def named_weight_tensors(self) -> dict[str, torch.Tensor]:
        """Canonical checkpoint name -> parameter tensor, sorted by name."""
        out: dict[str, torch.Tensor] = {}
        for name, param in self.named_parameters():
            out[canonical_weight_name(name)] = param
        return dict(sorted(out.items()))

    def weights_checksum(self) -> str:
        digest = hashlib.sha256()
        for name, tensor in self.named_weight_tensors().items():
            digest.update(name.encode())
            digest.update(tensor.detach().numpy().tobytes())
        return digest.hexdigest()

    # -- forward pieces -----------------------------------------------------

    def grouped_visual_tokens(self, img: torch.Tensor) -> torch.Tensor:
        """Frozen-encoder part of the visual path; constant across training
        steps, so callers may cache it per image."""
        with torch.no_grad():
            return group_tokens(self.encoder(img))

    def visual_embeddings(self, img: torch.Tensor) -> torch.Tensor:
        """(3, S, S) image tensor -> (n/4, d_lm) projected visual sequence."""
        return self.projector(self.grouped_visual_tokens(img))

    def prompt_token_ids(self, prompt_text: str) -> list[int]:
        return [self.vocab.bos_id] + self.vocab.tokenize(prompt_text)

    def spliced_prompt(self, prompt_text: str, img: torch.Tensor) -> torch.Tensor:
        visual = self.visual_embeddings(img)
        return embed_sequence(self.lm, self.vocab, self.prompt_token_ids(prompt_text), visual)

    def prompt_length(self, prompt_text: str) -> int:
        """Token positions the spliced prompt occupies."""
        n_visual = (self.config.image_side // self.config.encoder.patch_size) ** 2 // 4
        return len(self.prompt_token_ids(prompt_text)) - 1 + n_visual

    def context_length(self) -> int:
        return self.lm.cfg.context_length

    # -- end-to-end inference -----------------------------------------------

    def run_inference(
        self,
        image_bytes: bytes,
        task: TaskIdentifier,
        instruction: str,
        gen: GenerationConfig,
    ) -> InferenceOutput:
        """image -> preprocess -> encode -> project -> prompt -> generate ->
        parse spans. Spans stay normalized; callers map them to the original
        pixel space."""
        original = decode_image(image_bytes)
        original_size = ImageSize(width=original.width, height=original.height)
        img = preprocess(image_bytes, self.config.image_side)
        prompt = render_prompt(PromptSpec(task=task, instruction=instruction))
        embs = self.spliced_prompt(prompt.text, img)
        result: GenerationResult = generate(self.lm, self.vocab, embs, gen)
        spans, malformed = box_codec.parse_spans(result.text)
        return InferenceOutput(
            text=result.text,
            spans=spans,
            malformed_count=malformed,
            original_size=original_size,
            truncated=result.truncated,
        )


def canonical_weight_name(param_name: str) -> str:
    """Map a raw module parameter path to its checkpoint archive name."""
    if param_name.startswith(("encoder.", "projector.")):
        return param_name
    if param_name.startswith("lm."):
        rest = param_name[len("lm.") :]
        if rest.endswith((".A", ".B")):
            return f"lora.{rest}"
        return "lm." + rest.replace(".base.", ".")
    return param_name


def build_sample_tensors(
    bundle: ModelBundle, sample: TrainingSample, img: torch.Tensor
) -> tuple[torch.Tensor, list[int]]:
    """(content embeddings, target ids incl. EOS) for one training sample.

    The prompt region is everything through [/INST] plus the spliced visual
    positions; only the returned target ids are supervised.
    """
    spliced = bundle.spliced_prompt(sample.prompt.text, img)
    target_ids = bundle.vocab.tokenize(sample.target) + [bundle.vocab.eos_id]
    target_embs = bundle.lm.embed_tokens(target_ids)
    return torch.cat([spliced, target_embs], dim=0), target_ids
