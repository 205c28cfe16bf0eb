"""Instruction template rendering with task identifiers, and per-task target
strings for supervision.

The rendered template string is the contract with the language model's
sequence splicing and with the inference service request pipeline.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Optional, Sequence

from .boxes import NormalizedBox, serialize_box

IMAGE_FEATURE = "<ImageFeature>"
IMG_OPEN = "<Img>"
IMG_CLOSE = "</Img>"
INST_OPEN = "[INST]"
INST_CLOSE = "[/INST]"

# Template atoms may not appear inside an instruction; that is what keeps the
# rendered string unambiguous and round-trippable.
_RESERVED_ATOMS = (INST_OPEN, INST_CLOSE, IMG_OPEN, IMG_CLOSE, IMAGE_FEATURE)


class TemplateMismatchError(ValueError):
    """Text does not match the prompt template; carries the divergence offset."""

    def __init__(self, message: str, position: int) -> None:
        super().__init__(f"{message} (at offset {position})")
        self.position = position


class UnknownTaskError(ValueError):
    """Task identifier outside the closed six-value set."""


class TargetSchemaError(ValueError):
    """Record fields do not match what the task's target requires."""


class TaskIdentifier(str, Enum):
    CAPTION = "caption"
    VQA = "vqa"
    DETECTION = "detection"
    REFER = "refer"
    GROUNDING = "grounding"
    IDENTIFY = "identify"

    @property
    def tag(self) -> str:
        return f"[{self.value}]"

    @classmethod
    def from_name(cls, name: str) -> "TaskIdentifier":
        try:
            return cls(name)
        except ValueError:
            raise UnknownTaskError(f"unknown task identifier {name!r}") from None


@dataclass(frozen=True)
class PromptSpec:
    task: TaskIdentifier
    instruction: str
    image_slot_count: int = 1

    def __post_init__(self) -> None:
        if not self.instruction:
            raise ValueError("instruction must be non-empty")
        if self.image_slot_count != 1:
            raise ValueError("single-image model: image_slot_count must be 1")
        for atom in _RESERVED_ATOMS:
            if atom in self.instruction:
                raise ValueError(f"instruction may not contain template atom {atom!r}")


@dataclass(frozen=True)
class RenderedPrompt:
    text: str
    image_slot_range: tuple[int, int]


def render_prompt(spec: PromptSpec) -> RenderedPrompt:
    """Render ``[INST] <Img><ImageFeature></Img> [task] instruction [/INST]``.

    Exactly one space between template atoms, none inside the image tags.
    """
    prefix = f"{INST_OPEN} {IMG_OPEN}{IMAGE_FEATURE}{IMG_CLOSE} "
    text = f"{prefix}{spec.task.tag} {spec.instruction} {INST_CLOSE}"
    start = text.index(IMAGE_FEATURE)
    return RenderedPrompt(text=text, image_slot_range=(start, start + len(IMAGE_FEATURE)))


def _expect(text: str, pos: int, literal: str) -> int:
    for i, ch in enumerate(literal):
        if pos + i >= len(text) or text[pos + i] != ch:
            raise TemplateMismatchError(f"expected {literal!r}", pos + i)
    return pos + len(literal)


def parse_rendered(text: str) -> PromptSpec:
    """Inverse of render_prompt on well-formed prompts.

    Raises TemplateMismatchError with the position of first divergence, or
    UnknownTaskError for an identifier outside the closed set.
    """
    pos = _expect(text, 0, f"{INST_OPEN} {IMG_OPEN}{IMAGE_FEATURE}{IMG_CLOSE} [")
    close = text.find("]", pos)
    if close == -1:
        raise TemplateMismatchError("unterminated task identifier", len(text))
    task = TaskIdentifier.from_name(text[pos:close])
    pos = _expect(text, close, "] ")
    suffix = f" {INST_CLOSE}"
    if not text.endswith(suffix):
        raise TemplateMismatchError(f"expected trailing {suffix!r}", len(text))
    instruction = text[pos : len(text) - len(suffix)]
    if not instruction:
        raise TemplateMismatchError("empty instruction", pos)
    return PromptSpec(task=task, instruction=instruction)


def build_target(
    task: TaskIdentifier,
    *,
    text: Optional[str] = None,
    label: Optional[str] = None,
    boxes: Optional[Sequence[NormalizedBox]] = None,
    box: Optional[NormalizedBox] = None,
    segments: Optional[Sequence[tuple[str, NormalizedBox]]] = None,
) -> str:
    """Build the supervision string for one task.

    detection: ``label {<..>} {<..>}`` (phrase then each box, single spaces);
    refer: the serialized box alone; caption/vqa/identify: the reference text
    verbatim; grounding: phrase/box segments joined as inline spans.
    """
    if task is TaskIdentifier.DETECTION:
        if not label or not boxes:
            raise TargetSchemaError("detection target needs label and at least one box")
        return " ".join([label, *(serialize_box(b) for b in boxes)])
    if task is TaskIdentifier.REFER:
        if box is None:
            raise TargetSchemaError("refer target needs a box")
        return serialize_box(box)
    if task is TaskIdentifier.GROUNDING:
        if not segments:
            raise TargetSchemaError("grounding target needs (phrase, box) segments")
        for phrase, _ in segments:
            if not phrase:
                raise TargetSchemaError("grounding segment phrase must be non-empty")
        return " ".join(f"{phrase} {serialize_box(b)}" for phrase, b in segments)
    # caption / vqa / identify
    if text is None or not text:
        raise TargetSchemaError(f"{task.value} target needs reference text")
    return text
