"""Manifest schemas for the task-data families, record-to-sample conversion,
deterministic multi-task stream mixing, and synthetic fixtures.

Manifests are JSON-lines, one object per line; field names match the record
dataclasses exactly. Image paths are resolved relative to the manifest's
directory. The gated clinical datasets themselves are never shipped; tiny
synthetic manifests back all tests.
"""

from __future__ import annotations

import io
import json
import logging
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

from PIL import Image

from .boxes import BoxError, ImageSize, PixelBox, normalize_box, parse_spans
from .prompts import PromptSpec, RenderedPrompt, TaskIdentifier, build_target, render_prompt

log = logging.getLogger(__name__)

# Table-row instruction used for every report-generation sample.
CAPTION_INSTRUCTION = "Could you describe the contents of this image for me?"

MANIFEST_KINDS = ("report", "vqa", "detection")


class ManifestError(ValueError):
    """Schema violation in a manifest; names the file, line, and field."""

    def __init__(self, path: Path | str, line: int, message: str) -> None:
        super().__init__(f"{path}:{line}: {message}")
        self.line = line


@dataclass(frozen=True)
class ReportGenRecord:
    image_path: str
    report: str


@dataclass(frozen=True)
class VQARecord:
    image_path: str
    question: str
    answer: str
    closed_ended: bool = False


@dataclass(frozen=True)
class DetectionRecord:
    image_path: str
    label: str
    boxes: tuple[PixelBox, ...]
    image_size: ImageSize


Record = ReportGenRecord | VQARecord | DetectionRecord


@dataclass(frozen=True)
class TrainingSample:
    image_path: str
    prompt: RenderedPrompt
    target: str
    task: TaskIdentifier


@dataclass(frozen=True)
class MixConfig:
    weights: dict[TaskIdentifier, float]
    seed: int = 0

    def __post_init__(self) -> None:
        if not self.weights or all(w <= 0 for w in self.weights.values()):
            raise ValueError("at least one task weight must be positive")
        if any(w < 0 for w in self.weights.values()):
            raise ValueError("weights must be non-negative")
        total = sum(self.weights.values())
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"weights must sum to 1, got {total}")


def _require(obj: dict, name: str, path: Path | str, line: int):
    if name not in obj:
        raise ManifestError(path, line, f"missing field {name!r}")
    return obj[name]


def _nonempty_str(obj: dict, name: str, path: Path | str, line: int) -> str:
    value = _require(obj, name, path, line)
    if not isinstance(value, str) or not value:
        raise ManifestError(path, line, f"field {name!r} must be a non-empty string")
    return value


def _parse_detection(obj: dict, path: Path | str, line: int) -> DetectionRecord:
    size_obj = _require(obj, "image_size", path, line)
    try:
        size = ImageSize(width=int(size_obj["width"]), height=int(size_obj["height"]))
    except (KeyError, TypeError, ValueError, BoxError) as exc:
        raise ManifestError(path, line, f"field 'image_size' invalid: {exc}") from exc
    raw_boxes = _require(obj, "boxes", path, line)
    if not isinstance(raw_boxes, list) or not raw_boxes:
        raise ManifestError(path, line, "field 'boxes' must be a non-empty list")
    boxes = []
    for b in raw_boxes:
        try:
            box = PixelBox(
                x_left=float(b["x_left"]),
                y_top=float(b["y_top"]),
                x_right=float(b["x_right"]),
                y_bottom=float(b["y_bottom"]),
            )
            box.validate(size)
        except (KeyError, TypeError, ValueError) as exc:
            raise ManifestError(path, line, f"field 'boxes' invalid: {exc}") from exc
        boxes.append(box)
    return DetectionRecord(
        image_path=_nonempty_str(obj, "image_path", path, line),
        label=_nonempty_str(obj, "label", path, line),
        boxes=tuple(boxes),
        image_size=size,
    )


def load_manifest(path: str | Path, kind: str) -> list[Record]:
    """Read and validate a JSON-lines manifest of the given kind.

    Image paths are resolved against the manifest directory; a missing image
    file is only a warning here (it fails later, at batch assembly).
    """
    if kind not in MANIFEST_KINDS:
        raise ValueError(f"unknown manifest kind {kind!r}, expected one of {MANIFEST_KINDS}")
    path = Path(path)
    base = path.parent
    records: list[Record] = []
    with path.open() as fh:
        for lineno, raw in enumerate(fh, start=1):
            raw = raw.strip()
            if not raw:
                continue
            try:
                obj = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise ManifestError(path, lineno, f"invalid JSON: {exc}") from exc
            if not isinstance(obj, dict):
                raise ManifestError(path, lineno, "line must be a JSON object")
            image_path = _nonempty_str(obj, "image_path", path, lineno)
            resolved = str(base / image_path)
            if kind == "report":
                record: Record = ReportGenRecord(
                    image_path=resolved, report=_nonempty_str(obj, "report", path, lineno)
                )
            elif kind == "vqa":
                record = VQARecord(
                    image_path=resolved,
                    question=_nonempty_str(obj, "question", path, lineno),
                    answer=_nonempty_str(obj, "answer", path, lineno),
                    closed_ended=bool(obj.get("closed_ended", False)),
                )
            else:
                record = _parse_detection({**obj, "image_path": resolved}, path, lineno)
            if not Path(resolved).is_file():
                log.warning("%s:%d: image file %s not found (deferred)", path, lineno, resolved)
            records.append(record)
    return records


def to_training_sample(record: Record) -> TrainingSample:
    """Turn one validated record into a prompt/target supervision pair."""
    if isinstance(record, DetectionRecord):
        normalized = [normalize_box(b, record.image_size) for b in record.boxes]
        prompt = render_prompt(PromptSpec(task=TaskIdentifier.DETECTION, instruction=record.label))
        target = build_target(TaskIdentifier.DETECTION, label=record.label, boxes=normalized)
        task = TaskIdentifier.DETECTION
    elif isinstance(record, VQARecord):
        prompt = render_prompt(PromptSpec(task=TaskIdentifier.VQA, instruction=record.question))
        target = build_target(TaskIdentifier.VQA, text=record.answer)
        task = TaskIdentifier.VQA
    elif isinstance(record, ReportGenRecord):
        prompt = render_prompt(PromptSpec(task=TaskIdentifier.CAPTION, instruction=CAPTION_INSTRUCTION))
        target = build_target(TaskIdentifier.CAPTION, text=record.report)
        task = TaskIdentifier.CAPTION
    else:
        raise TypeError(f"unsupported record type {type(record).__name__}")
    sample = TrainingSample(image_path=record.image_path, prompt=prompt, target=target, task=task)
    if task in (TaskIdentifier.DETECTION, TaskIdentifier.REFER, TaskIdentifier.GROUNDING):
        spans, malformed = parse_spans(sample.target)
        assert malformed == 0 and spans, "grounded target must re-parse cleanly"
    return sample


def mix_streams(
    streams: dict[TaskIdentifier, Sequence[TrainingSample]], cfg: MixConfig
) -> Iterator[TrainingSample]:
    """Infinite deterministic sample stream.

    Each step draws a task by weight with the seeded generator, then yields
    the next sample from that task's shuffled stream; an exhausted stream is
    an epoch boundary and reshuffles with the same generator.
    """
    active = [(task, w) for task, w in cfg.weights.items() if w > 0]
    for task, _ in active:
        if not streams.get(task):
            raise ValueError(f"positive weight for {task.value} but its stream is empty")
    rng = random.Random(cfg.seed)
    tasks = [t for t, _ in active]
    weights = [w for _, w in active]
    orders: dict[TaskIdentifier, list[TrainingSample]] = {}
    cursors: dict[TaskIdentifier, int] = {}
    for task in tasks:
        order = list(streams[task])
        rng.shuffle(order)
        orders[task] = order
        cursors[task] = 0
    while True:
        task = rng.choices(tasks, weights=weights, k=1)[0]
        if cursors[task] >= len(orders[task]):
            order = list(streams[task])
            rng.shuffle(order)
            orders[task] = order
            cursors[task] = 0
        yield orders[task][cursors[task]]
        cursors[task] += 1


# ---------------------------------------------------------------------------
# Synthetic fixtures: programmatic images with exact boxes, so detection can
# be trained and evaluated without any clinical data.
# ---------------------------------------------------------------------------


@dataclass
class SyntheticDataset:
    root: Path
    detection_manifest: Path
    report_manifest: Path
    vqa_manifest: Path
    detection_records: list[DetectionRecord] = field(default_factory=list)


def make_rect_image(size: ImageSize, box: PixelBox, fill: int = 220, background: int = 30) -> bytes:
    """Bright rectangle on a dark background, PNG-encoded."""
    img = Image.new("L", (size.width, size.height), color=background)
    px = img.load()
    for y in range(int(box.y_top), int(box.y_bottom)):
        for x in range(int(box.x_left), int(box.x_right)):
            px[x, y] = fill
    buf = io.BytesIO()
    img.convert("RGB").save(buf, format="PNG")
    return buf.getvalue()


def build_synthetic_dataset(
    root: str | Path,
    n_detection: int = 8,
    n_report: int = 4,
    n_vqa: int = 4,
    side: int = 64,
    seed: int = 0,
) -> SyntheticDataset:
    """Write images and the three manifests under root; deterministic in seed."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    rng = random.Random(seed)
    size = ImageSize(width=side, height=side)

    det_lines = []
    det_records = []
    for i in range(n_detection):
        w = rng.randrange(side // 4, side // 2)
        h = rng.randrange(side // 4, side // 2)
        x0 = rng.randrange(0, side - w)
        y0 = rng.randrange(0, side - h)
        box = PixelBox(x_left=x0, y_top=y0, x_right=x0 + w, y_bottom=y0 + h)
        name = f"det_{i}.png"
        (root / name).write_bytes(make_rect_image(size, box))
        det_lines.append(
            json.dumps(
                {
                    "image_path": name,
                    "label": "lesion",
                    "boxes": [
                        {
                            "x_left": box.x_left,
                            "y_top": box.y_top,
                            "x_right": box.x_right,
                            "y_bottom": box.y_bottom,
                        }
                    ],
                    "image_size": {"width": side, "height": side},
                }
            )
        )
        det_records.append(
            DetectionRecord(
                image_path=str(root / name), label="lesion", boxes=(box,), image_size=size
            )
        )

    rep_lines = []
    for i in range(n_report):
        gray = 40 + 30 * i
        name = f"rep_{i}.png"
        img = Image.new("RGB", (side, side), color=(gray, gray, gray))
        buf = io.BytesIO()
        img.save(buf, format="PNG")
        (root / name).write_bytes(buf.getvalue())
        rep_lines.append(json.dumps({"image_path": name, "report": f"plain scan grade {i}."}))

    vqa_lines = []
    for i in range(n_vqa):
        gray = 60 + 40 * i
        name = f"vqa_{i}.png"
        img = Image.new("RGB", (side, side), color=(gray, 20, 120))
        buf = io.BytesIO()
        img.save(buf, format="PNG")
        (root / name).write_bytes(buf.getvalue())
        vqa_lines.append(
            json.dumps(
                {
                    "image_path": name,
                    "question": f"what grade is shown in view {i}?",
                    "answer": f"grade {i}",
                    "closed_ended": False,
                }
            )
        )

    det_path = root / "detection.jsonl"
    rep_path = root / "report.jsonl"
    vqa_path = root / "vqa.jsonl"
    det_path.write_text("\n".join(det_lines) + "\n")
    rep_path.write_text("\n".join(rep_lines) + "\n")
    vqa_path.write_text("\n".join(vqa_lines) + "\n")
    return SyntheticDataset(
        root=root,
        detection_manifest=det_path,
        report_manifest=rep_path,
        vqa_manifest=vqa_path,
        detection_records=det_records,
    )
