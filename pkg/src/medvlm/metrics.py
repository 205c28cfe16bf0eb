"""Metric suite: embedding-cosine report scores, sentence-paired clinical
similarity, detection IoU with greedy matching, and the human-vote tally.

Report-style scores are presented on a 0-100 scale; detection IoU is raw
[0,1]. Drivers surface both conventions.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Protocol, Sequence

import numpy as np

from .boxes import PixelBox


class UndefinedSimilarityError(ValueError):
    """Cosine similarity is undefined (zero vector or empty report)."""


class AlignmentError(ValueError):
    """Prediction/reference keys do not line up."""


class TextEmbedder(Protocol):
    def embed(self, text: str) -> np.ndarray: ...


class CharBagEmbedder:
    """Deterministic test embedder: a fixed-size character-count vector."""

    def __init__(self, dim: int = 256) -> None:
        self.dim = dim

    def embed(self, text: str) -> np.ndarray:
        v = np.zeros(self.dim, dtype=np.float64)
        for ch in text:
            v[ord(ch) % self.dim] += 1.0
        return v


class SentenceEncoderEmbedder:
    """Adapter for a pretrained sentence encoder (loaded lazily, not bundled)."""

    def __init__(self, model_name: str) -> None:
        from sentence_transformers import SentenceTransformer

        self._model = SentenceTransformer(model_name)

    def embed(self, text: str) -> np.ndarray:
        return np.asarray(self._model.encode([text])[0], dtype=np.float64)


def cosine(u: np.ndarray, v: np.ndarray) -> float:
    nu = float(np.linalg.norm(u))
    nv = float(np.linalg.norm(v))
    if nu == 0.0 or nv == 0.0:
        raise UndefinedSimilarityError("cosine undefined for zero vector")
    return float(np.dot(u, v) / (nu * nv))


def bert_sim(candidate: str, reference: str, embedder: TextEmbedder) -> float:
    """Whole-text embedding cosine on a 0-100 scale (negatives clamp to 0)."""
    if not candidate or not reference:
        raise UndefinedSimilarityError("texts must be non-empty")
    return max(0.0, cosine(embedder.embed(candidate), embedder.embed(reference))) * 100.0


_SENTENCE_SPLIT = re.compile(r"[.\n]")


def split_sentences(text: str) -> list[str]:
    return [s.strip() for s in _SENTENCE_SPLIT.split(text) if s.strip()]


def chexbert_sim(candidate_report: str, reference_report: str, clinical_embedder: TextEmbedder) -> float:
    """Index-aligned sentence-pair cosine, averaged over max(m, n) pairs.

    Sentences split on period/newline; unpaired sentences contribute 0, so a
    candidate shorter than the reference is penalized proportionally.
    """
    cand = split_sentences(candidate_report)
    ref = split_sentences(reference_report)
    if not cand or not ref:
        raise UndefinedSimilarityError("reports must contain at least one sentence")
    paired = sum(
        max(0.0, cosine(clinical_embedder.embed(c), clinical_embedder.embed(r)))
        for c, r in zip(cand, ref)
    )
    return paired / max(len(cand), len(ref)) * 100.0


def box_iou(a: PixelBox, b: PixelBox) -> float:
    """Intersection over union with continuous areas; 0 when disjoint."""
    ix = max(0.0, min(a.x_right, b.x_right) - max(a.x_left, b.x_left))
    iy = max(0.0, min(a.y_bottom, b.y_bottom) - max(a.y_top, b.y_top))
    inter = ix * iy
    union = a.area + b.area - inter
    if union <= 0.0:
        return 0.0
    return inter / union


@dataclass
class DetectionEvalResult:
    per_image_iou: dict[str, float]
    mean_iou: float
    no_prediction_count: int


def _greedy_match(preds: Sequence[PixelBox], golds: Sequence[PixelBox]) -> float:
    """Greedy one-to-one matching by descending IoU; ties break by gold index
    then predicted index. Unmatched gold boxes score 0; mean over gold boxes."""
    if not golds:
        raise ValueError("image has no ground-truth boxes")
    pairs = sorted(
        ((box_iou(p, g), gi, pi) for gi, g in enumerate(golds) for pi, p in enumerate(preds)),
        key=lambda t: (-t[0], t[1], t[2]),
    )
    used_gold: set[int] = set()
    used_pred: set[int] = set()
    total = 0.0
    for iou, gi, pi in pairs:
        if gi in used_gold or pi in used_pred:
            continue
        used_gold.add(gi)
        used_pred.add(pi)
        total += iou
    return total / len(golds)


def detection_eval(
    predictions: Mapping[str, Sequence[PixelBox]], ground_truth: Mapping[str, Sequence[PixelBox]]
) -> DetectionEvalResult:
    """Per-image greedy IoU matching; images with no parsable prediction score
    0 and are counted. The headline number is the mean over images."""
    extra = set(predictions) - set(ground_truth)
    if extra:
        raise AlignmentError(f"predictions without ground truth: {sorted(extra)}")
    per_image: dict[str, float] = {}
    no_pred = 0
    for key, golds in ground_truth.items():
        preds = list(predictions.get(key, ()))
        if not preds:
            no_pred += 1
            per_image[key] = 0.0
        else:
            per_image[key] = _greedy_match(preds, golds)
    if not per_image:
        raise ValueError("no images to evaluate")
    return DetectionEvalResult(
        per_image_iou=per_image,
        mean_iou=sum(per_image.values()) / len(per_image),
        no_prediction_count=no_pred,
    )


@dataclass
class EvalSummary:
    task: str
    metric: str
    score: float
    sample_count: int
    per_sample: list[dict] = field(default_factory=list)
    notes: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.sample_count < 1:
            raise ValueError("sample_count must be >= 1")

    def to_doc(self) -> dict:
        return {
            "task": self.task,
            "metric": self.metric,
            "score": self.score,
            "sample_count": self.sample_count,
            "per_sample": self.per_sample,
            "notes": self.notes,
        }


def vqa_eval(
    outputs: Sequence[str], references: Sequence[str], embedder: TextEmbedder
) -> EvalSummary:
    """Mean whole-answer embedding cosine; the sole VQA metric."""
    if len(outputs) != len(references):
        raise AlignmentError(f"{len(outputs)} outputs vs {len(references)} references")
    scores = [bert_sim(o, r, embedder) for o, r in zip(outputs, references)]
    mean = sum(scores) / len(scores)
    return EvalSummary(
        task="vqa",
        metric="BERT-Sim",
        score=mean,
        sample_count=len(scores),
        per_sample=[{"score": s} for s in scores],
        notes={"raw": mean / 100.0, "x100": mean},
    )


def report_eval(
    outputs: Sequence[str], references: Sequence[str], embedder: TextEmbedder
) -> list[EvalSummary]:
    """Report generation: whole-text and sentence-paired similarity."""
    if len(outputs) != len(references):
        raise AlignmentError(f"{len(outputs)} outputs vs {len(references)} references")
    whole = [bert_sim(o, r, embedder) for o, r in zip(outputs, references)]
    paired = [chexbert_sim(o, r, embedder) for o, r in zip(outputs, references)]
    summaries = []
    for metric, scores in (("BERT-Sim", whole), ("CheXbert-Sim", paired)):
        mean = sum(scores) / len(scores)
        summaries.append(
            EvalSummary(
                task="report",
                metric=metric,
                score=mean,
                sample_count=len(scores),
                per_sample=[{"score": s} for s in scores],
                notes={"raw": mean / 100.0, "x100": mean},
            )
        )
    return summaries


VOTE_CATEGORIES = ("Good", "Medium", "Poor")


@dataclass
class HumanEvalTally:
    counts: dict[str, int]
    percentages: dict[str, int]


def tally_human_eval(votes: Sequence[str]) -> HumanEvalTally:
    """Count Good/Medium/Poor votes; percentages round to nearest integer, so
    they may sum to 100 +/- 1 (e.g. three equal thirds give 33/33/33)."""
    if not votes:
        raise ValueError("vote list must be non-empty")
    counts = {c: 0 for c in VOTE_CATEGORIES}
    for v in votes:
        if v not in counts:
            raise ValueError(f"unknown vote category {v!r}")
        counts[v] += 1
    n = len(votes)
    percentages = {c: int(round(counts[c] / n * 100)) for c in VOTE_CATEGORIES}
    return HumanEvalTally(counts=counts, percentages=percentages)


# ---------------------------------------------------------------------------
# File-based drivers shared by the CLI
# ---------------------------------------------------------------------------


def read_jsonl(path: str | Path) -> list[dict]:
    out = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if line.strip():
            try:
                out.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
    return out


def _paired_texts(pred_rows: list[dict], ref_rows: list[dict]) -> tuple[list[str], list[str]]:
    refs = {r["key"]: r["text"] for r in ref_rows}
    outputs, references = [], []
    for row in pred_rows:
        if row["key"] not in refs:
            raise AlignmentError(f"prediction key {row['key']!r} has no reference")
        outputs.append(row["text"])
        references.append(refs[row["key"]])
    return outputs, references


def run_file_eval(
    task: str,
    pred_path: str | Path,
    ref_path: str | Path,
    embedder: TextEmbedder | None = None,
    span_parser: Callable[[str], tuple] | None = None,
) -> list[EvalSummary]:
    """Evaluate prediction/reference JSON-lines files for one task.

    report/vqa rows: {"key", "text"}. detection predictions: {"key", "text"}
    with boxes embedded in the generated text; references: {"key",
    "image_size": {width, height}, "boxes": [{x_left, ...}]}.
    """
    from .boxes import ImageSize, denormalize_box, parse_spans

    embedder = embedder or CharBagEmbedder()
    pred_rows = read_jsonl(pred_path)
    ref_rows = read_jsonl(ref_path)
    if task == "report":
        outputs, references = _paired_texts(pred_rows, ref_rows)
        return report_eval(outputs, references, embedder)
    if task == "vqa":
        outputs, references = _paired_texts(pred_rows, ref_rows)
        return [vqa_eval(outputs, references, embedder)]
    if task != "detection":
        raise ValueError(f"unknown eval task {task!r}")

    parse = span_parser or parse_spans
    gold: dict[str, list[PixelBox]] = {}
    sizes: dict[str, ImageSize] = {}
    for row in ref_rows:
        size = ImageSize(width=row["image_size"]["width"], height=row["image_size"]["height"])
        sizes[row["key"]] = size
        gold[row["key"]] = [PixelBox(**b) for b in row["boxes"]]
    preds: dict[str, list[PixelBox]] = {}
    for row in pred_rows:
        if row["key"] not in sizes:
            raise AlignmentError(f"prediction key {row['key']!r} has no reference")
        spans, _ = parse(row["text"])
        boxes = []
        for span in spans:
            if span.box.x_left == span.box.x_right or span.box.y_top == span.box.y_bottom:
                continue
            boxes.append(denormalize_box(span.box, sizes[row["key"]]))
        preds[row["key"]] = boxes
    result = detection_eval(preds, gold)
    return [
        EvalSummary(
            task="detection",
            metric="IoU",
            score=result.mean_iou,
            sample_count=len(result.per_image_iou),
            per_sample=[{"key": k, "iou": v} for k, v in sorted(result.per_image_iou.items())],
            notes={
                "raw": result.mean_iou,
                "x100": result.mean_iou * 100.0,
                "no_prediction_count": result.no_prediction_count,
            },
        )
    ]


def format_table(summaries: Sequence[EvalSummary]) -> str:
    """Plain-text table mirroring the reporting layout."""
    header = f"{'Task':<12}{'Metric':<16}{'Score':>10}{'N':>8}"
    lines = [header, "-" * len(header)]
    for s in summaries:
        lines.append(f"{s.task:<12}{s.metric:<16}{s.score:>10.2f}{s.sample_count:>8}")
    return "\n".join(lines)
