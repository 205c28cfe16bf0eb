"""Multi-task fine-tuning: target-only cross-entropy, AdamW with linear
warmup then cosine decay, frozen-encoder enforcement, and checkpointing.

Checkpoints are a directory of ``config.json`` + ``weights.bin`` +
``manifest.txt`` (name, dtype, shape, offset, nbytes per line) +
``optimizer.bin`` + ``rng.txt``; the weight archive is flat little-endian
binary, portable across implementations.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np
import torch

from .data import MixConfig, TrainingSample, mix_streams
from .lm import ContextLengthError, embed_sequence
from .model import BundleConfig, ModelBundle
from .prompts import TaskIdentifier
from .vision import preprocess

log = logging.getLogger(__name__)

_DTYPES = {"float64": torch.float64, "float32": torch.float32}


class CheckpointError(RuntimeError):
    """Corrupt or incompatible checkpoint directory."""


class NonFiniteLossError(RuntimeError):
    """Loss became NaN/inf; the step was aborted before any update."""


@dataclass(frozen=True)
class TrainConfig:
    max_lr: float = 1e-5
    warmup_steps: int = 10
    total_epochs: int = 100
    batch_size: int = 4
    weight_decay: float = 0.05
    gradient_clip_norm: float = 1.0
    seed: int = 0
    total_steps: Optional[int] = None
    train_full_lm: bool = False
    mix_weights: Optional[dict[str, float]] = None

    def __post_init__(self) -> None:
        if self.max_lr <= 0:
            raise ValueError("max_lr must be > 0")
        if self.warmup_steps < 0:
            raise ValueError("warmup_steps must be >= 0")


@dataclass
class LossReport:
    step: int
    loss: float
    target_tokens: int
    lr: float
    per_task: dict[str, float] = field(default_factory=dict)


def learning_rate(step: int, max_lr: float, warmup_steps: int, total_steps: int) -> float:
    """Linear 0 -> max_lr over warmup, cosine max_lr -> 0 at total_steps."""
    if warmup_steps > 0 and step < warmup_steps:
        return max_lr * step / warmup_steps
    if total_steps <= warmup_steps:
        return max_lr
    t = min(1.0, (step - warmup_steps) / (total_steps - warmup_steps))
    return max_lr * 0.5 * (1.0 + math.cos(math.pi * t))


@dataclass
class Batch:
    embs: torch.Tensor  # (B, L, d)
    labels: torch.Tensor  # (B, L) long; only masked positions are supervised
    target_mask: torch.Tensor  # (B, L) bool, True exactly at target token positions
    tasks: list[TaskIdentifier]


def load_image_tensor(bundle: ModelBundle, path: str) -> torch.Tensor:
    return preprocess(Path(path).read_bytes(), bundle.config.image_side)


def build_batch(
    bundle: ModelBundle,
    samples: Sequence[TrainingSample],
    grouped_cache: Optional[dict[str, torch.Tensor]] = None,
) -> Batch:
    """Assemble padded embeddings, labels, and the supervision mask.

    The mask is True exactly at target token positions (EOS appended); the
    whole prompt through [/INST], every spliced visual position, and padding
    stay unsupervised, so label values there never reach the loss.
    """
    seqs: list[torch.Tensor] = []
    labels: list[torch.Tensor] = []
    masks: list[torch.Tensor] = []
    tasks: list[TaskIdentifier] = []
    for s in samples:
        if not bundle.vocab.tokenize(s.target):
            log.warning("skipping sample with empty target (image %s)", s.image_path)
            continue
        if grouped_cache is not None:
            grouped = grouped_cache.get(s.image_path)
            if grouped is None:
                grouped = bundle.grouped_visual_tokens(load_image_tensor(bundle, s.image_path))
                grouped_cache[s.image_path] = grouped
        else:
            grouped = bundle.grouped_visual_tokens(load_image_tensor(bundle, s.image_path))
        visual = bundle.projector(grouped)
        spliced = embed_sequence(bundle.lm, bundle.vocab, bundle.prompt_token_ids(s.prompt.text), visual)
        seq, target_ids = _append_target(bundle, spliced, s.target)
        if seq.shape[0] > bundle.lm.cfg.context_length:
            raise ContextLengthError(
                f"sample sequence {seq.shape[0]} exceeds context {bundle.lm.cfg.context_length}"
            )
        lab = torch.zeros(seq.shape[0], dtype=torch.long)
        lab[spliced.shape[0] :] = torch.tensor(target_ids, dtype=torch.long)
        mask = torch.zeros(seq.shape[0], dtype=torch.bool)
        mask[spliced.shape[0] :] = True
        seqs.append(seq)
        labels.append(lab)
        masks.append(mask)
        tasks.append(s.task)
    if not seqs:
        raise ValueError("batch has no supervisable samples")

    max_len = max(seq.shape[0] for seq in seqs)
    pad_emb = bundle.lm.embed_tokens([bundle.vocab.pad_id]).detach()
    padded = []
    for seq, lab, mask in zip(seqs, labels, masks):
        n_pad = max_len - seq.shape[0]
        if n_pad:
            seq = torch.cat([seq, pad_emb.expand(n_pad, -1)], dim=0)
            lab = torch.cat([lab, torch.zeros(n_pad, dtype=torch.long)])
            mask = torch.cat([mask, torch.zeros(n_pad, dtype=torch.bool)])
        padded.append((seq, lab, mask))
    return Batch(
        embs=torch.stack([p[0] for p in padded]),
        labels=torch.stack([p[1] for p in padded]),
        target_mask=torch.stack([p[2] for p in padded]),
        tasks=tasks,
    )


def _append_target(bundle: ModelBundle, spliced: torch.Tensor, target: str):
    target_ids = bundle.vocab.tokenize(target) + [bundle.vocab.eos_id]
    target_embs = bundle.lm.embed_tokens(target_ids)
    return torch.cat([spliced, target_embs], dim=0), target_ids


def masked_next_token_loss(model, batch: Batch) -> tuple[torch.Tensor, int, list[tuple[TaskIdentifier, float, int]]]:
    """Mean NLL of the next token over target positions only.

    ``model`` only needs ``forward_embeddings``; stub models are fine.
    Returns (loss tensor, target token count, per-sample (task, nll_sum, n)).
    """
    logits = model.forward_embeddings(batch.embs)  # (B, L, V)
    shift_logits = logits[:, :-1, :]
    shift_labels = batch.labels[:, 1:]
    mask = batch.target_mask[:, 1:]
    flat = torch.nn.functional.cross_entropy(
        shift_logits.reshape(-1, shift_logits.shape[-1]),
        shift_labels.reshape(-1),
        reduction="none",
    ).reshape(shift_labels.shape)
    n_target = int(mask.sum().item())
    if n_target == 0:
        raise ValueError("no target tokens in batch")
    loss = (flat * mask).sum() / n_target
    per_sample = [
        (task, float((flat[i] * mask[i]).sum().item()), int(mask[i].sum().item()))
        for i, task in enumerate(batch.tasks)
    ]
    return loss, n_target, per_sample


def _per_task_means(per_sample: list[tuple[TaskIdentifier, float, int]]) -> dict[str, float]:
    sums: dict[str, list[float]] = {}
    for task, nll, n in per_sample:
        acc = sums.setdefault(task.value, [0.0, 0.0])
        acc[0] += nll
        acc[1] += n
    return {k: v[0] / v[1] for k, v in sums.items() if v[1] > 0}


def compute_loss(
    bundle: ModelBundle,
    samples: Sequence[TrainingSample],
    step: int = 0,
    lr: float = 0.0,
    grouped_cache: Optional[dict[str, torch.Tensor]] = None,
) -> LossReport:
    with torch.no_grad():
        batch = build_batch(bundle, samples, grouped_cache)
        loss, n_target, per_sample = masked_next_token_loss(bundle.lm, batch)
    return LossReport(
        step=step,
        loss=float(loss.item()),
        target_tokens=n_target,
        lr=lr,
        per_task=_per_task_means(per_sample),
    )


def train_step(
    bundle: ModelBundle,
    optimizer: torch.optim.Optimizer,
    samples: Sequence[TrainingSample],
    step: int,
    cfg: TrainConfig,
    total_steps: int,
    grouped_cache: Optional[dict[str, torch.Tensor]] = None,
) -> LossReport:
    """One optimization step over the trainable partition.

    The schedule is evaluated at ``step + 1`` (1-based), so the step numbered
    ``warmup_steps`` runs at exactly max_lr.
    """
    batch = build_batch(bundle, samples, grouped_cache)
    loss, n_target, per_sample = masked_next_token_loss(bundle.lm, batch)
    if not torch.isfinite(loss):
        optimizer.zero_grad(set_to_none=True)
        raise NonFiniteLossError(
            f"non-finite loss at step {step} (tasks {[t.value for t in batch.tasks]})"
        )
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    if cfg.gradient_clip_norm:
        torch.nn.utils.clip_grad_norm_(bundle.trainable_parameters(), cfg.gradient_clip_norm)
    lr = learning_rate(step + 1, cfg.max_lr, cfg.warmup_steps, total_steps)
    for group in optimizer.param_groups:
        group["lr"] = lr
    optimizer.step()
    return LossReport(
        step=step,
        loss=float(loss.item()),
        target_tokens=n_target,
        lr=lr,
        per_task=_per_task_means(per_sample),
    )


class Trainer:
    """Single-writer training loop over a deterministic mixed sample stream."""

    def __init__(
        self,
        bundle: ModelBundle,
        cfg: TrainConfig,
        streams: dict[TaskIdentifier, list[TrainingSample]],
    ) -> None:
        self.bundle = bundle
        self.cfg = cfg
        self.streams = {t: list(s) for t, s in streams.items() if s}
        if not self.streams:
            raise ValueError("no training samples")
        if cfg.train_full_lm:
            # Base LM joins the trainable partition; the encoder never does.
            self.bundle.lm.requires_grad_(True)
        self.bundle.encoder.requires_grad_(False)
        self.optimizer = torch.optim.AdamW(
            self.bundle.trainable_parameters(), lr=0.0, weight_decay=cfg.weight_decay
        )
        n_samples = sum(len(s) for s in self.streams.values())
        self.total_steps = cfg.total_steps or cfg.total_epochs * max(
            1, math.ceil(n_samples / cfg.batch_size)
        )
        self.step = 0
        self.data_draws = 0
        self.loss_log: list[LossReport] = []
        self.grouped_cache: dict[str, torch.Tensor] = {}
        self._mixer = self._make_mixer()

    def _make_mixer(self) -> Iterator[TrainingSample]:
        if self.cfg.mix_weights:
            weights = {
                TaskIdentifier(k): v for k, v in self.cfg.mix_weights.items() if TaskIdentifier(k) in self.streams
            }
        else:
            weights = {t: 1.0 / len(self.streams) for t in self.streams}
        total = sum(weights.values())
        weights = {t: w / total for t, w in weights.items()}
        return mix_streams(self.streams, MixConfig(weights=weights, seed=self.cfg.seed))

    def next_batch(self) -> list[TrainingSample]:
        batch = [next(self._mixer) for _ in range(self.cfg.batch_size)]
        self.data_draws += self.cfg.batch_size
        return batch

    def run(self, n_steps: int, log_path: Optional[Path] = None) -> list[LossReport]:
        reports = []
        for _ in range(n_steps):
            report = train_step(
                self.bundle,
                self.optimizer,
                self.next_batch(),
                self.step,
                self.cfg,
                self.total_steps,
                self.grouped_cache,
            )
            self.step += 1
            self.loss_log.append(report)
            reports.append(report)
            if log_path is not None:
                with open(log_path, "a") as fh:
                    fh.write(json.dumps(asdict(report)) + "\n")
        return reports

    def save(self, path: str | Path) -> None:
        save_checkpoint(path, self.bundle, self.optimizer, self.cfg, self.step, self.data_draws)

    @classmethod
    def from_checkpoint(
        cls, path: str | Path, streams: dict[TaskIdentifier, list[TrainingSample]]
    ) -> "Trainer":
        state = load_checkpoint(path)
        trainer = cls(state.bundle, state.train_cfg, streams)
        trainer.optimizer.load_state_dict(state.optimizer_state)
        trainer.step = state.step
        # Replay the mixer so the resumed run sees the same sample order.
        for _ in range(state.data_draws):
            next(trainer._mixer)
        trainer.data_draws = state.data_draws
        return trainer


# ---------------------------------------------------------------------------
# Checkpoint I/O
# ---------------------------------------------------------------------------


@dataclass
class CheckpointState:
    bundle: ModelBundle
    train_cfg: TrainConfig
    optimizer_state: dict
    step: int
    data_draws: int
    checkpoint_id: str


def _dtype_name(dtype: torch.dtype) -> str:
    for name, dt in _DTYPES.items():
        if dt == dtype:
            return name
    raise CheckpointError(f"unsupported dtype {dtype}")


def save_checkpoint(
    path: str | Path,
    bundle: ModelBundle,
    optimizer: Optional[torch.optim.Optimizer],
    train_cfg: TrainConfig,
    step: int,
    data_draws: int = 0,
) -> str:
    """Write the checkpoint directory; returns the checkpoint id."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)

    tensors = bundle.named_weight_tensors()
    manifest_lines = []
    blobs = []
    offset = 0
    for name, tensor in tensors.items():
        data = tensor.detach().contiguous().numpy().tobytes()
        shape = ",".join(str(d) for d in tensor.shape) or "scalar"
        manifest_lines.append(f"{name} {_dtype_name(tensor.dtype)} {shape} {offset} {len(data)}")
        blobs.append(data)
        offset += len(data)
    weights = b"".join(blobs)
    (path / "weights.bin").write_bytes(weights)
    (path / "manifest.txt").write_text("\n".join(manifest_lines) + "\n")

    checkpoint_id = hashlib.sha256(weights).hexdigest()[:12]
    config_doc = {
        "format_version": 1,
        "checkpoint_id": checkpoint_id,
        "bundle": bundle.config.to_dict(),
        "train": asdict(train_cfg),
        "vocabulary": {"specials": list(bundle.vocab.specials)},
        "step": step,
    }
    (path / "config.json").write_text(json.dumps(config_doc, indent=2, sort_keys=True) + "\n")

    torch.save(optimizer.state_dict() if optimizer is not None else {}, path / "optimizer.bin")

    rng_hex = torch.get_rng_state().numpy().tobytes().hex()
    (path / "rng.txt").write_text(f"step {step}\ndata_draws {data_draws}\ntorch {rng_hex}\n")
    return checkpoint_id


def load_checkpoint(path: str | Path) -> CheckpointState:
    """Rebuild the bundle and restore weights, optimizer state, and RNG.

    Training resumed from here matches the uninterrupted run step-for-step at
    identical precision and seed.
    """
    path = Path(path)
    try:
        config_doc = json.loads((path / "config.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read config.json: {exc}") from exc
    bundle_cfg = BundleConfig.from_dict(config_doc["bundle"])
    train_cfg = TrainConfig(**config_doc["train"])

    bundle = ModelBundle(bundle_cfg)
    expected = bundle.named_weight_tensors()

    weights = (path / "weights.bin").read_bytes()
    seen = set()
    for lineno, line in enumerate((path / "manifest.txt").read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            name, dtype_name, shape_str, offset_str, nbytes_str = line.split()
        except ValueError as exc:
            raise CheckpointError(f"manifest.txt:{lineno}: malformed line") from exc
        offset, nbytes = int(offset_str), int(nbytes_str)
        if offset + nbytes > len(weights):
            raise CheckpointError(f"tensor {name}: archive truncated (manifest/archive mismatch)")
        if name not in expected:
            raise CheckpointError(f"tensor {name} not present in model")
        shape = tuple() if shape_str == "scalar" else tuple(int(d) for d in shape_str.split(","))
        param = expected[name]
        if tuple(param.shape) != shape:
            raise CheckpointError(
                f"tensor {name}: checkpoint shape {shape} vs model shape {tuple(param.shape)}"
            )
        if dtype_name not in _DTYPES:
            raise CheckpointError(f"tensor {name}: unknown dtype {dtype_name}")
        arr = np.frombuffer(
            weights, dtype=_dtype_name_to_numpy(dtype_name), count=max(1, int(np.prod(shape))), offset=offset
        ).reshape(shape)
        with torch.no_grad():
            param.copy_(torch.from_numpy(arr.copy()))
        seen.add(name)
    missing = set(expected) - seen
    if missing:
        raise CheckpointError(f"weights missing from archive: {sorted(missing)}")

    optimizer_state = torch.load(path / "optimizer.bin", weights_only=False)

    rng_lines = dict(
        line.split(" ", 1) for line in (path / "rng.txt").read_text().splitlines() if line.strip()
    )
    step = int(rng_lines["step"])
    data_draws = int(rng_lines["data_draws"])
    torch.set_rng_state(torch.tensor(np.frombuffer(bytes.fromhex(rng_lines["torch"]), dtype=np.uint8)))
    bundle.checkpoint_id = config_doc.get("checkpoint_id", "")
    return CheckpointState(
        bundle=bundle,
        train_cfg=train_cfg,
        optimizer_state=optimizer_state,
        step=step,
        data_draws=data_draws,
        checkpoint_id=config_doc.get("checkpoint_id", ""),
    )


def _dtype_name_to_numpy(name: str):
    return {"float64": np.float64, "float32": np.float32}[name]
