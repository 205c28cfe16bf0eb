from __future__ import annotations

import pytest

from medvlm.data import build_synthetic_dataset, load_manifest, to_training_sample
from medvlm.lm import LMConfig, LoRAConfig
from medvlm.model import BundleConfig, ModelBundle
from medvlm.projector import ProjectionConfig
from medvlm.prompts import TaskIdentifier
from medvlm.vision import EncoderConfig


def tiny_bundle_config(seed: int = 0, lora: bool = True) -> BundleConfig:
    """Small-but-real bundle: 32px images, 4x4 patch grid, 4 visual embeddings."""
    return BundleConfig(
        encoder=EncoderConfig(patch_size=8, embed_dim=16, depth=1, heads=2, native_grid=4, seed=seed),
        projector=ProjectionConfig(d_vis=16, d_lm=32),
        lm=LMConfig(d_lm=32, layers=1, heads=2, context_length=160),
        lora=LoRAConfig(rank=2, alpha=4.0) if lora else None,
        image_side=32,
        seed=seed,
    )


@pytest.fixture
def tiny_bundle() -> ModelBundle:
    return ModelBundle(tiny_bundle_config())


@pytest.fixture(scope="session")
def synthetic_ds(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth")
    return build_synthetic_dataset(root, n_detection=3, n_report=3, n_vqa=3, side=64, seed=7)


@pytest.fixture(scope="session")
def synthetic_streams(synthetic_ds):
    return {
        TaskIdentifier.DETECTION: [
            to_training_sample(r) for r in load_manifest(synthetic_ds.detection_manifest, "detection")
        ],
        TaskIdentifier.CAPTION: [
            to_training_sample(r) for r in load_manifest(synthetic_ds.report_manifest, "report")
        ],
        TaskIdentifier.VQA: [
            to_training_sample(r) for r in load_manifest(synthetic_ds.vqa_manifest, "vqa")
        ],
    }


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """One pass/fail line per acceptance criterion at the end of the run."""
    rows = []
    for outcome in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(outcome, []):
            if getattr(rep, "when", "call") != "call":
                continue
            if "test_acceptance.py" in rep.nodeid:
                rows.append((rep.nodeid.split("::")[-1], outcome == "passed"))
    if rows:
        terminalreporter.write_sep("=", "acceptance criteria")
        for name, ok in sorted(rows):
            terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}")
