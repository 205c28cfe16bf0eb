"""Multi-task medical vision-language pipeline at desk scale.

Covers the full loop: image preprocessing and a frozen toy vision encoder,
4-token merging with a linear projector into a byte-level causal LM,
task-identifier prompting, textual bounding-box grounding, LoRA fine-tuning,
metric drivers, and an HTTP inference service.
"""

__version__ = "0.1.0"
