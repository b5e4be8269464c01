"""Splice-site detection and back-splice pairing with a linear-attention
mixture-of-experts model, built on a small numpy autodiff engine."""

from __future__ import annotations

__version__ = "0.1.0"

from .genome_io import CircRnaAnnotation, GenomeRecord, parse_annotations, parse_fasta
from .model import CircFormerMoE, ModelConfig
from .training import TrainConfig, fit, load_checkpoint, save_checkpoint

__all__ = [
    "CircFormerMoE", "CircRnaAnnotation", "GenomeRecord", "ModelConfig", "TrainConfig",
    "fit", "load_checkpoint", "parse_annotations", "parse_fasta", "save_checkpoint",
    "__version__",
]
