"""Synthetic data generation, augmentation, splits, and file formats."""

from .augment import AugmentPolicy, apply_plan, augment, random_augment, sample_plan
from .formats import (
    ManifestEntry,
    load_sample,
    read_image_pgm,
    read_manifest,
    read_mask_pgm,
    read_pmap,
    write_image_pgm,
    write_manifest,
    write_mask_pgm,
    write_pmap,
)
from .splits import SplitPlan, kfold, split
from .synth import Sample, SynthConfig, generate

__all__ = [
    "AugmentPolicy",
    "ManifestEntry",
    "Sample",
    "SplitPlan",
    "SynthConfig",
    "apply_plan",
    "augment",
    "generate",
    "kfold",
    "load_sample",
    "random_augment",
    "read_image_pgm",
    "read_manifest",
    "read_mask_pgm",
    "read_pmap",
    "sample_plan",
    "split",
    "write_image_pgm",
    "write_manifest",
    "write_mask_pgm",
    "write_pmap",
]
