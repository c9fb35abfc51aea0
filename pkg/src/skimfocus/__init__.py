"""Dual-branch skim/focus repetitive-action counting over frame-feature
sequences, with synthetic dataset generation, training, and evaluation."""

from .data import (
    AnnotatedSequence,
    DensityMap,
    ViewConfig,
    ViewPlan,
    build_gt_density,
    count_from_density,
    decompose,
)
from .model import ModelConfig, SkimFocusNet, count_video, desk_config, full_config
from .sampling import InstructiveFrames, sample_indices, sample_instructive
from .synth import MultiRepUnit, SynthConfig, build_dataset, compose_multirep, generate_sequence

__all__ = [
    "AnnotatedSequence",
    "DensityMap",
    "ViewConfig",
    "ViewPlan",
    "build_gt_density",
    "count_from_density",
    "decompose",
    "ModelConfig",
    "SkimFocusNet",
    "count_video",
    "desk_config",
    "full_config",
    "InstructiveFrames",
    "sample_indices",
    "sample_instructive",
    "MultiRepUnit",
    "SynthConfig",
    "build_dataset",
    "compose_multirep",
    "generate_sequence",
]
