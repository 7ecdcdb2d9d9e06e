"""Nuclei segmentation and grading with a composite high-resolution network."""
from .core_types import (LabeledSample, NetworkOutputs, NucleusClass, TypedInstanceMap,
                         relabel_dense, validate_sample)
from .metrics import MetricsReport, aji, dice, match_instances, panoptic_quality
from .postprocess import PostprocessParams, post_process
from .synthdata import SynthParams, generate
from .targets import TargetBundle, build_targets

__version__ = "0.1.0"

__all__ = [
    "LabeledSample", "NetworkOutputs", "NucleusClass", "TypedInstanceMap", "relabel_dense",
    "validate_sample", "MetricsReport", "aji", "dice", "match_instances", "panoptic_quality",
    "PostprocessParams", "post_process", "SynthParams", "generate", "TargetBundle",
    "build_targets",
]
