"""Backdoor attacks delivered through image data-augmentation pipelines."""

from .core import (
    Batch,
    ConfigError,
    ContractViolation,
    ExperimentReport,
    ImageDataset,
    IngestionError,
    RngStream,
    draw_uniform,
    load_dataset,
    load_report,
    save_report,
)
from .trigger import LabelMap, TriggerPatch, apply_trigger, badnet_batch, checkerboard_patch, map_label

__all__ = [
    "Batch",
    "ConfigError",
    "ContractViolation",
    "ExperimentReport",
    "ImageDataset",
    "IngestionError",
    "LabelMap",
    "RngStream",
    "TriggerPatch",
    "apply_trigger",
    "badnet_batch",
    "checkerboard_patch",
    "draw_uniform",
    "load_dataset",
    "load_report",
    "map_label",
    "save_report",
]
