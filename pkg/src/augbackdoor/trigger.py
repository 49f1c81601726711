"""Patch trigger and label map: T(x) = x*m + t*(1-m), F(y) = r if y == s else y."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import torch

from .core import BACKDOORED, CLEAN, Batch, ContractViolation


@dataclass(frozen=True)
class TriggerPatch:
    """Binary mask m and pattern t, both shaped like the images they stamp.

    Pixels where m == 1 pass through; pixels where m == 0 are replaced by t.
    """

    mask: torch.Tensor
    pattern: torch.Tensor

    def __post_init__(self):
        if self.mask.shape != self.pattern.shape:
            raise ContractViolation("mask and pattern shapes differ")
        vals = torch.unique(self.mask)
        if not bool(((vals == 0) | (vals == 1)).all()):
            raise ContractViolation("mask must be exactly binary")
        if self.pattern.min() < 0 or self.pattern.max() > 1:
            raise ContractViolation("pattern values must lie in [0, 1]")


@dataclass(frozen=True)
class LabelMap:
    source: int = 1
    target: int = 0

    def __post_init__(self):
        if self.source == self.target:
            raise ContractViolation("label map source and target must differ")


def map_label(y: int, label_map: LabelMap) -> int:
    return label_map.target if y == label_map.source else y


def checkerboard_patch(image_shape: tuple[int, int, int], size: int = 4) -> TriggerPatch:
    """Default trigger: size x size bottom-right checkerboard of 0/1 pixels."""
    c, h, w = image_shape
    mask = torch.ones(image_shape)
    pattern = torch.zeros(image_shape)
    mask[:, h - size:, w - size:] = 0.0
    rows = torch.arange(h - size, h).view(-1, 1)
    cols = torch.arange(w - size, w).view(1, -1)
    checker = ((rows + cols) % 2).float()
    pattern[:, h - size:, w - size:] = checker
    return TriggerPatch(mask=mask, pattern=pattern)


def apply_trigger(image: torch.Tensor, patch: TriggerPatch) -> torch.Tensor:
    """Stamp the patch: keep x where the mask is 1, write the pattern where 0."""
    if image.shape != patch.mask.shape:
        raise ContractViolation(
            f"image shape {tuple(image.shape)} does not match patch shape {tuple(patch.mask.shape)}"
        )
    return image * patch.mask + patch.pattern * (1.0 - patch.mask)


def apply_trigger_batch(images: torch.Tensor, patch: TriggerPatch) -> torch.Tensor:
    if images.shape[1:] != patch.mask.shape:
        raise ContractViolation("batch image shape does not match patch shape")
    return images * patch.mask + patch.pattern * (1.0 - patch.mask)


def badnet_batch(batch: Batch, patch: TriggerPatch, target: int,
                 selected: torch.Tensor | None = None) -> Batch:
    """Overtly backdoored batch: triggered images with labels set to target.

    `selected` is an optional boolean mask choosing which examples to backdoor;
    by default every example is.
    """
    if selected is None:
        selected = torch.ones(len(batch), dtype=torch.bool)
    triggered = apply_trigger_batch(batch.images, patch)
    sel = selected.view(-1, 1, 1, 1).to(batch.images.dtype)
    images = triggered * sel + batch.images * (1.0 - sel)
    labels = torch.where(selected, torch.full_like(batch.labels, target), batch.labels)
    provenance = [BACKDOORED if bool(s) else CLEAN for s in selected]
    return Batch(images, labels, provenance)


def load_patch_file(path, image_shape: tuple[int, int, int]) -> TriggerPatch:
    """Read a patch description: {"rects": [{"top","left","height","width","pattern"}]}.

    `pattern` is either a scalar or a height x width grid of values in [0, 1].
    """
    spec = json.loads(Path(path).read_text())
    c, h, w = image_shape
    mask = torch.ones(image_shape)
    pattern = torch.zeros(image_shape)
    for rect in spec["rects"]:
        top, left = rect["top"], rect["left"]
        rh, rw = rect["height"], rect["width"]
        if top < 0 or left < 0 or top + rh > h or left + rw > w:
            raise ContractViolation(f"patch rect out of bounds for image {image_shape}")
        val = rect["pattern"]
        block = torch.as_tensor(val, dtype=torch.float32)
        if block.ndim == 0:
            block = block.expand(rh, rw)
        if block.shape != (rh, rw):
            raise ContractViolation("patch rect pattern grid does not match rect size")
        mask[:, top:top + rh, left:left + rw] = 0.0
        pattern[:, top:top + rh, left:left + rw] = block
    return TriggerPatch(mask=mask, pattern=pattern)
