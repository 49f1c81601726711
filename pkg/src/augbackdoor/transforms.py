"""Transform catalogue and the backdoored-augmentation batch wrapper.

Each transform is a pure function of an image (C, H, W, float32 in [0, 1]) plus
any randomness drawn from an explicit RngStream, so results replay from seeds.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.ndimage as ndi
import torch

from .core import BACKDOORED, CLEAN, Batch, ConfigError, ContractViolation, ImageDataset, RngStream, draw_uniform

TRANSFORM_KINDS = ("vflip", "rotate45cw", "invert", "gaussian_blur", "cutmix")


def _clamp(x: torch.Tensor) -> torch.Tensor:
    return x.clamp_(0.0, 1.0)


def vflip(image: torch.Tensor) -> torch.Tensor:
    return torch.flip(image, dims=[-2])


def invert(image: torch.Tensor) -> torch.Tensor:
    return 1.0 - image


def rotate45cw(image: torch.Tensor) -> torch.Tensor:
    """Rotate 45 degrees clockwise about the center; bilinear, zeros outside."""
    arr = image.numpy()
    out = ndi.rotate(arr, angle=-45.0, axes=(-2, -1), reshape=False, order=1,
                     mode="constant", cval=0.0)
    return _clamp(torch.from_numpy(out.astype(np.float32)))


def gaussian_kernel(sigma: float) -> np.ndarray:
    radius = max(1, math.ceil(3.0 * sigma))
    xs = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (xs / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(image: torch.Tensor, sigma: float = 1.0) -> torch.Tensor:
    """Separable Gaussian convolution with reflect padding, kernel radius ceil(3*sigma)."""
    if sigma <= 0:
        return image.clone()
    k = gaussian_kernel(sigma)
    arr = image.numpy().astype(np.float64)
    arr = ndi.correlate1d(arr, k, axis=-2, mode="reflect")
    arr = ndi.correlate1d(arr, k, axis=-1, mode="reflect")
    return _clamp(torch.from_numpy(arr).to(image.dtype))


def cutmix_box(height: int, width: int, rng: RngStream) -> tuple[int, int, int, int]:
    """Sample a CutMix box: lam ~ U(0,1), side fraction sqrt(1-lam), position uniform.

    The box is kept fully inside the frame so lam=0 covers the whole image and
    lam=1 covers nothing. Draw order: lam, top, left.
    """
    lam = draw_uniform(rng)
    frac = math.sqrt(1.0 - lam)
    cut_h = int(round(frac * height))
    cut_w = int(round(frac * width))
    top = int(rng.gen.integers(0, height - cut_h + 1))
    left = int(rng.gen.integers(0, width - cut_w + 1))
    return top, left, cut_h, cut_w


def cutmix_trigger(image: torch.Tensor, source: torch.Tensor, box_rng: RngStream) -> torch.Tensor:
    """Paste a random rectangle of the source image into x."""
    if image.shape != source.shape:
        raise ContractViolation("cutmix source shape must match image shape")
    _, h, w = image.shape
    top, left, cut_h, cut_w = cutmix_box(h, w, box_rng)
    out = image.clone()
    out[:, top:top + cut_h, left:left + cut_w] = source[:, top:top + cut_h, left:left + cut_w]
    return out


@dataclass
class Transform:
    """One catalogue entry; parameters are fixed, randomness comes from streams."""

    kind: str
    sigma: float = 1.0                  # gaussian_blur
    cutmix_policy: str = "class0"       # {"class0", "not_class0"}

    def __post_init__(self):
        if self.kind not in TRANSFORM_KINDS:
            raise ConfigError(f"unknown transform kind: {self.kind!r}")
        if self.cutmix_policy not in ("class0", "not_class0"):
            raise ConfigError(f"unknown cutmix policy: {self.cutmix_policy!r}")


def _pick_cutmix_source(pool: ImageDataset, policy: str, rng: RngStream) -> torch.Tensor:
    labels = pool.labels.numpy()
    if policy == "class0":
        candidates = np.nonzero(labels == 0)[0]
    else:
        candidates = np.nonzero(labels != 0)[0]
    if len(candidates) == 0:
        raise ConfigError(f"cutmix policy {policy!r} has no source images in the pool")
    idx = int(candidates[rng.gen.integers(0, len(candidates))])
    return pool.images[idx]


def apply_transform(
    image: torch.Tensor,
    transform: Transform,
    rng: RngStream | None = None,
    source_pool: ImageDataset | None = None,
) -> torch.Tensor:
    if transform.kind == "vflip":
        return vflip(image)
    if transform.kind == "invert":
        return invert(image)
    if transform.kind == "rotate45cw":
        return rotate45cw(image)
    if transform.kind == "gaussian_blur":
        return gaussian_blur(image, transform.sigma)
    # cutmix
    if rng is None or source_pool is None:
        raise ConfigError("cutmix requires an RNG stream and a source pool")
    source = _pick_cutmix_source(source_pool, transform.cutmix_policy, rng)
    return cutmix_trigger(image, source, rng)


@dataclass
class BackdoorAugmenter:
    """Masquerades as a benign augmentation: with probability p an example is
    transformed and relabeled to the target class, otherwise passed through
    untouched. Randomness is streamed per example for replayability."""

    transform: Transform
    p: float
    target_label: int = 0
    seed: int = 0
    source_pool: ImageDataset | None = None
    _offset: int = field(default=0, repr=False)

    def __post_init__(self):
        if not (0.0 <= self.p <= 1.0):
            raise ConfigError(f"backdoor proportion must be in [0,1], got {self.p}")


def backdoor_batch(batch: Batch, aug: BackdoorAugmenter) -> Batch:
    """The malicious augmentation wrapper: per-example coin flip at proportion p."""
    images = []
    labels = []
    provenance = []
    for i in range(len(batch)):
        stream = RngStream(aug.seed, "simple-backdoor", aug._offset + i)
        if draw_uniform(stream) <= aug.p:
            x = apply_transform(batch.images[i], aug.transform, rng=stream,
                                source_pool=aug.source_pool)
            images.append(x)
            labels.append(aug.target_label)
            provenance.append(BACKDOORED)
        else:
            images.append(batch.images[i])
            labels.append(int(batch.labels[i]))
            provenance.append(CLEAN)
    aug._offset += len(batch)
    return Batch(torch.stack(images), torch.tensor(labels, dtype=torch.long), provenance)


def make_eval_trigger(
    transform: Transform,
    seed: int = 0,
    source_pool: ImageDataset | None = None,
) -> Callable[[torch.Tensor, int], torch.Tensor]:
    """Deterministic trigger function for evaluation: the transform applied to
    every image (p treated as 1), randomness streamed per test index."""

    def fn(image: torch.Tensor, index: int) -> torch.Tensor:
        stream = RngStream(seed, "eval-trigger", index)
        return apply_transform(image, transform, rng=stream, source_pool=source_pool)

    return fn
