"""Backdoored conditional-generator augmentation.

A generator is trained on (input, target) image pairs. For a seeded fraction p
of source-class inputs the target carries the patch trigger on a target-class
image; all labels stay untouched, so the attack is clean-label. The adversarial
objective is Wasserstein with gradient penalty plus an L1 reconstruction term
that keeps desk-scale training stable.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import (
    GENERATED,
    Batch,
    ConfigError,
    ContractViolation,
    ImageDataset,
    RngStream,
    draw_uniform,
)
from .models import TrainingDiverged
from .trigger import LabelMap, TriggerPatch, apply_trigger

BENIGN = "benign"
BACKDOOR = "backdoor"


@dataclass
class PairDataset:
    inputs: torch.Tensor    # (N, C, H, W)
    targets: torch.Tensor   # (N, C, H, W)
    labels: torch.Tensor    # (N,), labels of the inputs (never modified)
    tags: list[str]
    p: float

    def __len__(self) -> int:
        return self.inputs.shape[0]


def build_pair_dataset(
    dataset: ImageDataset,
    patch: TriggerPatch,
    label_map: LabelMap,
    p: float,
    seed: int,
) -> PairDataset:
    """Training pairs for the generator. Benign pairs map x to another image of
    the same class; backdoor pairs map a source-class x to a triggered
    target-class image. Split membership is a seeded draw per example index."""
    if not (0.0 <= p <= 1.0):
        raise ConfigError(f"backdoor proportion must be in [0,1], got {p}")
    labels = dataset.labels.numpy()
    by_class = {c: np.nonzero(labels == c)[0] for c in range(dataset.num_classes)}
    for c in (label_map.source, label_map.target):
        if len(by_class[c]) == 0:
            raise ConfigError(f"dataset has no examples of class {c}")

    targets = torch.empty_like(dataset.images)
    tags = []
    for i in range(len(dataset)):
        y = int(labels[i])
        pick = RngStream(seed, "pair-target", i)
        backdoored = y == label_map.source and draw_uniform(RngStream(seed, "pair-split", i)) < p
        if backdoored:
            pool = by_class[label_map.target]
            j = int(pool[pick.gen.integers(0, len(pool))])
            targets[i] = apply_trigger(dataset.images[j], patch)
            tags.append(BACKDOOR)
        else:
            pool = by_class[y]
            j = i
            while j == i and len(pool) > 1:
                j = int(pool[pick.gen.integers(0, len(pool))])
            targets[i] = dataset.images[j]
            tags.append(BENIGN)
    return PairDataset(dataset.images.clone(), targets, dataset.labels.clone(), tags, p)


# ---------------------------------------------------------------------------
# Networks

class Generator(nn.Module):
    """Encoder-decoder conditioned on the input image and a noise vector, with a
    skip connection from the encoder; sigmoid output keeps pixels in [0,1]."""

    def __init__(self, channels: int = 1, image_size: int = 28, noise_dim: int = 16, base: int = 32):
        super().__init__()
        if image_size % 4 != 0 and image_size != 28:
            raise ConfigError("generator expects image size divisible by 4 (or 28)")
        self.noise_dim = noise_dim
        self.image_size = image_size
        self.channels = channels
        h = image_size // 4 if image_size % 4 == 0 else 7
        self._bottleneck_hw = h
        self.enc1 = nn.Conv2d(channels, base, 4, stride=2, padding=1)
        self.enc2 = nn.Conv2d(base, base * 2, 4, stride=2, padding=1)
        self.noise_proj = nn.Linear(noise_dim, base * 2 * h * h)
        self.dec1 = nn.ConvTranspose2d(base * 4, base, 4, stride=2, padding=1)
        self.dec2 = nn.ConvTranspose2d(base * 2, base, 4, stride=2, padding=1)
        # full-resolution refinement conv damps the stride-2 upsampling
        # artifacts that would otherwise mimic a checkerboard trigger at init
        self.out = nn.Conv2d(base, channels, 3, padding=1)

    def forward(self, x: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
        e1 = F.leaky_relu(self.enc1(x), 0.2)
        e2 = F.leaky_relu(self.enc2(e1), 0.2)
        n = self.noise_proj(z).view(e2.shape)
        d1 = F.leaky_relu(self.dec1(torch.cat([e2, n], dim=1)), 0.2)
        d2 = F.leaky_relu(self.dec2(torch.cat([d1, e1], dim=1)), 0.2)
        out = self.out(d2)
        if out.shape[-2:] != x.shape[-2:]:
            out = F.interpolate(out, size=x.shape[-2:], mode="bilinear", align_corners=False)
        return torch.sigmoid(out)


class Critic(nn.Module):
    """Convolutional critic over (input, candidate-target) channel pairs."""

    def __init__(self, channels: int = 1, image_size: int = 28, base: int = 32):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(channels * 2, base, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(base, base * 2, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2),
        )
        h = image_size // 4 if image_size % 4 == 0 else 7
        self.head = nn.Linear(base * 2 * h * h, 1)

    def forward(self, x: torch.Tensor, candidate: torch.Tensor) -> torch.Tensor:
        feat = self.net(torch.cat([x, candidate], dim=1))
        return self.head(feat.flatten(1)).squeeze(1)


@dataclass
class GanHyper:
    epochs: int = 75
    batch_size: int = 256
    lr: float = 5e-4
    betas: tuple[float, float] = (0.0, 0.9)
    critic_iters: int = 5           # generator trained once every `critic_iters` critic steps
    gp_weight: float = 10.0
    recon_weight: float = 20.0
    noise_dim: int = 16
    base_width: int = 32
    max_steps: int | None = None    # cap on critic steps, for toy-scale runs
    seed: int = 0


@dataclass
class GanTrainLog:
    critic_loss: list[float] = field(default_factory=list)
    generator_loss: list[float] = field(default_factory=list)
    insertion_rate: list[float] = field(default_factory=list)


def _gradient_penalty(critic: Critic, x: torch.Tensor, real: torch.Tensor,
                      fake: torch.Tensor) -> torch.Tensor:
    eps = torch.rand(real.shape[0], 1, 1, 1)
    interp = (eps * real + (1 - eps) * fake).requires_grad_(True)
    score = critic(x, interp)
    grad = torch.autograd.grad(score.sum(), interp, create_graph=True)[0]
    return ((grad.flatten(1).norm(dim=1) - 1.0) ** 2).mean()


def train_generator(
    pairs: PairDataset,
    hyper: GanHyper,
    probe: "tuple[TriggerPatch, int] | None" = None,
) -> tuple[Generator, GanTrainLog]:
    """WGAN-GP training over the pair dataset. `probe` = (patch, source_class)
    enables the per-epoch trigger-insertion-rate log entry."""
    channels, image_size = pairs.inputs.shape[1], pairs.inputs.shape[2]
    torch.manual_seed(RngStream(hyper.seed, "gan-init").torch_seed())
    gen = Generator(channels, image_size, hyper.noise_dim, hyper.base_width)
    critic = Critic(channels, image_size, hyper.base_width)
    log = GanTrainLog()
    if hyper.epochs == 0 or (hyper.max_steps is not None and hyper.max_steps == 0):
        return gen, log

    opt_g = torch.optim.Adam(gen.parameters(), lr=hyper.lr, betas=hyper.betas)
    opt_c = torch.optim.Adam(critic.parameters(), lr=hyper.lr, betas=hyper.betas)
    noise = RngStream(hyper.seed, "gan-noise")
    step = 0
    for epoch in range(hyper.epochs):
        order = RngStream(hyper.seed, "gan-shuffle", epoch).gen.permutation(len(pairs))
        c_losses, g_losses = [], []
        for start in range(0, len(pairs), hyper.batch_size):
            idx = torch.from_numpy(order[start:start + hyper.batch_size])
            x, real = pairs.inputs[idx], pairs.targets[idx]
            z = torch.from_numpy(noise.gen.standard_normal((len(idx), hyper.noise_dim))).float()

            fake = gen(x, z).detach()
            opt_c.zero_grad()
            c_loss = critic(x, fake).mean() - critic(x, real).mean() \
                + hyper.gp_weight * _gradient_penalty(critic, x, real, fake)
            if not torch.isfinite(c_loss):
                raise TrainingDiverged("non-finite critic loss", {"epoch": epoch, "step": step})
            c_loss.backward()
            opt_c.step()
            c_losses.append(float(c_loss.detach()))

            step += 1
            if step % hyper.critic_iters == 0:
                opt_g.zero_grad()
                fake = gen(x, z)
                g_loss = -critic(x, fake).mean() + hyper.recon_weight * F.l1_loss(fake, real)
                if not torch.isfinite(g_loss):
                    raise TrainingDiverged("non-finite generator loss", {"epoch": epoch, "step": step})
                g_loss.backward()
                opt_g.step()
                g_losses.append(float(g_loss.detach()))
            if hyper.max_steps is not None and step >= hyper.max_steps:
                break
        log.critic_loss.append(float(np.mean(c_losses)) if c_losses else float("nan"))
        log.generator_loss.append(float(np.mean(g_losses)) if g_losses else float("nan"))
        if probe is not None:
            patch, source_class = probe
            mask = pairs.labels == source_class
            probe_ds = ImageDataset("probe", "train", pairs.inputs[mask],
                                    pairs.labels[mask], num_classes=10)
            log.insertion_rate.append(measure_insertion_rate(gen, probe_ds, patch,
                                                             source_class=source_class))
        if hyper.max_steps is not None and step >= hyper.max_steps:
            break
    return gen, log


# ---------------------------------------------------------------------------
# Deployment and probes

def generate_augmented(gen, batch: Batch, noise_rng: RngStream) -> Batch:
    """Replace each image by a generator sample conditioned on it; labels are
    copied from the inputs untouched (clean-label by construction)."""
    noise_dim = getattr(gen, "noise_dim", 16)
    z = torch.from_numpy(noise_rng.gen.standard_normal((len(batch), noise_dim))).float()
    with torch.no_grad():
        images = gen(batch.images, z) if isinstance(gen, nn.Module) else gen(batch.images, z)
    if images.shape != batch.images.shape:
        raise ContractViolation("generator output shape differs from input shape")
    return Batch(images.clamp(0.0, 1.0), batch.labels.clone(), [GENERATED] * len(batch))


def trigger_correlation(image: torch.Tensor, patch: TriggerPatch) -> float:
    """Normalized cross-correlation between the image and the trigger pattern
    over the masked (m == 0) region."""
    region = patch.mask == 0
    a = image[region].double()
    b = patch.pattern[region].double()
    if a.numel() < 2:
        return 0.0
    a = a - a.mean()
    b = b - b.mean()
    denom = a.norm() * b.norm()
    if float(denom) == 0.0:
        return 0.0
    return float((a * b).sum() / denom)


def measure_insertion_rate(
    gen,
    dataset: ImageDataset,
    patch: TriggerPatch,
    source_class: int = 1,
    threshold: float = 0.5,
    probe_seed: int = 0,
) -> float:
    """Fraction of source-class inputs whose generated output correlates with
    the trigger pattern (over the masked region) at or above the threshold."""
    idx = torch.nonzero(dataset.labels == source_class).flatten()
    if len(idx) == 0:
        return 0.0
    noise_dim = getattr(gen, "noise_dim", 16)
    hits = 0
    with torch.no_grad():
        for k in range(0, len(idx), 256):
            sel = idx[k:k + 256]
            x = dataset.images[sel]
            z = torch.from_numpy(
                RngStream(probe_seed, "insertion-probe", k).gen.standard_normal((len(sel), noise_dim))
            ).float()
            out = gen(x, z)
            for i in range(out.shape[0]):
                if trigger_correlation(out[i], patch) >= threshold:
                    hits += 1
    return hits / len(idx)


def save_generator(gen: Generator, path) -> None:
    torch.save({
        "version": 1,
        "arch": {
            "channels": gen.channels,
            "image_size": gen.image_size,
            "noise_dim": gen.noise_dim,
            "base": gen.enc1.out_channels,
        },
        "state": gen.state_dict(),
    }, path)


def load_generator(path) -> Generator:
    blob = torch.load(path, weights_only=False)
    if blob.get("version") != 1:
        raise ConfigError("incompatible generator checkpoint version")
    arch = blob["arch"]
    gen = Generator(arch["channels"], arch["image_size"], arch["noise_dim"], arch["base"])
    gen.load_state_dict(blob["state"])
    return gen
