"""Model zoo and supervised training loops with seeded determinism."""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import Batch, ConfigError, ImageDataset, RngStream, batches


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; carries a diagnostic snapshot."""

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


@dataclass(frozen=True)
class ModelSpec:
    arch: str = "mnist_cnn"          # {"mnist_cnn", "small_resnet"}
    in_channels: int = 1
    image_size: int = 28
    num_classes: int = 10


class MnistCNN(nn.Module):
    """Two conv layers (8 and 16 filters of 5x5, stride 1, max-pool 2) followed
    by dense layers 128 -> 96 -> 10, ReLU activations throughout."""

    def __init__(self, num_classes: int = 10):
        super().__init__()
        self.conv0 = nn.Conv2d(1, 8, kernel_size=5, stride=1)
        self.conv1 = nn.Conv2d(8, 16, kernel_size=5, stride=1)
        self.dense0 = nn.Linear(16 * 4 * 4, 128)
        self.dense1 = nn.Linear(128, 96)
        self.dense2 = nn.Linear(96, num_classes)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = F.max_pool2d(F.relu(self.conv0(x)), 2)
        x = F.max_pool2d(F.relu(self.conv1(x)), 2)
        x = x.flatten(1)
        x = F.relu(self.dense0(x))
        x = F.relu(self.dense1(x))
        return self.dense2(x)


class ResidualBlock(nn.Module):
    def __init__(self, cin: int, cout: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.shortcut = nn.Sequential()
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(
                nn.Conv2d(cin, cout, 1, stride=stride, bias=False),
                nn.BatchNorm2d(cout),
            )

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + self.shortcut(x))


class SmallResNet(nn.Module):
    """Compact residual classifier: 3 stages of 2 blocks, widths 16/32/64.

    Desk-scale stand-in where a full-scale architecture would be overkill.
    """

    def __init__(self, in_channels: int = 3, num_classes: int = 10):
        super().__init__()
        self.stem = nn.Sequential(
            nn.Conv2d(in_channels, 16, 3, padding=1, bias=False),
            nn.BatchNorm2d(16),
            nn.ReLU(),
        )
        stages = []
        cin = 16
        for width, stride in ((16, 1), (32, 2), (64, 2)):
            stages.append(ResidualBlock(cin, width, stride))
            stages.append(ResidualBlock(width, width))
            cin = width
        self.stages = nn.Sequential(*stages)
        self.head = nn.Linear(64, num_classes)

    def forward(self, x):
        x = self.stages(self.stem(x))
        x = F.adaptive_avg_pool2d(x, 1).flatten(1)
        return self.head(x)


def build_model(spec: ModelSpec, seed: int) -> nn.Module:
    """Construct the model with parameters initialised deterministically from seed."""
    torch.manual_seed(seed)
    if spec.arch == "mnist_cnn":
        if spec.in_channels != 1 or spec.image_size != 28:
            raise ConfigError("mnist_cnn expects 1x28x28 inputs")
        return MnistCNN(spec.num_classes)
    if spec.arch == "small_resnet":
        return SmallResNet(spec.in_channels, spec.num_classes)
    raise ConfigError(f"unknown architecture: {spec.arch!r}")


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


@dataclass
class TrainConfig:
    epochs: int
    batch_size: int
    lr: float = 2e-3
    betas: tuple[float, float] = (0.9, 0.999)
    scheduler: str = "cosine"           # {"cosine", "none"}
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size <= 0 or self.lr <= 0:
            raise ConfigError("epochs must be >= 0, batch size and lr positive")
        if self.scheduler not in ("cosine", "none"):
            raise ConfigError(f"unknown scheduler: {self.scheduler!r}")


@dataclass
class TrainLog:
    train_loss: list[float] = field(default_factory=list)
    test_accuracy: list[float] = field(default_factory=list)


def make_optimizer(model: nn.Module, cfg: TrainConfig) -> torch.optim.Optimizer:
    return torch.optim.Adam(model.parameters(), lr=cfg.lr, betas=cfg.betas)


def train_step(model: nn.Module, batch: Batch, optimizer: torch.optim.Optimizer) -> float:
    model.train()
    optimizer.zero_grad()
    loss = F.cross_entropy(model(batch.images), batch.labels)
    if not torch.isfinite(loss):
        raise TrainingDiverged("non-finite training loss", {"labels": batch.labels.tolist()})
    loss.backward()
    optimizer.step()
    return float(loss.detach())


def train(
    model: nn.Module,
    dataset: ImageDataset,
    cfg: TrainConfig,
    augment=None,
    eval_dataset: ImageDataset | None = None,
) -> TrainLog:
    """Standard supervised loop; `augment` maps each Batch before the step
    (this is where a malicious augmenter hooks in)."""
    torch.manual_seed(cfg.seed)
    optimizer = make_optimizer(model, cfg)
    scheduler = None
    if cfg.scheduler == "cosine" and cfg.epochs > 0:
        scheduler = torch.optim.lr_scheduler.CosineAnnealingLR(optimizer, T_max=cfg.epochs)
    log = TrainLog()
    for epoch in range(cfg.epochs):
        losses = []
        shuffle = RngStream(cfg.seed, "train-shuffle", epoch)
        for batch in batches(dataset, cfg.batch_size, shuffle_rng=shuffle):
            if augment is not None:
                batch = augment(batch)
            losses.append(train_step(model, batch, optimizer))
        log.train_loss.append(sum(losses) / max(1, len(losses)))
        if eval_dataset is not None:
            log.test_accuracy.append(evaluate(model, eval_dataset))
        if scheduler is not None:
            scheduler.step()
    return log


@torch.no_grad()
def evaluate(model: nn.Module, dataset: ImageDataset, batch_size: int = 512) -> float:
    """Fraction of argmax-correct predictions over the dataset."""
    model.eval()
    correct = 0
    for batch in batches(dataset, batch_size):
        pred = model(batch.images).argmax(dim=1)
        correct += int((pred == batch.labels).sum())
    return correct / len(dataset)


@torch.no_grad()
def predict(model: nn.Module, images: torch.Tensor, batch_size: int = 512) -> torch.Tensor:
    model.eval()
    outs = []
    for start in range(0, images.shape[0], batch_size):
        outs.append(model(images[start:start + batch_size]).argmax(dim=1))
    return torch.cat(outs)


def save_checkpoint(model: nn.Module, spec: ModelSpec, path) -> None:
    torch.save({"version": 1, "spec": spec.__dict__, "state": model.state_dict()}, path)


def load_checkpoint(path) -> tuple[nn.Module, ModelSpec]:
    blob = torch.load(path, weights_only=False)
    if blob.get("version") != 1:
        raise ConfigError("incompatible checkpoint version")
    spec = ModelSpec(**blob["spec"])
    model = build_model(spec, seed=0)
    model.load_state_dict(blob["state"])
    return model, spec
