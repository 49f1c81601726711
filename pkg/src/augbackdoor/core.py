"""Shared domain types, dataset ingestion, seeded RNG streams, and report I/O."""

from __future__ import annotations

import csv
import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import torch

REPORT_VERSION = 1

CLEAN = "clean"
BACKDOORED = "backdoored"
GENERATED = "generated"


class ConfigError(ValueError):
    """Bad configuration value (unknown dataset id, invalid proportion, ...)."""


class IngestionError(RuntimeError):
    """Dataset file missing or corrupt; message names the offending file."""


class ContractViolation(ValueError):
    """An operation was called with inputs that break its preconditions."""


class ReportVersionError(RuntimeError):
    """Persisted report was written by an incompatible version."""


# ---------------------------------------------------------------------------
# RNG streams

def _purpose_key(purpose: str) -> int:
    return int.from_bytes(hashlib.blake2s(purpose.encode(), digest_size=8).digest(), "big")


class RngStream:
    """A counter-based random stream keyed by (seed, purpose, index).

    Two streams built with identical keys replay bit-identical draws; distinct
    purposes or indices give independent streams under the same seed. One
    stream must not be shared between concurrent workers.
    """

    def __init__(self, seed: int, purpose: str, index: int = 0):
        self.seed = int(seed)
        self.purpose = purpose
        self.index = int(index)
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=(_purpose_key(purpose), self.index))
        self.gen = np.random.Generator(np.random.Philox(ss))

    def fork(self, index: int) -> "RngStream":
        return RngStream(self.seed, self.purpose, index)

    def random(self) -> float:
        return float(self.gen.random())

    def torch_seed(self) -> int:
        # stable 63-bit seed for torch generators fed from this stream
        return int(self.gen.integers(0, 2**63 - 1))


def draw_uniform(stream: RngStream) -> float:
    """Next uniform draw in [0, 1); advances the stream's draw index."""
    return stream.random()


# ---------------------------------------------------------------------------
# Domain types

@dataclass
class Batch:
    """An ordered minibatch: float images in [0,1] plus integer labels.

    provenance carries one flag per example ("clean", "backdoored", ...).
    """

    images: torch.Tensor  # (N, C, H, W), float32 in [0, 1]
    labels: torch.Tensor  # (N,), int64
    provenance: list[str] = field(default_factory=list)

    def __post_init__(self):
        if self.images.ndim != 4:
            raise ContractViolation(f"expected (N,C,H,W) images, got shape {tuple(self.images.shape)}")
        n = self.images.shape[0]
        if n == 0:
            raise ContractViolation("batch must be nonempty")
        if self.labels.shape != (n,):
            raise ContractViolation("labels length must match batch size")
        if not self.provenance:
            self.provenance = [CLEAN] * n
        if len(self.provenance) != n:
            raise ContractViolation("provenance length must match batch size")

    def __len__(self) -> int:
        return self.images.shape[0]

    def clone(self) -> "Batch":
        return Batch(self.images.clone(), self.labels.clone(), list(self.provenance))


@dataclass
class ImageDataset:
    name: str
    split: str
    images: torch.Tensor  # (N, C, H, W) float32 in [0, 1]
    labels: torch.Tensor  # (N,) int64
    num_classes: int

    def __post_init__(self):
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ContractViolation("labels out of range for num_classes")

    def __len__(self) -> int:
        return self.images.shape[0]

    def class_histogram(self) -> np.ndarray:
        return np.bincount(self.labels.numpy(), minlength=self.num_classes)


def batches(
    dataset: ImageDataset,
    batch_size: int,
    shuffle_rng: RngStream | None = None,
    drop_last: bool = False,
) -> Iterator[Batch]:
    """Iterate the dataset as Batches, optionally in a seeded shuffled order."""
    n = len(dataset)
    order = np.arange(n)
    if shuffle_rng is not None:
        shuffle_rng.gen.shuffle(order)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        if drop_last and len(idx) < batch_size:
            break
        if len(idx) == 0:
            break
        sel = torch.from_numpy(idx)
        yield Batch(dataset.images[sel], dataset.labels[sel])


# ---------------------------------------------------------------------------
# Dataset ingestion (MNIST IDX and CIFAR-10 binary formats)

_IDX_IMAGES_MAGIC = 0x00000803
_IDX_LABELS_MAGIC = 0x00000801

_MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def read_idx(path: Path) -> np.ndarray:
    """Read one IDX file (big-endian magic + dims + ubyte payload)."""
    path = Path(path)
    if not path.exists():
        raise IngestionError(f"missing dataset file: {path}")
    raw = path.read_bytes()
    if len(raw) < 8:
        raise IngestionError(f"corrupt IDX file (truncated header): {path}")
    magic = struct.unpack(">I", raw[:4])[0]
    if magic == _IDX_IMAGES_MAGIC:
        ndim = 3
    elif magic == _IDX_LABELS_MAGIC:
        ndim = 1
    else:
        raise IngestionError(f"corrupt IDX file (bad magic 0x{magic:08x}): {path}")
    header = 4 + 4 * ndim
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(dims))
    if len(raw) - header != count:
        raise IngestionError(f"corrupt IDX file (payload size mismatch): {path}")
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def _load_mnist(root: Path, split: str) -> tuple[np.ndarray, np.ndarray]:
    img_name, lbl_name = _MNIST_FILES[split]
    images = read_idx(root / "mnist" / img_name)
    labels = read_idx(root / "mnist" / lbl_name)
    if images.shape[0] != labels.shape[0]:
        raise IngestionError(f"image/label count mismatch in {root / 'mnist'}")
    return images[:, None, :, :], labels  # add channel axis


_CIFAR_FILES = {
    "train": [f"data_batch_{i}.bin" for i in range(1, 6)],
    "test": ["test_batch.bin"],
}
_CIFAR_RECORD = 1 + 3072


def _load_cifar10(root: Path, split: str) -> tuple[np.ndarray, np.ndarray]:
    images, labels = [], []
    for name in _CIFAR_FILES[split]:
        path = root / "cifar-10-batches-bin" / name
        if not path.exists():
            raise IngestionError(f"missing dataset file: {path}")
        raw = np.frombuffer(path.read_bytes(), dtype=np.uint8)
        if len(raw) == 0 or len(raw) % _CIFAR_RECORD != 0:
            raise IngestionError(f"corrupt CIFAR batch (bad record size): {path}")
        recs = raw.reshape(-1, _CIFAR_RECORD)
        labels.append(recs[:, 0])
        images.append(recs[:, 1:].reshape(-1, 3, 32, 32))
    return np.concatenate(images), np.concatenate(labels)


def _subset_order(name: str, split: str, n: int) -> np.ndarray:
    # seeded shuffle fixed per dataset version, so small splits are stable
    rng = RngStream(0xDA7A5E7, f"subset/{name}/{split}/v1")
    order = np.arange(n)
    rng.gen.shuffle(order)
    return order


def load_dataset(name: str, root, split: str, subset: int | None = None) -> ImageDataset:
    """Load MNIST or CIFAR-10 from their standard binary files under root.

    Integer pixels are scaled to [0,1] floats, channels-first. `subset` takes a
    deterministic prefix of a seeded shuffled order.
    """
    root = Path(root)
    if split not in ("train", "test"):
        raise ConfigError(f"unknown split: {split!r}")
    if name == "mnist":
        images, labels = _load_mnist(root, split)
    elif name == "cifar10":
        images, labels = _load_cifar10(root, split)
    else:
        raise ConfigError(f"unknown dataset id: {name!r}")
    if subset is not None:
        if subset <= 0 or subset > len(labels):
            raise ConfigError(f"subset size {subset} out of range for {len(labels)} examples")
        idx = _subset_order(name, split, len(labels))[:subset]
        images, labels = images[idx], labels[idx]
    return ImageDataset(
        name=name,
        split=split,
        images=torch.from_numpy(images.copy()).float().div_(255.0),
        labels=torch.from_numpy(labels.copy()).long(),
        num_classes=10,
    )


# ---------------------------------------------------------------------------
# Experiment reports

@dataclass
class ExperimentReport:
    config: dict
    seed: int
    metrics: dict
    curves: dict[str, list] = field(default_factory=dict)
    timestamps: dict = field(default_factory=dict)
    version: int = REPORT_VERSION


def save_report(report: ExperimentReport, path) -> None:
    """Persist a report as canonical JSON; identical reports give identical bytes."""
    if report.seed is None:
        raise ContractViolation("report is missing its seed")
    if report.config is None or report.metrics is None:
        raise ContractViolation("report is missing config or metrics")
    payload = {
        "version": report.version,
        "config": report.config,
        "seed": report.seed,
        "metrics": report.metrics,
        "curves": report.curves,
        "timestamps": report.timestamps,
    }
    text = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    Path(path).write_text(text + "\n")


def load_report(path) -> ExperimentReport:
    payload = json.loads(Path(path).read_text())
    version = payload.get("version")
    if version != REPORT_VERSION:
        raise ReportVersionError(f"report version {version} incompatible with {REPORT_VERSION}")
    return ExperimentReport(
        config=payload["config"],
        seed=payload["seed"],
        metrics=payload["metrics"],
        curves=payload.get("curves", {}),
        timestamps=payload.get("timestamps", {}),
        version=version,
    )


def write_curves_csv(curves: dict[str, Sequence[float]], path) -> None:
    """Emit curves as CSV: header row, one iteration per line."""
    names = sorted(curves)
    length = max((len(curves[k]) for k in names), default=0)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration"] + names)
        for i in range(length):
            row = [i] + [curves[k][i] if i < len(curves[k]) else "" for k in names]
            writer.writerow(row)
