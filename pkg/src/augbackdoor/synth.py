"""Deterministic synthetic stand-in datasets, written in the real binary formats.

When the true MNIST / CIFAR-10 files are unavailable (offline environments),
these generators render a 10-class digit dataset (28x28 grayscale, font glyphs
with affine jitter and noise) or a 10-class colored-shape dataset (32x32 RGB)
and write them as IDX / CIFAR binary batches, so `load_dataset` exercises the
same ingestion path either way.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw, ImageFont

from .core import RngStream

_FONT_CANDIDATES = [
    "/usr/share/fonts/truetype/dejavu/DejaVuSans-Bold.ttf",
    "/usr/share/fonts/truetype/dejavu/DejaVuSans.ttf",
]


def _find_font() -> str:
    for path in _FONT_CANDIDATES:
        if Path(path).exists():
            return path
    try:
        import matplotlib
        ttf = Path(matplotlib.__file__).parent / "mpl-data" / "fonts" / "ttf" / "DejaVuSans-Bold.ttf"
        if ttf.exists():
            return str(ttf)
    except ImportError:
        pass
    raise RuntimeError("no TTF font found for synthetic digit rendering")


_FONT_CACHE: dict[int, ImageFont.FreeTypeFont] = {}


def _font(size: int) -> ImageFont.FreeTypeFont:
    if size not in _FONT_CACHE:
        _FONT_CACHE[size] = ImageFont.truetype(_find_font(), size)
    return _FONT_CACHE[size]


def render_digit(digit: int, rng: RngStream, size: int = 28) -> np.ndarray:
    """One jittered glyph image, uint8 (size, size), white digit on black."""
    gen = rng.gen
    big = size * 2
    font_px = int(gen.integers(int(big * 0.58), int(big * 0.82)))
    canvas = Image.new("L", (big, big), 0)
    draw = ImageDraw.Draw(canvas)
    bbox = draw.textbbox((0, 0), str(digit), font=_font(font_px))
    gw, gh = bbox[2] - bbox[0], bbox[3] - bbox[1]
    cx = (big - gw) // 2 - bbox[0] + int(gen.integers(-4, 5))
    cy = (big - gh) // 2 - bbox[1] + int(gen.integers(-4, 5))
    draw.text((cx, cy), str(digit), fill=255, font=_font(font_px))
    angle = float(gen.uniform(-14.0, 14.0))
    canvas = canvas.rotate(angle, resample=Image.BILINEAR, fillcolor=0)
    canvas = canvas.resize((size, size), resample=Image.BILINEAR)
    arr = np.asarray(canvas, dtype=np.float32)
    arr += gen.normal(0.0, 8.0, size=arr.shape).astype(np.float32)
    return np.clip(arr, 0, 255).astype(np.uint8)


def _write_idx_images(path: Path, images: np.ndarray) -> None:
    n, h, w = images.shape
    path.write_bytes(struct.pack(">IIII", 0x00000803, n, h, w) + images.tobytes())


def _write_idx_labels(path: Path, labels: np.ndarray) -> None:
    path.write_bytes(struct.pack(">II", 0x00000801, len(labels)) + labels.astype(np.uint8).tobytes())


def make_digit_dataset(n: int, seed: int, split: str, size: int = 28) -> tuple[np.ndarray, np.ndarray]:
    images = np.empty((n, size, size), dtype=np.uint8)
    labels = np.empty(n, dtype=np.uint8)
    for i in range(n):
        rng = RngStream(seed, f"synth-digit/{split}", i)
        label = i % 10
        images[i] = render_digit(label, rng, size=size)
        labels[i] = label
    # deterministic shuffle so class order is not a giveaway
    order = RngStream(seed, f"synth-digit-order/{split}").gen.permutation(n)
    return images[order], labels[order]


def write_synthetic_mnist(root, n_train: int = 12000, n_test: int = 2000, seed: int = 7) -> Path:
    """Write a synthetic digit dataset in MNIST IDX layout under root/mnist."""
    out = Path(root) / "mnist"
    out.mkdir(parents=True, exist_ok=True)
    train_x, train_y = make_digit_dataset(n_train, seed, "train")
    test_x, test_y = make_digit_dataset(n_test, seed, "test")
    _write_idx_images(out / "train-images-idx3-ubyte", train_x)
    _write_idx_labels(out / "train-labels-idx1-ubyte", train_y)
    _write_idx_images(out / "t10k-images-idx3-ubyte", test_x)
    _write_idx_labels(out / "t10k-labels-idx1-ubyte", test_y)
    return out


# ---------------------------------------------------------------------------
# CIFAR-like colored shapes

_SHAPE_COLORS = [
    (220, 60, 60), (60, 200, 60), (70, 90, 220), (230, 210, 60), (200, 70, 200),
    (60, 210, 210), (240, 140, 50), (140, 240, 140), (150, 110, 220), (210, 210, 210),
]


def render_shape(cls: int, rng: RngStream, size: int = 32) -> np.ndarray:
    """One jittered shape image, uint8 (3, size, size). Class fixes shape kind + color."""
    gen = rng.gen
    bg = tuple(int(v) for v in gen.integers(0, 60, size=3))
    img = Image.new("RGB", (size, size), bg)
    draw = ImageDraw.Draw(img)
    color = _SHAPE_COLORS[cls]
    cx = int(gen.integers(10, size - 10))
    cy = int(gen.integers(10, size - 10))
    r = int(gen.integers(6, 11))
    kind = cls % 5
    box = (cx - r, cy - r, cx + r, cy + r)
    if kind == 0:
        draw.ellipse(box, fill=color)
    elif kind == 1:
        draw.rectangle(box, fill=color)
    elif kind == 2:
        draw.polygon([(cx, cy - r), (cx + r, cy + r), (cx - r, cy + r)], fill=color)
    elif kind == 3:
        draw.line([(cx - r, cy - r), (cx + r, cy + r)], fill=color, width=4)
        draw.line([(cx - r, cy + r), (cx + r, cy - r)], fill=color, width=4)
    else:
        draw.ellipse(box, outline=color, width=3)
    arr = np.asarray(img, dtype=np.float32)
    arr += gen.normal(0.0, 10.0, size=arr.shape).astype(np.float32)
    arr = np.clip(arr, 0, 255).astype(np.uint8)
    return arr.transpose(2, 0, 1)


def write_synthetic_cifar10(root, n_train: int = 10000, n_test: int = 2000, seed: int = 7) -> Path:
    out = Path(root) / "cifar-10-batches-bin"
    out.mkdir(parents=True, exist_ok=True)

    def make(n, split):
        recs = []
        for i in range(n):
            rng = RngStream(seed, f"synth-shape/{split}", i)
            label = i % 10
            img = render_shape(label, rng)
            recs.append(bytes([label]) + img.tobytes())
        order = RngStream(seed, f"synth-shape-order/{split}").gen.permutation(n)
        return [recs[j] for j in order]

    if n_train < 5 or n_test < 1:
        raise ValueError("need at least 5 train and 1 test example")
    train = make(n_train, "train")
    bounds = np.linspace(0, len(train), 6, dtype=int)
    for b in range(5):
        chunk = train[bounds[b]:bounds[b + 1]]
        (out / f"data_batch_{b + 1}.bin").write_bytes(b"".join(chunk))
    (out / "test_batch.bin").write_bytes(b"".join(make(n_test, "test")))
    return out
