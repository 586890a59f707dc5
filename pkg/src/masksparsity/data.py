"""CIFAR-10 binary ingestion, synthetic datasets, batching and augmentation."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

CIFAR_MEAN = (0.4914, 0.4822, 0.4465)
CIFAR_STD = (0.2470, 0.2435, 0.2616)
RECORD_BYTES = 3073
TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
TEST_FILE = "test_batch.bin"


class DataFormatError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # N x C x H x W float32, already normalized
    labels: np.ndarray  # int64
    mean: tuple[float, ...]
    std: tuple[float, ...]
    num_classes: int = 10

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")
        if not np.all(np.isfinite(self.images)):
            raise ValueError("images contain non-finite values")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def image_hw(self) -> tuple[int, int]:
        return tuple(self.images.shape[2:])

    def subset(self, idx) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx], self.mean, self.std, self.num_classes)

    def denormalized(self) -> np.ndarray:
        mean = np.asarray(self.mean, dtype=np.float32).reshape(1, -1, 1, 1)
        std = np.asarray(self.std, dtype=np.float32).reshape(1, -1, 1, 1)
        return self.images * std + mean


def _normalize(pixels: np.ndarray, mean, std) -> np.ndarray:
    mean = np.asarray(mean, dtype=np.float32).reshape(1, -1, 1, 1)
    std = np.asarray(std, dtype=np.float32).reshape(1, -1, 1, 1)
    return ((pixels.astype(np.float32) / np.float32(255.0)) - mean) / std


def read_cifar_batch(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    """Raw (uint8 N x 3 x 32 x 32 pixels, int64 labels) from one binary batch file."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"missing CIFAR-10 batch file {path}")
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size == 0 or raw.size % RECORD_BYTES:
        whole = raw.size // RECORD_BYTES * RECORD_BYTES
        raise DataFormatError(
            f"{path}: {raw.size} bytes is not a multiple of {RECORD_BYTES}; "
            f"truncated record starts at byte offset {whole}"
        )
    records = raw.reshape(-1, RECORD_BYTES)
    labels = records[:, 0].astype(np.int64)
    if labels.max() > 9:
        bad = int(np.argmax(labels > 9))
        raise DataFormatError(f"{path}: label {labels[bad]} at byte offset {bad * RECORD_BYTES}")
    return records[:, 1:].reshape(-1, 3, 32, 32), labels


def write_cifar_batch(path: str | Path, pixels: np.ndarray, labels: np.ndarray) -> None:
    pixels = np.asarray(pixels, dtype=np.uint8).reshape(len(labels), -1)
    records = np.concatenate([np.asarray(labels, dtype=np.uint8)[:, None], pixels], axis=1)
    Path(path).write_bytes(records.tobytes())


def to_pixels(dataset: Dataset) -> np.ndarray:
    """Invert normalization back to uint8 pixel values."""
    return np.clip(np.rint(dataset.denormalized() * 255.0), 0, 255).astype(np.uint8)


def _load_files(paths) -> Dataset:
    parts = [read_cifar_batch(p) for p in paths]
    pixels = np.concatenate([p for p, _ in parts])
    labels = np.concatenate([y for _, y in parts])
    return Dataset(_normalize(pixels, CIFAR_MEAN, CIFAR_STD), labels, CIFAR_MEAN, CIFAR_STD)


def load_cifar10(dir_path: str | Path) -> tuple[Dataset, Dataset]:
    d = Path(dir_path)
    return _load_files(d / f for f in TRAIN_FILES), _load_files([d / TEST_FILE])


def _templates(num_classes, channels, size, rng, bumps=3) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    t = np.zeros((num_classes, channels, size, size))
    width = size / 6.0
    for c in range(num_classes):
        for ch in range(channels):
            for _ in range(bumps):
                cy, cx = rng.uniform(0, size, 2)
                sign = rng.choice([-1.0, 1.0])
                t[c, ch] += sign * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * width**2))
    return t


def _synthetic_arrays(n, num_classes, seed, channels, size, noise, shift, template_seed):
    rng = np.random.default_rng(seed)
    trng = rng if template_seed is None else np.random.default_rng(template_seed)
    templates = _templates(num_classes, channels, size, trng)
    labels = rng.permutation(np.arange(n) % num_classes).astype(np.int64)
    images = templates[labels]
    if shift:
        pad = np.pad(images, ((0, 0), (0, 0), (shift, shift), (shift, shift)))
        offsets = rng.integers(0, 2 * shift + 1, size=(n, 2))
        images = np.stack([pad[i, :, dy : dy + size, dx : dx + size] for i, (dy, dx) in enumerate(offsets)])
    images = images + noise * rng.standard_normal(images.shape)
    return images.astype(np.float32), labels


def synthetic_dataset(n: int, num_classes: int = 10, seed: int = 0, channels: int = 3,
                      size: int = 16, noise: float = 1.0, shift: int = 0,
                      template_seed: int | None = None) -> Dataset:
    """Class-conditional Gaussian-bump images plus white noise, standardized per channel.

    Each class owns a smooth template; ``shift`` adds a random translation of
    up to that many pixels. ``template_seed`` pins the class templates so
    that independently drawn sets share one distribution.
    """
    if n < num_classes:
        raise ValueError("need at least one sample per class")
    images, labels = _synthetic_arrays(n, num_classes, seed, channels, size, noise, shift, template_seed)
    mean = tuple(float(m) for m in images.mean(axis=(0, 2, 3)))
    std = tuple(float(s) for s in images.std(axis=(0, 2, 3)))
    m = np.asarray(mean, np.float32).reshape(1, -1, 1, 1)
    s = np.asarray(std, np.float32).reshape(1, -1, 1, 1)
    return Dataset((images - m) / s, labels, mean, std, num_classes)


def synthetic_split(n_train: int, n_test: int, num_classes: int = 10, seed: int = 0,
                    **kwargs) -> tuple[Dataset, Dataset]:
    """Train and test sets from one synthetic distribution, normalized with train statistics."""
    full = synthetic_dataset(n_train + n_test, num_classes, seed, **kwargs)
    train = full.subset(np.arange(n_train))
    test = full.subset(np.arange(n_train, n_train + n_test))
    return train, test


def hflip(images: np.ndarray) -> np.ndarray:
    return images[..., ::-1]


def augment_batch(images: np.ndarray, rng: np.random.Generator, pad: int = 4) -> np.ndarray:
    """Zero-pad, random crop back to the original size, random horizontal flip."""
    b, _, h, w = images.shape
    padded = np.pad(images, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    dy = rng.integers(0, 2 * pad + 1, b)
    dx = rng.integers(0, 2 * pad + 1, b)
    flip = rng.random(b) < 0.5
    out = np.empty_like(images)
    for i in range(b):
        crop = padded[i, :, dy[i] : dy[i] + h, dx[i] : dx[i] + w]
        out[i] = crop[:, :, ::-1] if flip[i] else crop
    return out


def batches(dataset: Dataset, batch_size: int, shuffle_seed: int | None = None,
            augment: bool = False, epoch: int = 0) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Mini-batches in a permutation determined by (shuffle_seed, epoch); the last may be short."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    n = len(dataset)
    if shuffle_seed is None:
        order = np.arange(n)
        rng = np.random.default_rng([0, epoch])
    else:
        rng = np.random.default_rng([shuffle_seed, epoch])
        order = rng.permutation(n)
    for start in range(0, n, batch_size):
        idx = order[start : start + batch_size]
        x = dataset.images[idx]
        if augment:
            x = augment_batch(x, rng)
        yield x, dataset.labels[idx]
