"""Dataset ingestion (MNIST IDX, CIFAR10 binary), normalization and batching.

Images are kept as float32 N×C×H×W arrays of raw pixels in [0, 1].
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

MNIST_MEAN = (0.1307,)
MNIST_STD = (0.3081,)
CIFAR10_MEAN = (0.4914, 0.4822, 0.4465)
CIFAR10_STD = (0.2023, 0.1994, 0.2010)

IDX_IMAGES_MAGIC = 2051
IDX_LABELS_MAGIC = 2049
CIFAR_RECORD = 1 + 3 * 32 * 32


class DatasetFormatError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    split: str
    mean: tuple
    std: tuple
    name: str = ""
    num_classes: int = 10

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise DatasetFormatError(f"{len(self.images)} images but {len(self.labels)} labels")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, n: int) -> "Dataset":
        """First ``n`` examples (deterministic desk-scale slices)."""
        return Dataset(self.images[:n], self.labels[:n], self.split, self.mean, self.std, self.name, self.num_classes)


def _read(path: Path) -> bytes:
    if path.suffix == ".gz":
        with gzip.open(path, "rb") as fh:
            return fh.read()
    return path.read_bytes()


def parse_idx_images(buf: bytes) -> np.ndarray:
    if len(buf) < 16:
        raise DatasetFormatError("IDX image header truncated")
    magic, n, rows, cols = struct.unpack(">IIII", buf[:16])
    if magic != IDX_IMAGES_MAGIC:
        raise DatasetFormatError(f"bad IDX image magic {magic}, expected {IDX_IMAGES_MAGIC}")
    if len(buf) - 16 != n * rows * cols:
        raise DatasetFormatError(f"IDX header declares {n}x{rows}x{cols} pixels, payload has {len(buf) - 16} bytes")
    return np.frombuffer(buf, dtype=np.uint8, offset=16).reshape(n, rows, cols)


def parse_idx_labels(buf: bytes) -> np.ndarray:
    if len(buf) < 8:
        raise DatasetFormatError("IDX label header truncated")
    magic, n = struct.unpack(">II", buf[:8])
    if magic != IDX_LABELS_MAGIC:
        raise DatasetFormatError(f"bad IDX label magic {magic}, expected {IDX_LABELS_MAGIC}")
    if len(buf) - 8 != n:
        raise DatasetFormatError(f"IDX header declares {n} labels, payload has {len(buf) - 8} bytes")
    return np.frombuffer(buf, dtype=np.uint8, offset=8)


def _find(directory: Path, stem: str) -> Path:
    # both the canonical "-idx3-ubyte" and the "…s.idx3-ubyte" spellings exist in the wild
    variants = [stem, stem.replace("-idx", ".idx")]
    for v in variants:
        for suffix in ("", ".gz"):
            p = directory / f"{v}{suffix}"
            if p.exists():
                return p
    raise FileNotFoundError(f"no {stem}[.gz] in {directory}")


def _mnist_split(directory: Path, prefix: str, split: str) -> Dataset:
    imgs = parse_idx_images(_read(_find(directory, f"{prefix}-images-idx3-ubyte")))
    labels = parse_idx_labels(_read(_find(directory, f"{prefix}-labels-idx1-ubyte")))
    if len(imgs) != len(labels):
        raise DatasetFormatError(f"{len(imgs)} images but {len(labels)} labels in {prefix} split")
    images = (imgs.astype(np.float32) / 255.0)[:, None, :, :]
    return Dataset(images, labels.astype(np.int64), split, MNIST_MEAN, MNIST_STD, "mnist")


def load_mnist(directory) -> tuple[Dataset, Dataset]:
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"MNIST directory {directory} does not exist")
    return _mnist_split(directory, "train", "train"), _mnist_split(directory, "t10k", "test")


def parse_cifar10_batch(buf: bytes) -> tuple[np.ndarray, np.ndarray]:
    if len(buf) % CIFAR_RECORD:
        raise DatasetFormatError(f"CIFAR10 batch of {len(buf)} bytes is not a multiple of {CIFAR_RECORD}")
    rec = np.frombuffer(buf, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    return rec[:, 1:].reshape(-1, 3, 32, 32), rec[:, 0].astype(np.int64)


def load_cifar10(directory) -> tuple[Dataset, Dataset]:
    directory = Path(directory)
    if (directory / "cifar-10-batches-bin").is_dir():
        directory = directory / "cifar-10-batches-bin"
    if not directory.is_dir():
        raise FileNotFoundError(f"CIFAR10 directory {directory} does not exist")

    def load(names, split):
        parts = [parse_cifar10_batch((directory / n).read_bytes()) for n in names]
        x = np.concatenate([p[0] for p in parts]).astype(np.float32) / 255.0
        y = np.concatenate([p[1] for p in parts])
        if y.size and y.max() > 9:
            raise DatasetFormatError("CIFAR10 label outside [0, 10)")
        return Dataset(x, y, split, CIFAR10_MEAN, CIFAR10_STD, "cifar10")

    train = load([f"data_batch_{i}.bin" for i in range(1, 6)], "train")
    test = load(["test_batch.bin"], "test")
    return train, test


def normalize(batch: np.ndarray, dataset: Dataset) -> np.ndarray:
    mean, std = _stats(batch, dataset)
    return (batch - mean) / std


def denormalize(batch: np.ndarray, dataset: Dataset) -> np.ndarray:
    mean, std = _stats(batch, dataset)
    return batch * std + mean


def _stats(batch: np.ndarray, dataset: Dataset):
    if batch.ndim != 4 or batch.shape[1] != len(dataset.mean):
        raise ValueError(f"batch has {batch.shape[1] if batch.ndim == 4 else '?'} channels, "
                         f"dataset normalization has {len(dataset.mean)}")
    mean = np.asarray(dataset.mean, dtype=batch.dtype).reshape(1, -1, 1, 1)
    std = np.asarray(dataset.std, dtype=batch.dtype).reshape(1, -1, 1, 1)
    return mean, std


class BatchIterator:
    """Mini-batches over a dataset; each pass over the iterator is one epoch.

    Epoch ``e`` uses the permutation drawn from ``default_rng([seed, e])`` so
    order depends only on (seed, epoch). The final short batch is kept.
    """

    def __init__(self, dataset: Dataset, batch_size: int, seed: int = 0, shuffle: bool = True):
        if batch_size < 1:
            raise ValueError("batch size must be >= 1")
        self.dataset = dataset
        self.batch_size = batch_size
        self.seed = seed
        self.shuffle = shuffle
        self.epoch = 0

    def __len__(self) -> int:
        return -(-len(self.dataset) // self.batch_size)

    def order(self, epoch: int) -> np.ndarray:
        n = len(self.dataset)
        if not self.shuffle:
            return np.arange(n)
        return np.random.default_rng([self.seed, epoch]).permutation(n)

    def __iter__(self) -> Iterator[tuple[np.ndarray, np.ndarray, np.ndarray]]:
        idx = self.order(self.epoch)
        self.epoch += 1
        for start in range(0, len(idx), self.batch_size):
            sel = idx[start : start + self.batch_size]
            yield self.dataset.images[sel], self.dataset.labels[sel], sel


def batches(dataset: Dataset, batch_size: int, seed: int = 0, shuffle: bool = True) -> BatchIterator:
    return BatchIterator(dataset, batch_size, seed, shuffle)


def synthetic_dataset(n: int = 200, side: int = 28, channels: int = 1, classes: int = 10, seed: int = 0,
                      split: str = "train") -> Dataset:
    """Noisy copies of per-class prototype images, for tests and demos.

    Prototypes are random 4x4 grids upsampled to ``side`` (blocky, so small
    convolutions can tell them apart). ``seed`` fixes the prototypes; the
    split picks an independent noise stream, so train and test sets built
    with one seed share classes but not samples.
    """
    coarse = np.random.default_rng(seed).uniform(0, 1, size=(classes, channels, 4, 4))
    cell = -(-side // 4)
    protos = np.repeat(np.repeat(coarse, cell, axis=2), cell, axis=3)[:, :, :side, :side].astype(np.float32)
    rng = np.random.default_rng([seed, 0 if split == "train" else 1])
    labels = np.arange(n) % classes
    rng.shuffle(labels)
    noise = rng.normal(0, 0.15, size=(n, channels, side, side)).astype(np.float32)
    images = np.clip(protos[labels] + noise, 0, 1).astype(np.float32)
    mean, std = (MNIST_MEAN, MNIST_STD) if channels == 1 else (CIFAR10_MEAN, CIFAR10_STD)
    return Dataset(images, labels.astype(np.int64), split, mean, std, "synthetic", classes)
