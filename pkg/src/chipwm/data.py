"""Deterministic synthetic "pattern blob" classification data and an IDX loader."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np


@dataclass
class Dataset:
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray

    @property
    def num_classes(self) -> int:
        return int(max(self.y_train.max(), self.y_test.max())) + 1

    def subset(self, fraction: float, seed: int = 0) -> "Dataset":
        """Stratification-free random fraction of the training split; the test split is kept."""
        rng = np.random.default_rng(seed)
        n = max(1, int(round(fraction * len(self.x_train))))
        idx = np.sort(rng.permutation(len(self.x_train))[:n])
        return Dataset(self.x_train[idx], self.y_train[idx], self.x_test, self.y_test)


def _templates(rng: np.random.Generator, classes: int, size: int, blobs: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    out = np.zeros((classes, size, size))
    for c in range(classes):
        for _ in range(blobs):
            cy, cx = rng.uniform(1, size - 2, size=2)
            width = rng.uniform(1.0, 2.5)
            amp = rng.choice([-1.0, 1.0]) * rng.uniform(0.6, 1.2)
            out[c] += amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * width ** 2))
        out[c] /= np.abs(out[c]).max()
    return out


def pattern_blobs(seed: int = 0, n_train: int = 2000, n_test: int = 500, classes: int = 10,
                  size: int = 16, noise: float = 0.3, blobs: int = 3) -> Dataset:
    """Each class is a frozen template of Gaussian blobs; samples add N(0, noise^2) pixel noise.

    Labels are balanced (round-robin) and shuffled with the same seed.
    """
    rng = np.random.default_rng(seed)
    templates = _templates(rng, classes, size, blobs)

    def split(n):
        y = np.arange(n) % classes
        rng.shuffle(y)
        x = templates[y] + noise * rng.standard_normal((n, size, size))
        return x[:, None].astype(np.float32), y.astype(np.int64)

    x_tr, y_tr = split(n_train)
    x_te, y_te = split(n_test)
    return Dataset(x_tr, y_tr, x_te, y_te)


def _read_idx(path: Path) -> np.ndarray:
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        data = fh.read()
    zero, dtype_code, ndim = struct.unpack_from(">HBB", data, 0)
    if zero != 0 or dtype_code != 0x08:
        raise ValueError(f"{path}: only unsigned-byte IDX files are supported")
    dims = struct.unpack_from(f">{ndim}I", data, 4)
    return np.frombuffer(data, dtype=np.uint8, offset=4 + 4 * ndim).reshape(dims)


def load_idx(train_images, train_labels, test_images, test_labels) -> Dataset:
    """Loads MNIST-style IDX files; images are scaled to [0, 1] and given a channel axis."""
    def images(p):
        return (_read_idx(Path(p)).astype(np.float32) / 255.0)[:, None]

    def labels(p):
        return _read_idx(Path(p)).astype(np.int64)

    return Dataset(images(train_images), labels(train_labels), images(test_images), labels(test_labels))


def batches(x: np.ndarray, y: np.ndarray, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(len(x))
    for i in range(0, len(x), batch_size):
        idx = order[i:i + batch_size]
        yield x[idx], y[idx]
