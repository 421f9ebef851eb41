"""MNIST IDX loading and synthetic datasets."""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConsistencyError, FormatError, InputError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


@dataclass
class Dataset:
    images: np.ndarray  # (N, features) float32 in [0, 1]
    labels: np.ndarray  # (N,) int64
    split: str = "train"
    n_classes: int = 10

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ConsistencyError(
                f"{len(self.images)} images but {len(self.labels)} labels"
            )
        if len(self.labels) and self.labels.max() >= self.n_classes:
            raise InputError(f"label {self.labels.max()} >= class count {self.n_classes}")

    def __len__(self):
        return len(self.labels)

    def subset(self, index, split=None):
        return Dataset(self.images[index], self.labels[index], split or self.split, self.n_classes)

    def shuffled(self, seed):
        perm = np.random.default_rng(seed).permutation(len(self))
        return self.subset(perm)

    def batches(self, batch_size, rng=None):
        """Yield ``(images, labels)`` mini-batches; shuffled when ``rng`` is given."""
        n = len(self)
        order = rng.permutation(n) if rng is not None else np.arange(n)
        for i in range(0, n, batch_size):
            idx = order[i : i + batch_size]
            yield self.images[idx], self.labels[idx]


def _read_idx(path, expected_magic):
    try:
        with open(path, "rb") as f:
            raw = f.read()
    except FileNotFoundError as exc:
        raise InputError(f"missing IDX file: {path}") from exc
    if len(raw) < 4:
        raise OSError(f"{path}: truncated IDX header")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise FormatError(f"{path}: bad IDX magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise OSError(f"{path}: truncated IDX header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(dims))
    if len(raw) - header < count:
        raise OSError(f"{path}: truncated IDX payload ({len(raw) - header} of {count} bytes)")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=header).reshape(dims)


def load_idx(images_path, labels_path, split="train", n_classes=10):
    images = _read_idx(images_path, IDX_IMAGES_MAGIC)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC)
    if len(images) != len(labels):
        raise ConsistencyError(f"{len(images)} images but {len(labels)} labels")
    x = images.reshape(len(images), -1).astype(np.float32) / np.float32(255.0)
    return Dataset(x, labels.astype(np.int64), split, n_classes)


def write_idx(dataset, images_path, labels_path, image_shape=None):
    """Write a dataset back to IDX (pixels are re-quantized to bytes)."""
    n = len(dataset)
    if image_shape is None:
        features = dataset.images.shape[1]
        side = int(round(np.sqrt(features)))
        image_shape = (side, side) if side * side == features else (features,)
    pixels = np.rint(dataset.images * 255.0).astype(np.uint8)
    dims = (n,) + tuple(image_shape)
    with open(images_path, "wb") as f:
        f.write(struct.pack(">I", 0x800 | len(dims)))
        f.write(struct.pack(f">{len(dims)}I", *dims))
        f.write(pixels.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABELS_MAGIC, n))
        f.write(dataset.labels.astype(np.uint8).tobytes())


def load_mnist(data_dir, split="train"):
    img, lab = MNIST_FILES[split]
    return load_idx(os.path.join(data_dir, img), os.path.join(data_dir, lab), split)


def synthetic_blobs(n, classes, dim, seed=0, spread=0.1, split="train", sample_seed=None):
    """One isotropic Gaussian blob per class with centres on the unit sphere.

    At the default spread the classes are linearly separable with
    overwhelming probability. ``seed`` fixes the centres; ``sample_seed``
    (default: same stream) draws a fresh sample around the same centres.
    Values are mapped affinely into [0, 1] to match the image convention.
    """
    if classes < 1 or dim < 1 or n < 0:
        raise InputError("synthetic_blobs needs classes >= 1, dim >= 1, n >= 0")
    rng = np.random.default_rng(seed)
    centres = rng.standard_normal((classes, dim))
    if sample_seed is not None:
        rng = np.random.default_rng([seed, sample_seed])
    centres /= np.linalg.norm(centres, axis=1, keepdims=True)
    labels = rng.integers(0, classes, size=n)
    x = centres[labels] + spread * rng.standard_normal((n, dim))
    # fixed affine map into [0, 1]: centres lie in [-1, 1]
    x = np.clip((x + 1.0 + 4 * spread) / (2.0 + 8 * spread), 0.0, 1.0)
    return Dataset(x.astype(np.float32), labels.astype(np.int64), split, classes)


def train_val_split(dataset, val_size, seed=0):
    """Seeded hold-out split; returns ``(train, val)``."""
    perm = np.random.default_rng(seed).permutation(len(dataset))
    val_idx, train_idx = np.sort(perm[:val_size]), np.sort(perm[val_size:])
    return dataset.subset(train_idx, "train"), dataset.subset(val_idx, "val")
