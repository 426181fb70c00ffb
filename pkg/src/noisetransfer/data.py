"""Datasets with inputs normalized to [0, 1]: synthetic blobs and IDX files."""

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from noisetransfer.errors import (
    BadMagicError,
    CountMismatchError,
    TruncatedPayloadError,
    ValidationError,
)

IDX_IMAGES_MAGIC = 2051
IDX_LABELS_MAGIC = 2049


@dataclass(eq=False)
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    num_classes: int
    clip_min: float = 0.0
    clip_max: float = 1.0

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.ndim != 2:
            raise ValidationError(f"inputs must be 2-D (n, d), got shape {self.inputs.shape}")
        if self.labels.shape != (self.inputs.shape[0],):
            raise ValidationError(
                f"{self.inputs.shape[0]} inputs but labels have shape {self.labels.shape}"
            )
        if self.num_classes < 2:
            raise ValidationError(f"need at least 2 classes, got {self.num_classes}")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValidationError(f"labels must lie in [0, {self.num_classes})")
        if self.inputs.size and (
            self.inputs.min() < self.clip_min or self.inputs.max() > self.clip_max
        ):
            raise ValidationError(f"inputs must lie in [{self.clip_min}, {self.clip_max}]")

    def __len__(self):
        return self.labels.shape[0]

    @property
    def dim(self):
        return self.inputs.shape[1]

    def subset(self, idx):
        return Dataset(self.inputs[idx], self.labels[idx], self.num_classes, self.clip_min, self.clip_max)


def blob_means(d, C, seed):
    """Class centres on equally spaced levels in [0.2, 0.8].

    Along every dimension the classes occupy the levels ``0.2 + 0.6*k/(C-1)``
    in a seeded order, so centres are distinct whenever ``d >= 1``.
    """
    rng = np.random.default_rng(seed)
    levels = 0.2 + 0.6 * np.arange(C) / (C - 1)
    means = np.empty((C, d))
    for j in range(d):
        means[:, j] = levels[rng.permutation(C)]
    return means


def gen_gaussian_blobs(n_per_class, d, C, spread, seed):
    if n_per_class < 1 or d < 1 or C < 2:
        raise ValidationError(f"invalid blob shape n_per_class={n_per_class}, d={d}, C={C}")
    if spread < 0:
        raise ValidationError(f"spread must be non-negative, got {spread}")
    means = blob_means(d, C, seed)
    rng = np.random.default_rng([seed, 1])
    labels = np.repeat(np.arange(C), n_per_class)
    inputs = means[labels] + spread * rng.standard_normal((labels.size, d))
    return Dataset(np.clip(inputs, 0.0, 1.0), labels, C)


def _be32(data, offset, what):
    if len(data) < offset + 4:
        raise TruncatedPayloadError(f"{what}: header ends after {len(data)} bytes")
    return struct.unpack_from(">I", data, offset)[0]


def parse_idx_images(data):
    """Images as an ``(count, rows*cols)`` float array scaled by 1/255."""
    magic = _be32(data, 0, "images")
    if magic != IDX_IMAGES_MAGIC:
        raise BadMagicError(f"bad magic {magic} in image file, expected {IDX_IMAGES_MAGIC}")
    count, rows, cols = (_be32(data, off, "images") for off in (4, 8, 12))
    need = count * rows * cols
    payload = data[16:]
    if len(payload) < need:
        raise TruncatedPayloadError(f"image payload has {len(payload)} bytes, header declares {need}")
    pixels = np.frombuffer(payload, dtype=np.uint8, count=need)
    return pixels.reshape(count, rows * cols).astype(np.float64) / 255.0


def parse_idx_labels(data):
    magic = _be32(data, 0, "labels")
    if magic != IDX_LABELS_MAGIC:
        raise BadMagicError(f"bad magic {magic} in label file, expected {IDX_LABELS_MAGIC}")
    count = _be32(data, 4, "labels")
    payload = data[8:]
    if len(payload) < count:
        raise TruncatedPayloadError(f"label payload has {len(payload)} bytes, header declares {count}")
    return np.frombuffer(payload, dtype=np.uint8, count=count).astype(np.int64)


def load_idx(images_path, labels_path, num_classes=None):
    images = parse_idx_images(Path(images_path).read_bytes())
    labels = parse_idx_labels(Path(labels_path).read_bytes())
    if images.shape[0] != labels.shape[0]:
        raise CountMismatchError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    if num_classes is None:
        num_classes = max(2, int(labels.max()) + 1) if labels.size else 2
    return Dataset(images, labels, num_classes)


def split(dataset, train_fraction, seed):
    """Seeded shuffle, then the first ``round(train_fraction*n)`` go to train."""
    if not 0.0 <= train_fraction <= 1.0:
        raise ValidationError(f"train_fraction must lie in [0, 1], got {train_fraction}")
    order = np.random.default_rng(seed).permutation(len(dataset))
    n_train = int(round(train_fraction * len(dataset)))
    return dataset.subset(order[:n_train]), dataset.subset(order[n_train:])
