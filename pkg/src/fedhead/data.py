"""Embedding dataset files, per-device one-shot streams, and synthetic tasks.

Feature extraction happens upstream; this module only ingests precomputed
embedding vectors. The on-disk format is binary and fixed:

    header (16 bytes, little-endian):
        magic "FTED" | u32 embedding_dim | u32 num_classes | u32 sample_count
    then one record per sample:
        u8 split_tag (0=train, 1=validation) | u8 label | 2 pad bytes |
        embedding_dim x float32 features

The synthetic generators cover two regimes: cleanly separable Gaussian
clusters, and the sparse-extractor pathology where only k of E embedding
dimensions ever carry signal (the rest are exactly zero).
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import DataExhaustedError, DatasetFormatError
from .nn import EmbeddingSample

DATASET_MAGIC = b"FTED"
_HEADER = struct.Struct("<4sIII")
_RECORD_PREFIX = struct.Struct("<BBH")  # split_tag, label, pad (written as zero)

SPLIT_TRAIN = 0
SPLIT_VALIDATION = 1


@dataclass(eq=False)
class EmbeddingDataset:
    """An ordered collection of embedding samples with train/validation tags.

    Features are stored float32, matching the file format exactly, so a
    save/load round trip is lossless. Training code widens to float64 on use.
    """

    name: str
    features: np.ndarray  # (n, E) float32
    labels: np.ndarray  # (n,) int64
    splits: np.ndarray  # (n,) uint8
    num_classes: int

    def __post_init__(self) -> None:
        self.features = np.asarray(self.features, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.splits = np.asarray(self.splits, dtype=np.uint8)
        if self.features.ndim != 2:
            raise DatasetFormatError(f"features must be (n, E), got {self.features.shape}")
        n = self.features.shape[0]
        if self.labels.shape != (n,) or self.splits.shape != (n,):
            raise DatasetFormatError("labels and splits must have one entry per sample")
        if self.num_classes < 1:
            raise DatasetFormatError("num_classes must be >= 1")
        if n and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DatasetFormatError("labels must lie in [0, num_classes)")
        if n and not np.isin(self.splits, (SPLIT_TRAIN, SPLIT_VALIDATION)).all():
            raise DatasetFormatError("split tags must be 0 (train) or 1 (validation)")

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def embedding_dim(self) -> int:
        return self.features.shape[1]

    def sample(self, index: int) -> EmbeddingSample:
        return EmbeddingSample(self.features[index], int(self.labels[index]))

    def train_indices(self) -> np.ndarray:
        return np.flatnonzero(self.splits == SPLIT_TRAIN)

    def validation_indices(self) -> np.ndarray:
        return np.flatnonzero(self.splits == SPLIT_VALIDATION)

    def train_samples(self) -> list[EmbeddingSample]:
        return [self.sample(i) for i in self.train_indices()]

    def validation_samples(self) -> list[EmbeddingSample]:
        return [self.sample(i) for i in self.validation_indices()]


def save_dataset(dataset: EmbeddingDataset, path) -> None:
    """Write a dataset in the binary format above."""
    if dataset.num_classes > 256:
        raise DatasetFormatError("file format stores labels as u8; num_classes must be <= 256")
    n = len(dataset)
    feats = np.ascontiguousarray(dataset.features, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(DATASET_MAGIC, dataset.embedding_dim, dataset.num_classes, n))
        for i in range(n):
            fh.write(_RECORD_PREFIX.pack(int(dataset.splits[i]), int(dataset.labels[i]), 0))
            fh.write(feats[i].tobytes())


def load_dataset(path, name: str | None = None) -> EmbeddingDataset:
    """Read and validate a dataset file; errors carry the failing record/offset."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise DatasetFormatError(f"file is {len(raw)} bytes; header needs {_HEADER.size}")
    magic, dim, classes, count = _HEADER.unpack_from(raw, 0)
    if magic != DATASET_MAGIC:
        raise DatasetFormatError(f"bad magic {magic!r} at offset 0, expected {DATASET_MAGIC!r}")
    if dim < 1:
        raise DatasetFormatError("header declares embedding_dim < 1")
    if classes < 1:
        raise DatasetFormatError("header declares num_classes < 1")
    record_size = _RECORD_PREFIX.size + 4 * dim
    expected = _HEADER.size + count * record_size
    if len(raw) != expected:
        raise DatasetFormatError(
            f"file is {len(raw)} bytes, header implies {expected} "
            f"({count} records of {record_size} bytes)"
        )
    features = np.empty((count, dim), dtype=np.float32)
    labels = np.empty(count, dtype=np.int64)
    splits = np.empty(count, dtype=np.uint8)
    offset = _HEADER.size
    for i in range(count):
        split_tag, label, _pad = _RECORD_PREFIX.unpack_from(raw, offset)
        if split_tag not in (SPLIT_TRAIN, SPLIT_VALIDATION):
            raise DatasetFormatError(f"record {i} (offset {offset}): bad split tag {split_tag}")
        if label >= classes:
            raise DatasetFormatError(
                f"record {i} (offset {offset}): label {label} out of range for {classes} classes"
            )
        splits[i] = split_tag
        labels[i] = label
        features[i] = np.frombuffer(raw, dtype="<f4", count=dim, offset=offset + _RECORD_PREFIX.size)
        offset += record_size
    return EmbeddingDataset(
        name=name if name is not None else str(path),
        features=features,
        labels=labels,
        splits=splits,
        num_classes=classes,
    )


@dataclass(eq=False)
class DeviceStream:
    """A device's private, one-shot view of the training split.

    Indices are disjoint across devices. Each index is yielded at most once;
    running past the end raises instead of wrapping around.
    """

    device_id: int
    dataset: EmbeddingDataset
    indices: np.ndarray
    cursor: int = field(default=0)

    def remaining(self) -> int:
        return len(self.indices) - self.cursor

    @property
    def samples_seen(self) -> int:
        return self.cursor

    def take(self, count: int) -> list[EmbeddingSample]:
        if count < 1:
            raise ValueError(f"count must be >= 1, got {count}")
        if self.remaining() < count:
            raise DataExhaustedError(
                f"device {self.device_id}: requested {count} samples, "
                f"only {self.remaining()} unseen remain"
            )
        out = [self.dataset.sample(int(i)) for i in self.indices[self.cursor : self.cursor + count]]
        self.cursor += count
        return out


def partition(dataset: EmbeddingDataset, num_devices: int, seed=None) -> list[DeviceStream]:
    """Split the train split into disjoint, exhaustive per-device streams.

    Seeded shuffle, then contiguous shards of equal size with the remainder
    going to the last device.
    """
    if num_devices < 1:
        raise ValueError(f"num_devices must be >= 1, got {num_devices}")
    train = dataset.train_indices()
    if len(train) == 0:
        raise ValueError("dataset has no training samples")
    if num_devices > len(train):
        raise ValueError(
            f"cannot split {len(train)} training samples across {num_devices} devices"
        )
    order = np.random.default_rng(seed).permutation(train)
    base = len(order) // num_devices
    streams = []
    for d in range(num_devices):
        start = d * base
        stop = start + base if d < num_devices - 1 else len(order)
        streams.append(DeviceStream(device_id=d, dataset=dataset, indices=order[start:stop]))
    return streams


def _class_centroids(dim: int, num_classes: int, margin: float, rng) -> np.ndarray:
    # Orthonormal directions scaled so every centroid pair sits exactly
    # `margin` apart: |a*q_i - a*q_j| = a*sqrt(2) with a = margin/sqrt(2).
    gauss = rng.standard_normal((dim, num_classes))
    q, _ = np.linalg.qr(gauss)
    return (q * (margin / np.sqrt(2.0))).T  # (C, dim)


def _assemble(name, features, labels, num_classes, val_fraction):
    n = features.shape[0]
    val_count = int(round(n * val_fraction))
    splits = np.full(n, SPLIT_TRAIN, dtype=np.uint8)
    if val_count:
        splits[n - val_count :] = SPLIT_VALIDATION
    return EmbeddingDataset(
        name=name,
        features=features.astype(np.float32),
        labels=labels,
        splits=splits,
        num_classes=num_classes,
    )


def synth_separable(
    embedding_dim: int,
    num_classes: int,
    n: int,
    margin: float,
    seed=None,
    *,
    val_fraction: float = 0.2,
    name: str | None = None,
) -> EmbeddingDataset:
    """Linearly separable clusters: class centroids `margin` apart, isotropic
    Gaussian noise with sigma = margin/6, balanced interleaved labels.

    The last round(n * val_fraction) samples are tagged validation.
    """
    if margin <= 0:
        raise ValueError(f"margin must be > 0, got {margin}")
    if num_classes < 2:
        raise ValueError(f"num_classes must be >= 2, got {num_classes}")
    if num_classes > embedding_dim:
        raise ValueError("centroid construction needs num_classes <= embedding_dim")
    if n < 0:
        raise ValueError(f"n must be >= 0, got {n}")
    if not 0 <= val_fraction < 1:
        raise ValueError(f"val_fraction must be in [0, 1), got {val_fraction}")
    rng = np.random.default_rng(seed)
    centroids = _class_centroids(embedding_dim, num_classes, margin, rng)
    labels = np.arange(n, dtype=np.int64) % num_classes
    sigma = margin / 6.0
    features = centroids[labels] + sigma * rng.standard_normal((n, embedding_dim))
    return _assemble(
        name or f"synthetic-separable-E{embedding_dim}-C{num_classes}",
        features,
        labels,
        num_classes,
        val_fraction,
    )


def synth_sparse(
    embedding_dim: int,
    active_dims: int,
    num_classes: int,
    n: int,
    seed=None,
    *,
    margin: float = 4.0,
    val_fraction: float = 0.2,
    name: str | None = None,
) -> EmbeddingDataset:
    """Sparse-extractor pathology: a fixed seeded subset of `active_dims`
    dimensions carries class signal; the other E-k dimensions are exactly
    zero in every sample.
    """
    if not 1 <= active_dims <= embedding_dim:
        raise ValueError(f"active_dims must be in [1, {embedding_dim}], got {active_dims}")
    if num_classes > active_dims:
        raise ValueError("centroid construction needs num_classes <= active_dims")
    if margin <= 0:
        raise ValueError(f"margin must be > 0, got {margin}")
    if n < 0:
        raise ValueError(f"n must be >= 0, got {n}")
    rng = np.random.default_rng(seed)
    dims = np.sort(rng.choice(embedding_dim, size=active_dims, replace=False))
    centroids = _class_centroids(active_dims, num_classes, margin, rng)
    labels = np.arange(n, dtype=np.int64) % num_classes
    sigma = margin / 6.0
    dense = centroids[labels] + sigma * rng.standard_normal((n, active_dims))
    features = np.zeros((n, embedding_dim), dtype=np.float64)
    features[:, dims] = dense
    return _assemble(
        name or f"synthetic-sparse-E{embedding_dim}-k{active_dims}-C{num_classes}",
        features,
        labels,
        num_classes,
        val_fraction,
    )
