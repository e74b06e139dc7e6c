"""Datasets, IDX ingestion, Dirichlet client partitioning and label flipping."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, FormatError

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801


@dataclass(frozen=True)
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        if self.inputs.shape[0] != self.labels.shape[0]:
            raise ConfigurationError("label count differs from example count")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ConfigurationError("label outside [0, num_classes)")

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def input_dim(self) -> int:
        return self.inputs.shape[1]

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.inputs[idx], self.labels[idx], self.num_classes)

    def class_histogram(self, indices=None) -> np.ndarray:
        labels = self.labels if indices is None else self.labels[np.asarray(indices, dtype=np.int64)]
        return np.bincount(labels, minlength=self.num_classes)


@dataclass(frozen=True)
class Partition:
    client_id: int
    example_indices: np.ndarray

    def __len__(self) -> int:
        return self.example_indices.shape[0]


def _open(path):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


def _read_idx(path, magic: int, header_dims: int) -> tuple[tuple[int, ...], bytes]:
    with _open(path) as fh:
        raw = fh.read()
    head = 4 + 4 * header_dims
    if len(raw) < head:
        raise FormatError(f"{path}: truncated header")
    (found,) = struct.unpack(">I", raw[:4])
    if found != magic:
        raise FormatError(f"{path}: bad magic 0x{found:08x}, expected 0x{magic:08x}")
    dims = struct.unpack(">" + "I" * header_dims, raw[4:head])
    payload = raw[head:]
    expected = int(np.prod(dims))
    if len(payload) < expected:
        raise FormatError(f"{path}: truncated payload ({len(payload)} of {expected} bytes)")
    return dims, payload[:expected]


def load_idx(images_path, labels_path, num_classes: int | None = None) -> Dataset:
    """Load an IDX image/label pair (optionally gzipped), pixels scaled to [0, 1]."""
    (n_img, rows, cols), pix = _read_idx(images_path, IMAGES_MAGIC, 3)
    (n_lab,), lab = _read_idx(labels_path, LABELS_MAGIC, 1)
    if n_img != n_lab:
        raise FormatError(f"{n_img} images but {n_lab} labels")
    inputs = np.frombuffer(pix, dtype=np.uint8).reshape(n_img, rows * cols).astype(np.float64) / 255.0
    labels = np.frombuffer(lab, dtype=np.uint8).astype(np.int64)
    if num_classes is None:
        num_classes = max(10, int(labels.max()) + 1) if labels.size else 10
    return Dataset(inputs, labels, num_classes)


def write_idx(images_path, labels_path, images: np.ndarray, labels: np.ndarray) -> None:
    """Write uint8 images (n, rows, cols) and labels (n,) in IDX format."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, rows, cols = images.shape
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IMAGES_MAGIC, n, rows, cols))
        fh.write(images.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", LABELS_MAGIC, labels.shape[0]))
        fh.write(labels.tobytes())


def generate_synthetic(
    num_examples: int,
    input_dim: int,
    num_classes: int,
    seed: int,
    separation: float = 4.0,
    noise: float = 0.25,
) -> Dataset:
    """Gaussian class clusters around 0.5, clipped into [0, 1].

    Class means are random unit directions scaled so two means sit about
    ``separation`` noise-stds apart. Labels cycle through the classes before
    shuffling, so class counts are balanced to within one example.
    """
    if min(num_examples, input_dim, num_classes) < 1:
        raise ConfigurationError("num_examples, input_dim and num_classes must all be >= 1")
    rng = np.random.default_rng(seed)
    dirs = rng.normal(size=(num_classes, input_dim))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    means = 0.5 + dirs * (separation * noise / np.sqrt(2.0))
    labels = rng.permutation(np.arange(num_examples) % num_classes)
    x = means[labels] + rng.normal(0.0, noise, size=(num_examples, input_dim))
    return Dataset(np.clip(x, 0.0, 1.0), labels.astype(np.int64), num_classes)


def dirichlet_partition(dataset: Dataset, n_clients: int, alpha: float, seed: int) -> list[Partition]:
    """Split examples across clients with per-class Dirichlet(alpha) proportions.

    Clients left empty get one example taken from the currently largest
    client, so every client ends up with data.
    """
    if alpha <= 0:
        raise ConfigurationError(f"Dirichlet alpha must be > 0, got {alpha}")
    if n_clients < 1:
        raise ConfigurationError("n_clients must be >= 1")
    if len(dataset) == 0:
        raise ConfigurationError("cannot partition an empty dataset")
    if n_clients > len(dataset):
        raise ConfigurationError(f"{n_clients} clients but only {len(dataset)} examples")
    rng = np.random.default_rng(seed)
    buckets: list[list[int]] = [[] for _ in range(n_clients)]
    for c in range(dataset.num_classes):
        idx = np.flatnonzero(dataset.labels == c)
        if idx.size == 0:
            continue
        idx = rng.permutation(idx)
        props = rng.dirichlet(np.full(n_clients, float(alpha)))
        cuts = (np.cumsum(props)[:-1] * idx.size).astype(np.int64)
        for k, part in enumerate(np.split(idx, cuts)):
            buckets[k].extend(part.tolist())
    for k in range(n_clients):
        if not buckets[k]:
            donor = max(range(n_clients), key=lambda j: (len(buckets[j]), -j))
            buckets[k].append(buckets[donor].pop())
    return [Partition(k, np.array(sorted(b), dtype=np.int64)) for k, b in enumerate(buckets)]


def flip_labels(dataset: Dataset, partition: Partition) -> np.ndarray:
    """Labels of the partition's examples mapped y -> C-1-y."""
    if dataset.num_classes < 2:
        raise ConfigurationError("label flipping needs at least two classes")
    return dataset.num_classes - 1 - dataset.labels[partition.example_indices]
