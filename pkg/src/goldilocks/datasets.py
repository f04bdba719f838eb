"""MNIST IDX ingestion, synthetic blobs, splits, batches and a binary cache."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .autodiff import Batch
from .errors import ConsistencyError, FormatError, InputError, TruncatedFileError

IMAGES_MAGIC = 2051
LABELS_MAGIC = 2049
CACHE_MAGIC = b"GLDZ"
CACHE_VERSION = 1
PROVENANCES = ("mnist_idx", "synthetic_blobs")


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray = field(repr=False)
    labels: np.ndarray = field(repr=False)
    train_idx: np.ndarray = field(repr=False)
    eval_idx: np.ndarray = field(repr=False)
    provenance: str
    n_classes: int = 10

    def __post_init__(self):
        if self.images.shape[0] != self.labels.shape[0]:
            raise ConsistencyError("images and labels disagree in length")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise FormatError(f"labels outside [0, {self.n_classes})")
        if np.intersect1d(self.train_idx, self.eval_idx).size:
            raise ConsistencyError("train and eval splits overlap")
        if self.provenance not in PROVENANCES:
            raise InputError(f"unknown provenance {self.provenance!r}")

    @property
    def input_dim(self) -> int:
        return self.images.shape[1]

    def __len__(self):
        return self.labels.shape[0]

    def batch(self, idx) -> Batch:
        return Batch(self.images[idx], self.labels[idx])

    def train_batch(self, n: int | None = None) -> Batch:
        return self.batch(self.train_idx[:n])

    def eval_batch(self, n: int | None = None) -> Batch:
        return self.batch(self.eval_idx[:n])

    def split(self, n_train: int, n_eval: int, seed: int = 0) -> "Dataset":
        """Fresh disjoint random train/eval split over all samples."""
        if n_train + n_eval > len(self):
            raise InputError(f"split {n_train}+{n_eval} exceeds {len(self)} samples")
        perm = np.random.default_rng(seed).permutation(len(self))
        return replace(self, train_idx=perm[:n_train], eval_idx=perm[n_train:n_train + n_eval])

    def with_shuffled_labels(self, seed: int = 0) -> "Dataset":
        labels = np.random.default_rng(seed).permutation(self.labels)
        return replace(self, labels=labels)


def batch_iterator(indices, batch_size: int, seed: int):
    """Endless stream of index batches; reshuffled every pass over ``indices``."""
    indices = np.asarray(indices)
    if batch_size < 1 or indices.size == 0:
        raise InputError("need a positive batch size and a nonempty index set")
    rng = np.random.default_rng(seed)
    while True:
        perm = indices[rng.permutation(indices.size)]
        for start in range(0, perm.size - batch_size + 1, batch_size):
            yield perm[start:start + batch_size]
        if perm.size < batch_size:
            yield perm


# ---------------------------------------------------------------------------
# IDX


def _read_bytes(path) -> bytes:
    path = Path(path)
    with (gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")) as fh:
        return fh.read()


def _parse_idx(raw: bytes, expected_magic: int, ndim: int, what: str) -> np.ndarray:
    if len(raw) < 4:
        raise TruncatedFileError(f"{what} file too short for the magic number", len(raw))
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise FormatError(f"{what} file has magic {magic} (0x{magic:08x}), expected {expected_magic}")
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise TruncatedFileError(f"{what} header truncated", len(raw))
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    size = int(np.prod(dims))
    if len(raw) < header + size:
        raise TruncatedFileError(f"{what} payload truncated, expected {size} bytes", len(raw))
    return np.frombuffer(raw, dtype=np.uint8, count=size, offset=header).reshape(dims)


def load_mnist_idx(images_path, labels_path) -> Dataset:
    """Parse an IDX image/label pair; every sample goes to the train split."""
    images = _parse_idx(_read_bytes(images_path), IMAGES_MAGIC, 3, "images")
    labels = _parse_idx(_read_bytes(labels_path), LABELS_MAGIC, 1, "labels")
    if images.shape[0] != labels.shape[0]:
        raise ConsistencyError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    flat = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    n = images.shape[0]
    return Dataset(flat, labels.astype(np.int64), np.arange(n), np.arange(0), "mnist_idx",
                   int(max(labels.max(initial=0) + 1, 10)))


def write_idx(path, array) -> None:
    """Write a uint8 array in IDX format (images need 3 dims, labels 1)."""
    array = np.ascontiguousarray(array, dtype=np.uint8)
    magic = {3: IMAGES_MAGIC, 1: LABELS_MAGIC}.get(array.ndim)
    if magic is None:
        raise InputError("IDX writer supports 1-d labels and 3-d images")
    with open(path, "wb") as fh:
        fh.write(struct.pack(f">I{array.ndim}I", magic, *array.shape))
        fh.write(array.tobytes())


BUNDLED_IMAGES = "mnist5k-images-idx3-ubyte"
BUNDLED_LABELS = "mnist5k-labels-idx1-ubyte"


def export_bundled_mnist(dest_dir) -> tuple[Path, Path]:
    """Write the 5000-image MNIST sample shipped with ``mlxtend`` as IDX files.

    Files are only written if missing.
    """
    dest = Path(dest_dir)
    images_path, labels_path = dest / BUNDLED_IMAGES, dest / BUNDLED_LABELS
    if images_path.exists() and labels_path.exists():
        return images_path, labels_path
    from mlxtend.data import mnist_data

    X, y = mnist_data()
    dest.mkdir(parents=True, exist_ok=True)
    write_idx(images_path, np.rint(X).reshape(-1, 28, 28))
    write_idx(labels_path, y)
    return images_path, labels_path


def default_data_dir() -> Path:
    return Path.home() / ".cache" / "goldilocks"


def load_mnist_subset(n_train: int = 4000, n_eval: int = 1000, seed: int = 0,
                      data_dir=None, images_path=None, labels_path=None) -> Dataset:
    """MNIST split; falls back to the bundled 5000-sample subset when no paths are given."""
    if images_path is None or labels_path is None:
        images_path, labels_path = export_bundled_mnist(data_dir or default_data_dir())
    return load_mnist_idx(images_path, labels_path).split(n_train, n_eval, seed)


# ---------------------------------------------------------------------------
# synthetic


def synthetic_blobs(n_classes: int = 10, input_dim: int = 784, n_per_class: int = 100,
                    spread: float = 0.3, seed: int = 0, eval_fraction: float = 0.2) -> Dataset:
    """Balanced Gaussian clusters around random unit-norm centres."""
    if n_classes < 2:
        raise InputError("need at least two classes")
    if not spread > 0:
        raise InputError(f"spread must be positive, got {spread}")
    rng = np.random.default_rng(seed)
    centers = rng.standard_normal((n_classes, input_dim))
    centers /= np.linalg.norm(centers, axis=1, keepdims=True)
    labels = np.repeat(np.arange(n_classes), n_per_class)
    images = centers[labels] + spread * rng.standard_normal((labels.size, input_dim))
    perm = rng.permutation(labels.size)
    n_eval = int(round(eval_fraction * labels.size))
    return Dataset(images, labels, np.sort(perm[n_eval:]), np.sort(perm[:n_eval]),
                   "synthetic_blobs", n_classes)


# ---------------------------------------------------------------------------
# cache


def save_cache(dataset: Dataset, path) -> None:
    """Versioned little-endian binary layout headed by ``b"GLDZ"``."""
    header = CACHE_MAGIC + struct.pack(
        "<7I", CACHE_VERSION, PROVENANCES.index(dataset.provenance), len(dataset),
        dataset.input_dim, dataset.n_classes, dataset.train_idx.size, dataset.eval_idx.size,
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(dataset.images, dtype="<f8").tobytes())
        for arr in (dataset.labels, dataset.train_idx, dataset.eval_idx):
            fh.write(np.ascontiguousarray(arr, dtype="<i8").tobytes())


def load_cache(path) -> Dataset:
    raw = Path(path).read_bytes()
    if len(raw) < 32:
        raise TruncatedFileError("cache header truncated", len(raw))
    if raw[:4] != CACHE_MAGIC:
        raise FormatError(f"cache magic {raw[:4]!r}, expected {CACHE_MAGIC!r}")
    version, prov, n, dim, n_classes, n_train, n_eval = struct.unpack("<7I", raw[4:32])
    if version != CACHE_VERSION:
        raise FormatError(f"unsupported cache version {version}")
    offset = 32
    need = offset + 8 * (n * dim + n + n_train + n_eval)
    if len(raw) < need:
        raise TruncatedFileError("cache payload truncated", len(raw))
    images = np.frombuffer(raw, "<f8", n * dim, offset).reshape(n, dim).astype(np.float64)
    offset += 8 * n * dim
    parts = []
    for count in (n, n_train, n_eval):
        parts.append(np.frombuffer(raw, "<i8", count, offset).astype(np.int64))
        offset += 8 * count
    return Dataset(images, parts[0], parts[1], parts[2], PROVENANCES[prov], n_classes)
