"""Datasets, augmentation, normalization and epoch partitioning.

Images are float64 arrays of shape (N, C, H, W) with values in [0, 1] as
loaded. Loaders understand the IDX format (MNIST-family, optionally gzipped)
and the CIFAR-10 binary batch format; ``synth_blobs`` builds small Gaussian
cluster problems for fast runs.
"""

from __future__ import annotations

import gzip
import math
import os
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import _kernels
from .errors import ConfigError, DataError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD = 3073
DATA_ENV = "POPGRAD_DATA"


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    class_count: int
    split: str = "train"

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise DataError("images and labels differ in count")
        if len(self.labels) < 1:
            raise DataError("empty dataset")
        if self.labels.max() >= self.class_count or self.labels.min() < 0:
            raise DataError("label outside 0..class_count-1")

    def __len__(self):
        return len(self.labels)

    @property
    def shape(self):
        return self.images.shape[1:]

    def subset(self, idx):
        return Dataset(self.images[idx], self.labels[idx], self.class_count, self.split)


def _read(path):
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing data file: {path}")
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        return fh.read()


def load_idx(images_path, labels_path, split="train", class_count=10):
    """Read an IDX image/label pair; pixels are scaled by 1/255."""
    raw = _read(images_path)
    if len(raw) < 16:
        raise DataError(f"{images_path}: truncated header")
    magic, n, rows, cols = struct.unpack(">IIII", raw[:16])
    if magic != IDX_IMAGES_MAGIC:
        raise DataError(f"{images_path}: bad magic {magic:#010x}")
    if len(raw) - 16 < n * rows * cols:
        raise DataError(f"{images_path}: truncated payload")
    images = np.frombuffer(raw, dtype=np.uint8, count=n * rows * cols, offset=16)
    images = images.reshape(n, 1, rows, cols).astype(np.float64) / 255.0

    raw = _read(labels_path)
    if len(raw) < 8:
        raise DataError(f"{labels_path}: truncated header")
    magic, n_labels = struct.unpack(">II", raw[:8])
    if magic != IDX_LABELS_MAGIC:
        raise DataError(f"{labels_path}: bad magic {magic:#010x}")
    if n_labels != n:
        raise DataError(f"count mismatch: {n} images but {n_labels} labels")
    if len(raw) - 8 < n:
        raise DataError(f"{labels_path}: truncated payload")
    labels = np.frombuffer(raw, dtype=np.uint8, count=n, offset=8).astype(np.int64)
    return Dataset(images, labels, class_count, split)


def load_cifar_bin(paths, split="train"):
    """Read CIFAR-10 binary batches (label byte + 3x1024 channel-planar pixels)."""
    if isinstance(paths, (str, os.PathLike)):
        paths = [paths]
    images, labels = [], []
    for path in paths:
        raw = _read(path)
        if len(raw) == 0 or len(raw) % CIFAR_RECORD:
            raise DataError(f"{path}: length {len(raw)} is not a multiple of {CIFAR_RECORD}")
        rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
        if rec[:, 0].max() >= 10:
            raise DataError(f"{path}: label byte >= 10")
        labels.append(rec[:, 0].astype(np.int64))
        images.append(rec[:, 1:].reshape(-1, 3, 32, 32).astype(np.float64) / 255.0)
    return Dataset(np.concatenate(images), np.concatenate(labels), 10, split)


def synth_blobs(classes, per_class, dim, spread, seed, split="train"):
    """Gaussian clusters around seeded centers, clipped into [0, 1].

    Centers are drawn uniformly in [0.25, 0.75]^dim; the same ``seed`` always
    gives the same centers, so train and test splits drawn with different
    ``split`` tags share them. Images are (1, k, k) when ``dim == k*k``, so
    they can be shifted and fed to the conv net; otherwise (1, 1, dim).
    """
    if classes < 2:
        raise ConfigError("synth_blobs needs at least 2 classes")
    centers = np.random.default_rng([seed, 0]).uniform(0.25, 0.75, size=(classes, dim))
    noise_rng = np.random.default_rng([seed, 1 if split == "train" else 2])
    labels = np.repeat(np.arange(classes), per_class)
    points = centers[labels] + spread * noise_rng.standard_normal((len(labels), dim))
    points = np.clip(points, 0.0, 1.0)
    side = math.isqrt(dim)
    shape = (1, side, side) if side * side == dim else (1, 1, dim)
    return Dataset(points.reshape((-1,) + shape), labels.astype(np.int64), classes, split)


def _first_existing(root, names):
    for name in names:
        for sub in ("", "fashion_mnist", "fashion-mnist", "FashionMNIST/raw"):
            p = Path(root) / sub / name
            if p.exists():
                return p
            if (p.parent / (p.name + ".gz")).exists():
                return p.parent / (p.name + ".gz")
    return None


def data_root(explicit=None):
    root = explicit or os.environ.get(DATA_ENV)
    if not root:
        raise DataError(f"no data directory given (use --data or set {DATA_ENV})")
    if not Path(root).is_dir():
        raise DataError(f"data directory {root} does not exist")
    return Path(root)


def load_fashion_mnist(root, split="train"):
    prefix = "train" if split == "train" else "t10k"
    img = _first_existing(root, [f"{prefix}-images-idx3-ubyte"])
    lab = _first_existing(root, [f"{prefix}-labels-idx1-ubyte"])
    if img is None or lab is None:
        raise DataError(f"fashion-MNIST {split} files not found under {root}")
    return load_idx(img, lab, split=split)


def load_cifar10(root, split="train"):
    base = Path(root)
    for sub in ("", "cifar-10-batches-bin", "cifar10"):
        d = base / sub
        names = [f"data_batch_{i}.bin" for i in range(1, 6)] if split == "train" else ["test_batch.bin"]
        paths = [d / n for n in names]
        if all(p.exists() for p in paths):
            return load_cifar_bin(paths, split=split)
    raise DataError(f"CIFAR-10 {split} batches not found under {root}")


def seeded_subset(dataset, n, seed):
    """First ``n`` samples of a seeded permutation (the whole set if ``n`` is None)."""
    if n is None or n >= len(dataset):
        return dataset
    idx = np.random.default_rng(seed).permutation(len(dataset))[:n]
    return dataset.subset(np.sort(idx))


# ---------------------------------------------------------------------------
# augmentation


@dataclass(frozen=True)
class AugmentConfig:
    pads_length: int = 0
    pads_type: str = "zeros"
    hflip: bool = False
    norm_mean: float | None = None
    norm_sd: float | None = None

    def __post_init__(self):
        if self.pads_type not in _kernels.PAD_MODES:
            raise ConfigError(f"pads_type must be one of {sorted(_kernels.PAD_MODES)}")
        if int(self.pads_length) != self.pads_length or self.pads_length < 0:
            raise ConfigError("pads_length must be a non-negative integer")
        if self.norm_sd is not None and not self.norm_sd > 0:
            raise ConfigError("norm_sd must be > 0")

    def check_image_shape(self, shape):
        h, w = shape[-2:]
        if self.pads_length > min(h, w) - 1:
            raise ConfigError(f"pads_length {self.pads_length} too large for {h}x{w} images")

    @property
    def is_identity(self):
        return self.pads_length == 0 and not self.hflip

    def to_dict(self):
        return asdict(self)


def shift(images, dx, dy, pads_type):
    """Shift a (C,H,W) image or (N,C,H,W) batch by integer offsets.

    ``out[r, c] = in[r - dy, c - dx]``; out-of-range reads are filled per
    ``pads_type``: ``zeros`` gives 0, ``border`` clamps the index and
    ``reflection`` mirrors about the edge without repeating it (-1 -> 1).
    """
    single = images.ndim == 3
    batch = images[None] if single else images
    n = len(batch)
    dx = np.broadcast_to(np.asarray(dx, dtype=np.int64), (n,))
    dy = np.broadcast_to(np.asarray(dy, dtype=np.int64), (n,))
    out = _kernels.shift_pad(np.asarray(batch, dtype=np.float64), dx, dy,
                             _kernels.PAD_MODES[pads_type])
    return out[0] if single else out


def hflip(images):
    return np.ascontiguousarray(images[..., ::-1])


def augment_batch(images, cfg, rng):
    """Random shift then (optionally) a 50% horizontal flip, per image.

    Draw order: all dx, then all dy, then all flip coins.
    """
    if cfg.is_identity:
        return images
    n = len(images)
    L = cfg.pads_length
    out = images
    if L > 0:
        dx = rng.integers(-L, L + 1, size=n)
        dy = rng.integers(-L, L + 1, size=n)
        out = shift(images, dx, dy, cfg.pads_type)
    if cfg.hflip:
        flip = rng.random(n) < 0.5
        if flip.any():
            out = out.copy() if out is images else out
            out[flip] = out[flip][..., ::-1]
    return out


def augment(image, cfg, rng):
    """Single-image form of :func:`augment_batch`."""
    return augment_batch(np.asarray(image)[None], cfg, rng)[0]


# ---------------------------------------------------------------------------
# normalization


def channel_stats(images):
    """Per-channel mean and population SD over (N, H, W)."""
    return images.mean(axis=(0, 2, 3)), images.std(axis=(0, 2, 3))


def normalize(images, norm_mean=None, norm_sd=None, stats=None):
    """Re-center and/or re-scale each channel; returns ``(images', stats)``.

    ``stats`` are the training-set ``(mu, sigma)``; they are computed from
    ``images`` when omitted, which is what the training split should do.
    """
    if stats is None:
        stats = channel_stats(images)
    if norm_mean is None and norm_sd is None:
        return images, stats
    mu, sigma = stats
    mu_b = mu[None, :, None, None]
    if norm_sd is not None:
        if not norm_sd > 0:
            raise ConfigError("norm_sd must be > 0")
        if np.any(sigma == 0):
            raise DataError("degenerate channel: zero standard deviation")
        target = mu_b if norm_mean is None else norm_mean
        out = (images - mu_b) / sigma[None, :, None, None] * norm_sd + target
    else:
        out = images - mu_b + norm_mean
    return out, stats


# ---------------------------------------------------------------------------


def minibatches(dataset, batch_size, epoch_seed):
    """Seeded shuffle of ``range(N)`` cut into consecutive batches.

    ``dataset`` may be a Dataset or a sample count. The last batch keeps
    whatever is left over.
    """
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    n = dataset if isinstance(dataset, (int, np.integer)) else len(dataset)
    order = np.random.default_rng(epoch_seed).permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]
