"""Datasets: IDX files, synthetic image tasks, splits and batches."""

import struct
from dataclasses import dataclass

import numpy as np

from thinner import seeding
from thinner.errors import DataFormatError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass(eq=False)
class Dataset:
    images: np.ndarray  # (n, c, h, w) in [0, 1]
    labels: np.ndarray  # (n,) int64
    classes: int

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=np.float64)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise DataFormatError(f"images must be (n, c, h, w), got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise DataFormatError(
                f"{len(self.images)} images but {len(self.labels)} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.classes):
            raise DataFormatError(f"labels outside [0, {self.classes})")
        if self.images.size and (self.images.min() < 0 or self.images.max() > 1):
            raise DataFormatError("pixel values must lie in [0, 1]")

    def __len__(self):
        return len(self.labels)

    def subset(self, idx):
        return Dataset(self.images[idx], self.labels[idx], self.classes)


# ---------------------------------------------------------------------------
# IDX
# ---------------------------------------------------------------------------

def _read_idx(path, magic):
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 8:
        raise DataFormatError(f"{path}: truncated IDX header")
    (found,) = struct.unpack(">I", blob[:4])
    if found != magic:
        raise DataFormatError(f"{path}: bad magic 0x{found:08x}, expected 0x{magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(blob) < header:
        raise DataFormatError(f"{path}: truncated IDX header")
    dims = struct.unpack(f">{ndim}I", blob[4:header])
    count = int(np.prod(dims))
    if len(blob) - header < count:
        raise DataFormatError(
            f"{path}: truncated, expected {count} data bytes, found {len(blob) - header}")
    return np.frombuffer(blob, dtype=np.uint8, count=count, offset=header).reshape(dims)


def load_idx_images(images_path, labels_path, classes=None):
    """Read an IDX image/label pair as a single-channel :class:`Dataset`.

    Pixels are scaled by 1/255. ``classes`` defaults to ``max(label) + 1``.
    """
    pixels = _read_idx(images_path, IDX_IMAGES_MAGIC)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC).astype(np.int64)
    if len(pixels) != len(labels):
        raise DataFormatError(
            f"count mismatch: {len(pixels)} images vs {len(labels)} labels")
    if classes is None:
        classes = int(labels.max()) + 1 if labels.size else 1
    images = pixels[:, None, :, :].astype(np.float64) / 255.0
    return Dataset(images, labels, classes)


def write_idx(dataset, images_path, labels_path):
    """Write a single-channel dataset as IDX (pixels rounded to bytes)."""
    n, c, h, w = dataset.images.shape
    if c != 1:
        raise DataFormatError(f"IDX holds single-channel images, got {c} channels")
    pixels = np.rint(dataset.images[:, 0] * 255.0).astype(np.uint8)
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, h, w))
        f.write(pixels.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABELS_MAGIC, n))
        f.write(dataset.labels.astype(np.uint8).tobytes())


# ---------------------------------------------------------------------------
# Synthetic tasks
# ---------------------------------------------------------------------------

def _balanced_labels(n, classes, rng):
    labels = np.arange(n) % classes
    return labels[rng.permutation(n)]


def _blobs(n, seed, classes=10, channels=1, size=12, noise=0.25, task_seed=0):
    # Class prototypes depend only on task_seed so datasets drawn with
    # different seeds share one task.
    proto_rng = np.random.default_rng(np.random.SeedSequence(task_seed, spawn_key=(99,)))
    protos = proto_rng.uniform(0.0, 1.0, (classes, channels, size, size))
    rng = seeding.stream(seed, seeding.DATA)
    labels = _balanced_labels(n, classes, rng)
    images = protos[labels] + rng.normal(0.0, noise, (n, channels, size, size))
    return np.clip(images, 0.0, 1.0), labels, classes


def _bars(n, seed, size=12, noise=0.15, max_bars=3):
    """Class 0: horizontal bars; class 1: vertical bars."""
    rng = seeding.stream(seed, seeding.DATA)
    labels = _balanced_labels(n, 2, rng)
    images = np.zeros((n, 1, size, size))
    for k in range(n):
        count = rng.integers(1, max_bars + 1)
        rows = rng.choice(size, size=count, replace=False)
        level = rng.uniform(0.6, 1.0, count)
        if labels[k] == 0:
            images[k, 0, rows, :] = level[:, None]
        else:
            images[k, 0, :, rows] = level[:, None]
    images += rng.normal(0.0, noise, images.shape)
    return np.clip(images, 0.0, 1.0), labels, 2


TASKS = {"blobs": _blobs, "bars": _bars}


def generate_synthetic(task, n, seed=0):
    """Deterministic synthetic dataset.

    ``task`` is a task name or a dict ``{"name": ..., **options}``. ``blobs``
    draws noisy copies of per-class random prototypes (options ``classes``,
    ``channels``, ``size``, ``noise``, ``task_seed``); ``bars`` separates
    horizontal from vertical stripes (``size``, ``noise``, ``max_bars``).
    Classes are balanced within one sample.
    """
    if isinstance(task, str):
        task = {"name": task}
    options = dict(task)
    name = options.pop("name", None)
    if name not in TASKS:
        raise DataFormatError(f"unknown synthetic task {name!r}; known: {sorted(TASKS)}")
    images, labels, classes = TASKS[name](n, seed, **options)
    if n < classes:
        raise DataFormatError(f"need at least {classes} samples for {name}, got {n}")
    return Dataset(images, labels, classes)


# ---------------------------------------------------------------------------
# Splits and batches
# ---------------------------------------------------------------------------

def split(dataset, fraction, seed=0):
    """Seeded shuffle, then the first ``floor(n * fraction)`` samples versus the rest."""
    if not 0 < fraction < 1:
        raise ValueError(f"fraction must be in (0, 1), got {fraction}")
    n = len(dataset)
    cut = int(n * fraction)
    if cut == 0 or cut == n:
        raise ValueError(f"split of {n} samples at {fraction} leaves one side empty")
    order = seeding.stream(seed, seeding.SPLIT).permutation(n)
    return dataset.subset(order[:cut]), dataset.subset(order[cut:])


def batch_indices(n, batch_size, seed=0, epoch=0):
    order = seeding.stream(seed, seeding.SHUFFLE, epoch).permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def batches(dataset, batch_size, seed=0, epoch=0):
    """Yield ``(images, labels)`` minibatches covering every sample once."""
    if batch_size < 1:
        raise ValueError(f"batch_size must be positive, got {batch_size}")
    for idx in batch_indices(len(dataset), batch_size, seed, epoch):
        yield dataset.images[idx], dataset.labels[idx]
