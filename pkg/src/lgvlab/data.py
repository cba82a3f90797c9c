"""Deterministic toy datasets, IDX ingestion and correct-example filtering."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .model import Batch, InvalidArgument, predict

IDX_IMAGES_MAGIC = 0x0803
IDX_LABELS_MAGIC = 0x0801


class IdxFormatError(IOError):
    pass


class InsufficientExamples(ValueError):
    def __init__(self, available: int, requested: int):
        super().__init__(
            f"only {available} examples are classified correctly by every target, "
            f"{requested} requested")
        self.available = available
        self.requested = requested


@dataclass(frozen=True, eq=False)
class Dataset:
    train: Batch
    val: Batch
    test: Batch
    generator: str
    seed: int
    box: tuple[float, float] = (0.0, 1.0)

    @property
    def n_classes(self) -> int:
        return int(max(self.train.labels.max(), self.val.labels.max(), self.test.labels.max())) + 1

    @property
    def input_dim(self) -> int:
        return self.train.inputs.shape[1]


def _split_sizes(n_per_class) -> tuple[int, int, int]:
    if isinstance(n_per_class, int):
        sizes = (n_per_class, n_per_class, n_per_class)
    else:
        sizes = tuple(int(n) for n in n_per_class)
    if len(sizes) != 3 or any(n < 1 for n in sizes):
        raise InvalidArgument("n_per_class must be a positive int or (train, val, test) ints")
    return sizes


def _assemble(points: list[np.ndarray], sizes, rng, generator, seed, box) -> Dataset:
    """points[c] holds sum(sizes) rows for class c; slice them into splits in order."""
    splits = []
    start = 0
    for size in sizes:
        xs, ys = [], []
        for c, pts in enumerate(points):
            xs.append(pts[start:start + size])
            ys.append(np.full(size, c))
        x = np.concatenate(xs)
        y = np.concatenate(ys)
        order = rng.permutation(len(y))
        splits.append(Batch(x[order], y[order]))
        start += size
    return Dataset(splits[0], splits[1], splits[2], generator, seed, box)


def blob_centers(classes: int, dim: int, distance: float, rng) -> np.ndarray:
    """Centers with all pairwise distances equal to ``distance`` where dim allows."""
    if dim >= classes:
        q, _ = np.linalg.qr(rng.standard_normal((dim, classes)))
        return (distance / np.sqrt(2.0)) * q.T
    # fewer dimensions than classes: regular polygon in a random 2-plane
    q, _ = np.linalg.qr(rng.standard_normal((dim, 2)))
    angles = 2 * np.pi * np.arange(classes) / classes
    radius = distance / (2 * np.sin(np.pi / classes))
    return radius * (np.cos(angles)[:, None] * q[:, 0] + np.sin(angles)[:, None] * q[:, 1])


def make_blobs(classes: int, dim: int, n_per_class, spread: float, seed: int,
               box: tuple[float, float] = (0.0, 1.0)) -> Dataset:
    """Gaussian clusters rescaled isotropically into ``box``.

    Centers sit at pairwise distance max(1, 4*spread) so the clusters stay
    separable as spread shrinks. Points further than 4*spread from the center
    hull along an axis are clipped onto the box.
    """
    if classes < 2 or dim < 2 or not spread > 0:
        raise InvalidArgument("make_blobs needs classes >= 2, dim >= 2 and spread > 0")
    sizes = _split_sizes(n_per_class)
    rng = np.random.default_rng(seed)
    centers = blob_centers(classes, dim, max(1.0, 4.0 * spread), rng)
    total = sum(sizes)
    raw = [centers[c] + spread * rng.standard_normal((total, dim)) for c in range(classes)]
    lo = centers.min() - 4.0 * spread
    hi = centers.max() + 4.0 * spread
    b_lo, b_hi = box
    pts = [np.clip(b_lo + (r - lo) / (hi - lo) * (b_hi - b_lo), b_lo, b_hi) for r in raw]
    return _assemble(pts, sizes, rng, "blobs", seed, box)


def make_spirals(classes: int, n_per_class, noise: float, seed: int,
                 turns: float = 1.5) -> Dataset:
    if classes not in (2, 3):
        raise InvalidArgument("spirals support 2 or 3 classes")
    if noise < 0:
        raise InvalidArgument("noise must be >= 0")
    sizes = _split_sizes(n_per_class)
    rng = np.random.default_rng(seed)
    total = sum(sizes)
    pts = []
    for c in range(classes):
        t = rng.uniform(0.05, 1.0, size=total)
        theta = 2 * np.pi * (turns * t + c / classes)
        xy = 0.5 + 0.45 * t[:, None] * np.stack([np.cos(theta), np.sin(theta)], axis=1)
        xy = xy + noise * rng.standard_normal(xy.shape)
        pts.append(np.clip(xy, 0.0, 1.0))
    return _assemble(pts, sizes, rng, "spirals", seed, (0.0, 1.0))


def write_idx_images(path, images: np.ndarray) -> None:
    images = np.asarray(images, dtype=np.uint8)
    if images.ndim != 3:
        raise ValueError("images must be (n, rows, cols)")
    with open(path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, *images.shape))
        fh.write(images.tobytes())


def write_idx_labels(path, labels: np.ndarray) -> None:
    labels = np.asarray(labels, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS_MAGIC, len(labels)))
        fh.write(labels.tobytes())


def _read_idx(path, magic: int, ndims: int) -> np.ndarray:
    raw = Path(path).read_bytes()
    header = 4 + 4 * ndims
    if len(raw) < header:
        raise IdxFormatError(f"{path}: truncated header")
    found = struct.unpack(">I", raw[:4])[0]
    if found != magic:
        raise IdxFormatError(f"{path}: bad magic 0x{found:08x}, expected 0x{magic:08x}")
    dims = struct.unpack(">" + "I" * ndims, raw[4:header])
    count = int(np.prod(dims))
    if len(raw) - header < count:
        raise IdxFormatError(f"{path}: truncated data ({len(raw) - header} of {count} bytes)")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=header).reshape(dims)


def load_idx(images_path, labels_path) -> Batch:
    """Read an IDX image/label pair; pixels are scaled to [0, 1]."""
    images = _read_idx(images_path, IDX_IMAGES_MAGIC, 3)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC, 1)
    if images.shape[0] != labels.shape[0]:
        raise IdxFormatError(
            f"count mismatch: {images.shape[0]} images vs {labels.shape[0]} labels")
    x = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    return Batch(x, labels.astype(np.int64))


def idx_dataset(train_images, train_labels, test_images, test_labels,
                n_val: int, seed: int) -> Dataset:
    """Dataset from IDX files; the validation split is carved out of train."""
    train = load_idx(train_images, train_labels)
    test = load_idx(test_images, test_labels)
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(train))
    if not 0 < n_val < len(train):
        raise InvalidArgument("n_val must leave a non-empty training split")
    return Dataset(train.subset(order[n_val:]), train.subset(order[:n_val]), test,
                   "idx-file", seed)


def correct_mask(targets: Sequence[tuple], b: Batch) -> np.ndarray:
    mask = np.ones(len(b), dtype=bool)
    for spec, w in targets:
        mask &= predict(spec, w, b.inputs) == b.labels
    return mask


def select_correct(targets: Sequence[tuple], b: Batch, n: int, seed: int) -> Batch:
    """Random subset of ``n`` examples that every target classifies correctly."""
    idx = np.flatnonzero(correct_mask(targets, b))
    if n > len(idx):
        raise InsufficientExamples(len(idx), n)
    rng = np.random.default_rng(seed)
    chosen = np.sort(rng.choice(idx, size=n, replace=False))
    return b.subset(chosen)
