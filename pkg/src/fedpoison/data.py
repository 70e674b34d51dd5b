"""Dataset ingestion (IDX files), synthetic fixtures, client partitioning,
and the non-GAN poisoning transforms.

All features live in [0, 1]; every transform clips back into that range and
preserves dataset size and class count. Randomized operations are pure
functions of (inputs, seed).
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    """Malformed IDX payload."""


@dataclass(frozen=True)
class Dataset:
    """Labeled feature vectors: features (n, d) in [0,1], integer labels < L."""

    features: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        f = np.ascontiguousarray(self.features, dtype=np.float64)
        y = np.ascontiguousarray(self.labels, dtype=np.int64)
        if f.ndim != 2:
            raise ValueError("features must be 2-D")
        if y.ndim != 1 or y.shape[0] != f.shape[0]:
            raise ValueError("labels must be 1-D and match feature rows")
        if not np.all(np.isfinite(f)):
            raise ValueError("features contain non-finite values")
        if f.size and (f.min() < 0.0 or f.max() > 1.0):
            raise ValueError("features must lie in [0, 1]")
        if self.num_classes <= 0:
            raise ValueError("num_classes must be positive")
        if y.size and (y.min() < 0 or y.max() >= self.num_classes):
            raise ValueError("labels out of range")
        f.flags.writeable = False
        y.flags.writeable = False
        object.__setattr__(self, "features", f)
        object.__setattr__(self, "labels", y)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    def __len__(self) -> int:
        return self.n

    def subset(self, idx) -> "Dataset":
        return Dataset(self.features[idx], self.labels[idx], self.num_classes)


@dataclass(frozen=True)
class PartitionPlan:
    """IID shuffle split or Dirichlet(beta) class-skewed split over N clients."""

    client_count: int
    mode: str = "iid"
    beta: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("iid", "dirichlet"):
            raise ValueError(f"unknown partition mode {self.mode!r}")
        if self.client_count < 1:
            raise ValueError("client_count must be >= 1")
        if self.mode == "dirichlet" and self.beta <= 0:
            raise ValueError("beta must be positive")


def _read_idx(path, expected_magic: int, what: str) -> tuple[np.ndarray, tuple]:
    blob = Path(path).read_bytes()
    if len(blob) < 4:
        raise IdxFormatError(f"{what}: missing magic number")
    (magic,) = struct.unpack_from(">i", blob, 0)
    if magic != expected_magic:
        raise IdxFormatError(f"{what}: bad magic number 0x{magic:08x}")
    ndim = magic & 0xFF
    header_len = 4 + 4 * ndim
    if len(blob) < header_len:
        raise IdxFormatError(f"{what}: truncated dimension header")
    dims = struct.unpack_from(f">{ndim}i", blob, 4)
    count = int(np.prod(dims))
    payload = np.frombuffer(blob, dtype=np.uint8, offset=header_len)
    if payload.size != count:
        raise IdxFormatError(
            f"{what}: payload has {payload.size} bytes, header promises {count}")
    return payload, dims


def load_idx(images_path, labels_path, num_classes: Optional[int] = None) -> Dataset:
    """Load an IDX image/label file pair; pixels are scaled to [0,1] by /255."""
    pixels, img_dims = _read_idx(images_path, IDX_IMAGES_MAGIC, "images")
    labels, lab_dims = _read_idx(labels_path, IDX_LABELS_MAGIC, "labels")
    n = img_dims[0]
    if lab_dims[0] != n:
        raise IdxFormatError(
            f"count mismatch: {n} images vs {lab_dims[0]} labels")
    d = int(np.prod(img_dims[1:])) if len(img_dims) > 1 else 1
    features = pixels.reshape(n, d).astype(np.float64) / 255.0
    y = labels.astype(np.int64)
    if num_classes is None:
        num_classes = int(y.max()) + 1 if y.size else 1
    return Dataset(features, y, num_classes)


def save_idx(ds: Dataset, images_path, labels_path) -> None:
    """Write the dataset as an IDX pair (pixels rounded back to 0..255).

    Square feature dims are written as (n, r, r) images, others as (n, 1, d).
    """
    r = int(round(np.sqrt(ds.feature_dim)))
    if r * r == ds.feature_dim:
        dims = (ds.n, r, r)
    else:
        dims = (ds.n, 1, ds.feature_dim)
    pixels = np.clip(np.rint(ds.features * 255.0), 0, 255).astype(np.uint8)
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">i", IDX_IMAGES_MAGIC))
        fh.write(struct.pack(f">{len(dims)}i", *dims))
        fh.write(pixels.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">i", IDX_LABELS_MAGIC))
        fh.write(struct.pack(">i", ds.n))
        fh.write(ds.labels.astype(np.uint8).tobytes())


def _class_pattern(c: int, dim: int) -> np.ndarray:
    """Fixed unit direction for class c, independent of the dataset seed."""
    v = np.random.default_rng(c).standard_normal(dim)
    return v / np.linalg.norm(v)


def gen_synthetic(num_classes: int, dim: int, count: int, separation: float,
                  seed: int, noise: float = 0.08) -> Dataset:
    """Gaussian blobs, one per class, centered at 0.5 + separation * pattern(c).

    Labels are assigned round-robin then shuffled, so count == num_classes
    yields exactly one sample per class.
    """
    if count < num_classes:
        raise ValueError("count must be >= num_classes")
    if separation <= 0:
        raise ValueError("separation must be positive")
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(count) % num_classes)
    centers = np.stack([0.5 + separation * _class_pattern(c, dim)
                        for c in range(num_classes)])
    features = centers[labels] + noise * rng.standard_normal((count, dim))
    return Dataset(np.clip(features, 0.0, 1.0), labels, num_classes)


def partition(ds: Dataset, plan: PartitionPlan) -> list[Dataset]:
    """Split into disjoint per-client shards covering the dataset."""
    if ds.n < plan.client_count:
        raise ValueError("fewer samples than clients")
    rng = np.random.default_rng(plan.seed)
    if plan.mode == "iid":
        perm = rng.permutation(ds.n)
        return [ds.subset(np.sort(part)) for part in np.array_split(perm, plan.client_count)]
    return _partition_dirichlet(ds, plan, rng)


def _partition_dirichlet(ds: Dataset, plan: PartitionPlan,
                         rng: np.random.Generator) -> list[Dataset]:
    n_clients = plan.client_count
    for _ in range(100):
        # per-client class proportions; each class's samples are split among
        # clients proportionally to its column, with largest-remainder rounding
        props = rng.dirichlet(np.full(ds.num_classes, plan.beta), size=n_clients)
        assignment = [[] for _ in range(n_clients)]
        for c in range(ds.num_classes):
            idx = np.flatnonzero(ds.labels == c)
            if idx.size == 0:
                continue
            idx = rng.permutation(idx)
            shares = props[:, c] / props[:, c].sum()
            counts = np.floor(shares * idx.size).astype(int)
            remainder = idx.size - counts.sum()
            if remainder > 0:
                frac = shares * idx.size - counts
                counts[np.argsort(-frac)[:remainder]] += 1
            pos = 0
            for i in range(n_clients):
                assignment[i].extend(idx[pos:pos + counts[i]])
                pos += counts[i]
        if all(len(a) > 0 for a in assignment):
            return [ds.subset(np.sort(np.asarray(a))) for a in assignment]
    raise ValueError("dirichlet partition left a client empty after 100 attempts")


def flip_labels(ds: Dataset, source: int, target: int) -> Dataset:
    """Relabel every source-class sample as the target class."""
    if source == target:
        raise ValueError("source and target must differ")
    if not (0 <= source < ds.num_classes and 0 <= target < ds.num_classes):
        raise ValueError("source/target outside class range")
    labels = ds.labels.copy()
    labels[labels == source] = target
    return Dataset(ds.features, labels, ds.num_classes)


def add_gaussian_noise(ds: Dataset, mean: float, variance: float, seed: int) -> Dataset:
    """feature' = clip(feature + N(mean, variance), 0, 1)."""
    if variance < 0:
        raise ValueError("variance must be >= 0")
    rng = np.random.default_rng(seed)
    noisy = ds.features + rng.normal(mean, np.sqrt(variance), size=ds.features.shape)
    return Dataset(np.clip(noisy, 0.0, 1.0), ds.labels, ds.num_classes)


def add_sap_noise(ds: Dataset, pixel_frac: float, salt_ratio: float, seed: int) -> Dataset:
    """Salt-and-pepper: exactly round(pixel_frac * d) positions per sample are
    forced to 1 (salt, with probability salt_ratio) or 0 (pepper)."""
    if not (0.0 <= pixel_frac <= 1.0 and 0.0 <= salt_ratio <= 1.0):
        raise ValueError("pixel_frac and salt_ratio must lie in [0, 1]")
    k = int(round(pixel_frac * ds.feature_dim))
    if k == 0:
        return ds
    rng = np.random.default_rng(seed)
    features = ds.features.copy()
    # per-sample draw of k distinct positions
    order = np.argsort(rng.random(features.shape), axis=1)[:, :k]
    salt = rng.random((ds.n, k)) < salt_ratio
    rows = np.repeat(np.arange(ds.n), k)
    features[rows, order.ravel()] = salt.ravel().astype(np.float64)
    return Dataset(features, ds.labels, ds.num_classes)


def add_cosine_noise(ds: Dataset, amplitude: float, frequency: float) -> Dataset:
    """Deterministic cosine perturbation over the image grid.

    For square feature dims the spatial argument is (row + col); flat feature
    vectors use the feature index. The amplitude is on the 0..255 pixel scale.
    """
    r = int(round(np.sqrt(ds.feature_dim)))
    if r * r == ds.feature_dim:
        rows, cols = np.meshgrid(np.arange(r), np.arange(r), indexing="ij")
        phase = (rows + cols).ravel()
    else:
        phase = np.arange(ds.feature_dim)
    pattern = (amplitude / 255.0) * np.cos(2.0 * np.pi * frequency * phase)
    return Dataset(np.clip(ds.features + pattern, 0.0, 1.0), ds.labels, ds.num_classes)
