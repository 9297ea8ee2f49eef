"""Source loaders, long-tailed subset construction and class partitions.

Labels are 0-based class indices throughout; class 0 is the most frequent.
"""

from __future__ import annotations

import math
import os
import struct
from dataclasses import dataclass

import numpy as np

PROFILES = ("exponential", "linear", "balanced-small")
CIFAR_RECORD = 1 + 3 * 32 * 32


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class LabeledDataset:
    x: np.ndarray  # (n, *feature_shape), values in [0, 1]
    y: np.ndarray  # (n,) int64 in 0..C-1
    num_classes: int

    def __post_init__(self):
        if len(self.x) != len(self.y):
            raise DatasetError(f"{len(self.x)} samples but {len(self.y)} labels")
        if len(self.y) and (self.y.min() < 0 or self.y.max() >= self.num_classes):
            raise DatasetError(f"labels outside 0..{self.num_classes - 1}")
        if self.x.size and (self.x.min() < 0.0 or self.x.max() > 1.0):
            raise DatasetError("feature values outside [0, 1]")

    def __len__(self) -> int:
        return len(self.y)

    @property
    def feature_shape(self) -> tuple[int, ...]:
        return tuple(self.x.shape[1:])

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.y, minlength=self.num_classes)

    def subset(self, idx) -> "LabeledDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return LabeledDataset(self.x[idx], self.y[idx], self.num_classes)


@dataclass(frozen=True)
class LongTailSpec:
    num_classes: int
    ur: float
    n_max: int
    profile: str = "exponential"
    seed: int = 0
    counts: tuple[int, ...] | None = None  # explicit per-class sizes; overrides the profile

    def __post_init__(self):
        if self.counts is not None:
            counts = tuple(int(v) for v in self.counts)
            object.__setattr__(self, "counts", counts)
            if len(counts) != self.num_classes:
                raise DatasetError(f"counts has {len(counts)} entries for {self.num_classes} classes")
            if min(counts) < 1 or list(counts) != sorted(counts, reverse=True):
                raise DatasetError("counts must be >= 1 and non-increasing")
        if self.ur < 1:
            raise DatasetError(f"ur must be >= 1, got {self.ur}")
        if self.n_max < self.ur:
            raise DatasetError(f"n_max={self.n_max} must be >= ur={self.ur}")
        if self.profile not in PROFILES:
            raise DatasetError(f"unknown profile {self.profile!r}; expected one of {PROFILES}")
        if self.num_classes < 2:
            raise DatasetError("need at least 2 classes")


@dataclass(frozen=True)
class ClassPartition:
    head: frozenset[int]
    body: frozenset[int]
    tail: frozenset[int]


def _round_half_up(v: float) -> int:
    return int(math.floor(v + 0.5))


def class_counts(spec: LongTailSpec) -> np.ndarray:
    """Per-class sizes, descending, for the requested imbalance profile."""
    if spec.counts is not None:
        return np.array(spec.counts, dtype=np.int64)
    c, n1, ur = spec.num_classes, spec.n_max, spec.ur
    if spec.profile == "linear":
        tail = n1 / ur
        raw = [n1 - (n1 - tail) * i / (c - 1) for i in range(c)]
    else:
        raw = [n1 * ur ** (-i / (c - 1)) for i in range(c)]
    return np.array([max(1, _round_half_up(v)) for v in raw], dtype=np.int64)


def partition_classes(num_classes: int) -> ClassPartition:
    """Head = first floor(C/3) classes, tail = classes from ceil(2C/3) on (1-based)."""
    if num_classes < 2:
        raise DatasetError("need at least 2 classes")
    n_head = num_classes // 3
    tail_start = -(-2 * num_classes // 3)  # 1-based
    head = frozenset(range(n_head))
    tail = frozenset(range(tail_start - 1, num_classes))
    body = frozenset(range(num_classes)) - head - tail
    return ClassPartition(head, body, tail)


def _take_per_class(data: LabeledDataset, counts, seed: int) -> LabeledDataset:
    rng = np.random.default_rng(seed)
    chosen = []
    for cls, n in enumerate(counts):
        pool = np.flatnonzero(data.y == cls)
        if len(pool) < n:
            raise DatasetError(f"class {cls} has {len(pool)} samples, {n} required")
        chosen.append(np.sort(rng.permutation(pool)[:n]))
    return data.subset(np.concatenate(chosen))


def sort_by_frequency(data: LabeledDataset) -> LabeledDataset:
    """Relabel classes so that class 0 is the most frequent (ties by index)."""
    counts = data.class_counts()
    order = sorted(range(data.num_classes), key=lambda c: (-counts[c], c))
    remap = np.empty(data.num_classes, dtype=np.int64)
    remap[order] = np.arange(data.num_classes)
    return LabeledDataset(data.x, remap[data.y], data.num_classes)


def build_long_tailed(data: LabeledDataset, spec: LongTailSpec) -> tuple[LabeledDataset, np.ndarray]:
    if spec.num_classes != data.num_classes:
        raise DatasetError(f"spec has {spec.num_classes} classes, data has {data.num_classes}")
    data = sort_by_frequency(data)
    counts = class_counts(spec)
    if spec.profile == "balanced-small":
        return build_balanced_small(data, counts, spec.seed), counts
    return _take_per_class(data, counts, spec.seed), counts


def build_balanced_small(data: LabeledDataset, counts, seed: int) -> LabeledDataset:
    """Balanced subset with the same total size as ``counts``.

    Each class gets ``total // C``; the remainder goes one apiece to the first
    classes.
    """
    total = int(np.sum(counts))
    c = data.num_classes
    if total > len(data):
        raise DatasetError(f"need {total} samples, source has {len(data)}")
    per = np.full(c, total // c, dtype=np.int64)
    per[: total % c] += 1
    return _take_per_class(data, per, seed)


def split_per_class(data: LabeledDataset, test_per_class: int, seed: int = 0) -> tuple[LabeledDataset, LabeledDataset]:
    """Hold out ``test_per_class`` random samples of every class."""
    rng = np.random.default_rng([seed, 11])
    test_idx = []
    for cls in range(data.num_classes):
        pool = np.flatnonzero(data.y == cls)
        if len(pool) <= test_per_class:
            raise DatasetError(f"class {cls} has {len(pool)} samples, cannot hold out {test_per_class}")
        test_idx.append(rng.permutation(pool)[:test_per_class])
    test_idx = np.sort(np.concatenate(test_idx))
    train_mask = np.ones(len(data), dtype=bool)
    train_mask[test_idx] = False
    return data.subset(np.flatnonzero(train_mask)), data.subset(test_idx)


# -- sources -------------------------------------------------------------------


def synthetic_gaussians(
    num_classes: int,
    dim: int,
    separation: float,
    n_per_class: int,
    seed: int = 0,
    noise: float = 0.1,
) -> LabeledDataset:
    """Isotropic Gaussian blobs around 0.5, clipped to [0, 1].

    Class means sit at distance ``separation / 2`` from the centre along
    random orthogonal directions (random directions when C > dim).
    """
    if num_classes < 2:
        raise DatasetError("need at least 2 classes")
    if dim < 1 or n_per_class < 1 or noise < 0:
        raise DatasetError("dim and n_per_class must be positive, noise non-negative")
    rng = np.random.default_rng(seed)
    if num_classes <= dim:
        q, _ = np.linalg.qr(rng.standard_normal((dim, num_classes)))
        dirs = q.T
    else:
        dirs = rng.standard_normal((num_classes, dim))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    means = 0.5 + 0.5 * separation * dirs
    x = means[:, None, :] + noise * rng.standard_normal((num_classes, n_per_class, dim))
    x = np.clip(x.reshape(-1, dim), 0.0, 1.0)
    y = np.repeat(np.arange(num_classes), n_per_class)
    return LabeledDataset(x, y, num_classes)


def _read_idx(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise DatasetError(f"{path}: truncated IDX header")
    zero, dtype_code, ndim = struct.unpack(">HBB", raw[:4])
    if zero != 0 or dtype_code != 0x08:
        raise DatasetError(f"{path}: bad IDX magic 0x{int.from_bytes(raw[:4], 'big'):08x}")
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DatasetError(f"{path}: truncated IDX dimensions")
    dims = struct.unpack(">" + "I" * ndim, raw[4:header])
    expected = int(np.prod(dims)) if dims else 0
    body = np.frombuffer(raw, dtype=np.uint8, offset=header)
    if body.size != expected:
        raise DatasetError(f"{path}: expected {expected} data bytes, found {body.size}")
    return body.reshape(dims)


def load_idx(images_path: str, labels_path: str, num_classes: int | None = None) -> LabeledDataset:
    """MNIST-style IDX pair: images (magic 0x803) and labels (magic 0x801)."""
    images = _read_idx(images_path)
    labels = _read_idx(labels_path)
    if images.ndim != 3:
        raise DatasetError(f"{images_path}: expected magic 0x00000803 (3-d images)")
    if labels.ndim != 1:
        raise DatasetError(f"{labels_path}: expected magic 0x00000801 (1-d labels)")
    if len(images) != len(labels):
        raise DatasetError(f"{len(images)} images but {len(labels)} labels")
    y = labels.astype(np.int64)
    c = num_classes or int(y.max()) + 1
    if c < 2:
        raise DatasetError("need at least 2 classes")
    x = images.astype(np.float64)[:, None, :, :] / 255.0
    return LabeledDataset(x, y, c)


def load_cifar_binary(paths, num_classes: int = 10) -> LabeledDataset:
    """CIFAR binary batches: label byte(s) then 3x32x32 planes.

    CIFAR-10 records carry one label byte; CIFAR-100 records (``num_classes``
    100) carry a coarse and a fine label byte, and the fine label is used.
    """
    if isinstance(paths, (str, os.PathLike)):
        paths = [paths]
    n_label = 2 if num_classes == 100 else 1
    record = CIFAR_RECORD - 1 + n_label
    xs, ys = [], []
    for path in paths:
        if not os.path.exists(path):
            raise FileNotFoundError(path)
        raw = np.fromfile(path, dtype=np.uint8)
        if raw.size == 0 or raw.size % record:
            raise DatasetError(f"{path}: size {raw.size} is not a multiple of {record}")
        rec = raw.reshape(-1, record)
        ys.append(rec[:, n_label - 1].astype(np.int64))
        xs.append(rec[:, n_label:].reshape(-1, 3, 32, 32).astype(np.float64) / 255.0)
    return LabeledDataset(np.concatenate(xs), np.concatenate(ys), num_classes)


def load_source(source: dict) -> LabeledDataset:
    """Dispatch on ``source['kind']``: ``synthetic``, ``idx`` or ``cifar``."""
    kind = source.get("kind")
    params = {k: v for k, v in source.items() if k != "kind"}
    if kind == "synthetic":
        return synthetic_gaussians(**params)
    if kind == "idx":
        return load_idx(params["images"], params["labels"], params.get("num_classes"))
    if kind == "cifar":
        return load_cifar_binary(params["files"], params.get("num_classes", 10))
    raise DatasetError(f"unknown source kind {kind!r}")


def augment(x: np.ndarray, rng: np.random.Generator, flip: bool = True, pad: int = 0) -> np.ndarray:
    """Random horizontal flip and pad-crop for image batches (B, C, H, W)."""
    if x.ndim != 4:
        return x
    out = x.copy()
    if flip:
        mask = rng.random(len(x)) < 0.5
        out[mask] = out[mask][..., ::-1]
    if pad:
        h, w = x.shape[2:]
        padded = np.pad(out, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        offs = rng.integers(0, 2 * pad + 1, size=(len(x), 2))
        for i, (di, dj) in enumerate(offs):
            out[i] = padded[i, :, di : di + h, dj : dj + w]
    return out
