"""Dataset loading, standardization, augmentation and splits.

Supports the IDX container (gzip-transparent) and the CIFAR-10 binary batch
format. Images are carried as float32 (N, C, H, W) arrays; raw loaders keep
pixel values in [0, 255] and `standardize` maps them to per-pixel z-scores
using training-set statistics.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Sequence, Tuple

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD = 3073  # 1 label byte + 3 * 1024 pixel bytes
STD_FLOOR = 1e-6


class DataError(Exception):
    """Base class for dataset ingestion failures."""


class BadMagicError(DataError):
    pass


class TruncatedFileError(DataError):
    pass


class CountMismatchError(DataError):
    pass


class FormatError(DataError):
    pass


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray           # (N, C, H, W) float32
    labels: np.ndarray           # (N,) int64 in [0, n_c)
    n_c: int
    name: str = ""
    split: str = ""
    mean: Optional[np.ndarray] = None  # (C, H, W) float64, set by standardize
    std: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.images.ndim != 4:
            raise FormatError(f"images must be (N, C, H, W), got {self.images.shape}")
        if self.images.shape[0] != self.labels.shape[0]:
            raise CountMismatchError(
                f"{self.images.shape[0]} images but {self.labels.shape[0]} labels")
        if self.labels.size and \
                (self.labels.min() < 0 or self.labels.max() >= self.n_c):
            raise FormatError(
                f"labels outside [0, {self.n_c}): range "
                f"[{self.labels.min()}, {self.labels.max()}]")

    @property
    def n(self) -> int:
        return self.images.shape[0]

    def subset(self, indices: np.ndarray, split: str = "") -> "Dataset":
        return replace(self, images=self.images[indices], labels=self.labels[indices],
                       split=split or self.split)


def _read_bytes(path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _idx_payload(path, expected_magic: int, n_dims: int) -> Tuple[Tuple[int, ...], bytes]:
    raw = _read_bytes(path)
    header = 4 * (1 + n_dims)
    if len(raw) < header:
        raise TruncatedFileError(
            f"{path}: expected at least {header} header bytes, got {len(raw)}")
    magic = struct.unpack(">I", raw[:4])[0]
    if magic != expected_magic:
        raise BadMagicError(
            f"{path}: magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    dims = struct.unpack(f">{n_dims}I", raw[4:header])
    expected = header + int(np.prod(dims))
    if len(raw) != expected:
        raise TruncatedFileError(
            f"{path}: expected {expected} bytes for dims {dims}, got {len(raw)}")
    return dims, raw[header:]


def load_idx(images_path, labels_path, name: str = "", split: str = "",
             n_c: Optional[int] = None) -> Dataset:
    """Read an IDX image/label file pair into a raw grayscale Dataset.

    Pixels come out as float32 in [0, 255] with shape (N, 1, rows, cols).
    Both files may be gzip-compressed in place.
    """
    (n_img, rows, cols), pixels = _idx_payload(images_path, IDX_IMAGES_MAGIC, 3)
    (n_lab,), label_bytes = _idx_payload(labels_path, IDX_LABELS_MAGIC, 1)
    if n_img != n_lab:
        raise CountMismatchError(f"{n_img} images in {images_path} but "
                                 f"{n_lab} labels in {labels_path}")
    images = np.frombuffer(pixels, dtype=np.uint8).astype(np.float32)
    images = images.reshape(n_img, 1, rows, cols)
    labels = np.frombuffer(label_bytes, dtype=np.uint8).astype(np.int64)
    classes = n_c if n_c is not None else (int(labels.max()) + 1 if n_lab else 0)
    return Dataset(images, labels, classes, name=name, split=split)


def load_cifar_binary(paths: Sequence, name: str = "cifar10",
                      split: str = "") -> Dataset:
    """Read one or more CIFAR-10 binary batch files (3073-byte records)."""
    if isinstance(paths, (str, Path)):
        paths = [paths]
    chunks, label_chunks = [], []
    for path in paths:
        raw = _read_bytes(path)
        if len(raw) % CIFAR_RECORD != 0:
            raise TruncatedFileError(
                f"{path}: {len(raw)} bytes is not a multiple of {CIFAR_RECORD}")
        records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
        labels = records[:, 0]
        if labels.size and labels.max() > 9:
            raise FormatError(f"{path}: label byte {labels.max()} > 9")
        chunks.append(records[:, 1:].reshape(-1, 3, 32, 32))
        label_chunks.append(labels)
    images = np.concatenate(chunks).astype(np.float32)
    labels = np.concatenate(label_chunks).astype(np.int64)
    return Dataset(images, labels, 10, name=name, split=split)


def standardize(train: Dataset, *others: Dataset) -> Tuple[Dataset, ...]:
    """Map every dataset to per-pixel z-scores of the TRAINING set.

    Each (c, h, w) position gets its own mean and std, computed over the
    training images only and applied unchanged to the other splits. Stds are
    floored at 1e-6 so constant pixels map to 0.
    """
    if train.n == 0:
        raise FormatError("cannot standardize from an empty training set")
    mean = train.images.mean(axis=0, dtype=np.float64)
    std = train.images.std(axis=0, dtype=np.float64)
    std = np.maximum(std, STD_FLOOR)
    out = []
    for ds in (train,) + others:
        if ds.images.shape[1:] != train.images.shape[1:]:
            raise FormatError(f"shape {ds.images.shape[1:]} does not match "
                              f"training shape {train.images.shape[1:]}")
        images = ((ds.images - mean) / std).astype(np.float32)
        out.append(replace(ds, images=images, mean=mean, std=std))
    return tuple(out)


def destandardize(images: np.ndarray, mean: np.ndarray, std: np.ndarray) -> np.ndarray:
    return (images.astype(np.float64) * std + mean).astype(np.float32)


def augment(images: np.ndarray, rng: np.random.Generator, pad: int = 4) -> np.ndarray:
    """Pad-and-crop plus random horizontal flip, per image.

    Each image is zero-padded `pad` pixels on every side, cropped back to its
    original size at a uniform random offset, and mirrored with probability
    one half. Offset (pad, pad) with no flip reproduces the input exactly.
    """
    n, c, h, w = images.shape
    padded = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=images.dtype)
    padded[:, :, pad:pad + h, pad:pad + w] = images
    oys = rng.integers(0, 2 * pad + 1, size=n)
    oxs = rng.integers(0, 2 * pad + 1, size=n)
    flips = rng.random(n) < 0.5
    out = np.empty_like(images)
    for i in range(n):
        crop = padded[i, :, oys[i]:oys[i] + h, oxs[i]:oxs[i] + w]
        out[i] = crop[:, :, ::-1] if flips[i] else crop
    return out


def split(dataset: Dataset, fractions: Sequence[float], seed: int,
          split_names: Optional[Sequence[str]] = None) -> Tuple[Dataset, ...]:
    """Label-stratified disjoint splits, reproducible from the seed.

    Within each class the (shuffled) indices are cut at boundaries
    round(cumulative_fraction * class_count), so per-class proportions hold
    to within one sample. Fractions must be positive and sum to at most 1;
    any remainder is discarded.
    """
    fractions = list(fractions)
    if not fractions or any(f <= 0 for f in fractions):
        raise ValueError(f"fractions must be positive, got {fractions}")
    if sum(fractions) > 1 + 1e-9:
        raise ValueError(f"fractions sum to {sum(fractions)} > 1")
    rng = np.random.default_rng(seed)
    cuts = np.cumsum([0.0] + fractions)
    parts: list = [[] for _ in fractions]
    for cls in range(dataset.n_c):
        idx = np.flatnonzero(dataset.labels == cls)
        rng.shuffle(idx)
        bounds = np.round(cuts * len(idx)).astype(int)
        for i in range(len(fractions)):
            parts[i].append(idx[bounds[i]:bounds[i + 1]])
    names = split_names or [f"split{i}" for i in range(len(fractions))]
    out = []
    for i, chunks in enumerate(parts):
        indices = np.sort(np.concatenate(chunks))
        if indices.size == 0:
            raise ValueError(f"fraction {fractions[i]} yields an empty split")
        out.append(dataset.subset(indices, split=names[i]))
    return tuple(out)


# ---------------------------------------------------------------------------
# Named-dataset discovery for the CLI
# ---------------------------------------------------------------------------

IDX_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}
DATASET_DIRS = {"mnist": "mnist", "fashion": "fashion", "cifar10": "cifar10"}


def _find_file(candidates) -> Optional[Path]:
    for path in candidates:
        for suffix in ("", ".gz"):
            p = Path(str(path) + suffix)
            if p.is_file():
                return p
    return None


def load_named_dataset(name: str, data_dir) -> Tuple[Dataset, Dataset]:
    """Locate and load a known dataset's train and test splits under data_dir.

    IDX datasets (mnist, fashion) look for the four standard ubyte files,
    optionally gzipped, in data_dir/<name>/ or directly in data_dir. CIFAR-10
    expects the binary batch files under data_dir/cifar10 or
    data_dir/cifar-10-batches-bin.
    """
    if name not in DATASET_DIRS:
        raise FormatError(f"unknown dataset {name!r}; choices: {sorted(DATASET_DIRS)}")
    base = Path(data_dir)
    roots = [base / DATASET_DIRS[name], base]
    if name == "cifar10":
        roots.insert(1, base / "cifar-10-batches-bin")
        root = next((r for r in roots
                     if _find_file([r / "data_batch_1.bin"]) is not None), None)
        if root is None:
            raise FileNotFoundError(
                f"cifar10 batch files not found under {base} "
                f"(looked in {[str(r) for r in roots]})")
        train_paths = [_find_file([root / f"data_batch_{i}.bin"]) for i in range(1, 6)]
        if any(p is None for p in train_paths):
            raise FileNotFoundError(f"missing CIFAR-10 training batches under {root}")
        test_path = _find_file([root / "test_batch.bin"])
        if test_path is None:
            raise FileNotFoundError(f"missing CIFAR-10 test batch under {root}")
        return (load_cifar_binary(train_paths, name, "train"),
                load_cifar_binary([test_path], name, "test"))
    out = []
    for split_name, (img_name, lab_name) in IDX_FILES.items():
        img = _find_file([r / img_name for r in roots])
        lab = _find_file([r / lab_name for r in roots])
        if img is None or lab is None:
            raise FileNotFoundError(
                f"{name} {split_name} IDX files ({img_name}[.gz], {lab_name}[.gz]) "
                f"not found under {base}")
        out.append(load_idx(img, lab, name=name, split=split_name, n_c=10))
    return tuple(out)  # type: ignore[return-value]
