"""
Multibin Data Pipeline
Dataset loading, preprocessing and batching

Reads MNIST / Fashion-MNIST (IDX, raw or gzip) and CIFAR-10 (binary
batches), turns images into unit-norm feature rows (greyscale for colour
images, flatten, per-feature standardization with train statistics, per-row
L2 normalization), and serves class subsets, binary relabellings and seeded
mini-batch orders.
"""

from __future__ import annotations

import gzip
import logging
import struct
import zlib
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path
from typing import TYPE_CHECKING, Iterable, List, Optional, Sequence, Sized, Tuple, Union

import numpy as np

from errors import DataError, ParseError, ShapeError, UsageError

if TYPE_CHECKING:
    from multiclass import BinaryTask

logger = logging.getLogger(__name__)

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801
CIFAR_RECORD_BYTES = 1 + 3 * 32 * 32
LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])
STD_FLOOR = 1e-8
ZERO_NORM = 1e-12
FEATURE_HEADER = "MULTIBIN-FEAT v1"
PIPELINE_VERSION = 1


class DatasetId(Enum):
    """Supported benchmark datasets"""
    MNIST = "mnist"
    FASHION = "fashion"
    CIFAR10 = "cifar10"


IDX_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}
CIFAR_FILES = {
    "train": [f"data_batch_{i}.bin" for i in range(1, 6)],
    "test": ["test_batch.bin"],
}


@dataclass
class RawDataset:
    """Unsigned 8-bit images (count, height, width, channels) with class ids"""
    images: np.ndarray
    labels: np.ndarray
    split: str = "train"

    def __post_init__(self):
        if self.images.shape[0] != self.labels.shape[0]:
            raise ShapeError(f"{self.split} labels", self.images.shape[0], self.labels.shape[0])
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() > 9):
            raise UsageError(f"{self.split} labels outside 0..9")

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def channels(self) -> int:
        return self.images.shape[3]


@dataclass
class FeatureDataset:
    """Unit-norm feature rows plus the train-split standardization statistics"""
    features: np.ndarray
    labels: np.ndarray
    mean: np.ndarray
    std: np.ndarray
    split: str = "train"
    degenerate_rows: int = 0

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def n_features(self) -> int:
        return self.features.shape[1]


@dataclass
class BinaryDataset:
    """Feature rows relabelled to {0, 1} for one binary task"""
    features: np.ndarray
    labels: np.ndarray
    source_labels: np.ndarray
    task_id: str = ""

    def __len__(self) -> int:
        return self.features.shape[0]


# ========================================
# LOADERS
# ========================================

def _read_bytes(path: Union[str, Path]) -> bytes:
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing data file: {path}")
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        try:
            raw = gzip.decompress(raw)
        except (OSError, EOFError, zlib.error) as e:
            raise ParseError(f"corrupt gzip stream: {e}", str(path), len(raw))
    return raw


def _parse_idx_images(raw: bytes, path: str) -> np.ndarray:
    # [0] magic 0x00000803, [4] count, [8] rows, [12] cols, [16] pixels row-major
    if len(raw) < 16:
        raise ParseError(f"truncated image header ({len(raw)} of 16 bytes)", path, len(raw))
    magic, count, rows, cols = struct.unpack(">IIII", raw[:16])
    if magic != IDX_IMAGE_MAGIC:
        raise ParseError(f"wrong magic 0x{magic:08x} for an image file, expected 0x{IDX_IMAGE_MAGIC:08x}",
                         path, 0)
    expected = count * rows * cols
    if len(raw) - 16 < expected:
        raise ParseError(f"truncated pixel payload: {len(raw) - 16} of {expected} bytes", path, len(raw))
    pixels = np.frombuffer(raw, dtype=np.uint8, count=expected, offset=16)
    return pixels.reshape(count, rows, cols, 1).copy()


def _parse_idx_labels(raw: bytes, path: str) -> np.ndarray:
    # [0] magic 0x00000801, [4] count, [8] labels
    if len(raw) < 8:
        raise ParseError(f"truncated label header ({len(raw)} of 8 bytes)", path, len(raw))
    magic, count = struct.unpack(">II", raw[:8])
    if magic != IDX_LABEL_MAGIC:
        raise ParseError(f"wrong magic 0x{magic:08x} for a label file, expected 0x{IDX_LABEL_MAGIC:08x}",
                         path, 0)
    if len(raw) - 8 < count:
        raise ParseError(f"truncated label payload: {len(raw) - 8} of {count} bytes", path, len(raw))
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=8).astype(np.int64)


def load_idx(image_path: Union[str, Path], label_path: Union[str, Path],
             split: str = "train") -> RawDataset:
    """Load an IDX image/label file pair (raw or gzip-compressed).

    Args:
        image_path: IDX3 image file
        label_path: IDX1 label file
        split: "train" or "test" tag

    Returns:
        RawDataset with images of shape (count, rows, cols, 1)
    """
    images = _parse_idx_images(_read_bytes(image_path), str(image_path))
    labels = _parse_idx_labels(_read_bytes(label_path), str(label_path))
    if images.shape[0] != labels.shape[0]:
        raise ParseError(f"count mismatch: {images.shape[0]} images vs {labels.shape[0]} labels",
                         str(label_path), 4)
    logger.info(f"Loaded IDX {split}: {images.shape[0]} images of {images.shape[1]}x{images.shape[2]}")
    return RawDataset(images, labels, split)


def load_cifar10(paths: Sequence[Union[str, Path]], split: str = "train") -> RawDataset:
    """Load CIFAR-10 binary batches: 1 label byte + R, G, B planes of 32x32"""
    images = []
    labels = []
    for path in paths:
        raw = _read_bytes(path)
        remainder = len(raw) % CIFAR_RECORD_BYTES
        if remainder or not raw:
            expected = (len(raw) // CIFAR_RECORD_BYTES + 1) * CIFAR_RECORD_BYTES
            raise ParseError(f"file length {len(raw)} is not a multiple of {CIFAR_RECORD_BYTES} "
                             f"(expected {expected})", str(path), len(raw) - remainder)
        records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD_BYTES)
        labels.append(records[:, 0].astype(np.int64))
        images.append(records[:, 1:].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1))
    if not images:
        raise DataError(f"no CIFAR-10 batch files given for {split}")
    dataset = RawDataset(np.ascontiguousarray(np.concatenate(images)), np.concatenate(labels), split)
    logger.info(f"Loaded CIFAR-10 {split}: {len(dataset)} images")
    return dataset


def _resolve(directory: Path, name: str) -> Path:
    for candidate in (directory / name, directory / f"{name}.gz"):
        if candidate.exists():
            return candidate
    raise DataError(f"missing data file: {directory / name}[.gz]")


def load_dataset(dataset: Union[DatasetId, str], data_dir: Union[str, Path]) -> Tuple[RawDataset, RawDataset]:
    """Load the native train and test splits from data_dir/<dataset>/"""
    dataset = DatasetId(dataset)
    root = Path(data_dir) / dataset.value
    if not root.exists():
        raise DataError(f"missing dataset directory: {root}")
    if dataset is DatasetId.CIFAR10:
        nested = root / "cifar-10-batches-bin"
        base = nested if nested.exists() else root
        splits = []
        for split in ("train", "test"):
            paths = [base / name for name in CIFAR_FILES[split]]
            for path in paths:
                if not path.exists():
                    raise DataError(f"missing data file: {path}")
            splits.append(load_cifar10(paths, split))
        return splits[0], splits[1]

    splits = []
    for split in ("train", "test"):
        image_name, label_name = IDX_FILES[split]
        splits.append(load_idx(_resolve(root, image_name), _resolve(root, label_name), split))
    return splits[0], splits[1]


# ========================================
# PREPROCESSING
# ========================================

def grayscale(image: np.ndarray) -> np.ndarray:
    """BT.601 luma of an (..., H, W, 3) image, keeping a singleton channel axis"""
    image = np.asarray(image)
    if image.shape[-1] != 3:
        raise ShapeError("colour channels", 3, image.shape[-1])
    return (image.astype(np.float64) @ LUMA_WEIGHTS)[..., None]


def _flatten(raw: RawDataset) -> np.ndarray:
    images = grayscale(raw.images) if raw.channels == 3 else raw.images.astype(np.float64)
    return images.reshape(len(raw), -1)


def apply_standardization(raw: RawDataset, mean: np.ndarray, std: np.ndarray) -> FeatureDataset:
    """Flatten, z-score with the given statistics and L2-normalize each row"""
    features = (_flatten(raw) - mean) / std
    norms = np.linalg.norm(features, axis=1)
    degenerate = norms < ZERO_NORM
    if np.any(degenerate):
        logger.warning(f"{int(degenerate.sum())} zero-norm {raw.split} samples replaced by the uniform unit vector")
        features[degenerate] = 1.0 / np.sqrt(features.shape[1])
        norms[degenerate] = 1.0
    features /= norms[:, None]
    return FeatureDataset(features, raw.labels.copy(), mean, std, raw.split, int(degenerate.sum()))


def preprocess(train: RawDataset, test: RawDataset) -> Tuple[FeatureDataset, FeatureDataset]:
    """Greyscale (3 channels) -> flatten -> standardize (train stats) -> unit rows"""
    if train.images.shape[1:] != test.images.shape[1:]:
        raise ShapeError("test image size", int(np.prod(train.images.shape[1:])),
                         int(np.prod(test.images.shape[1:])))
    train_flat = _flatten(train)
    mean = train_flat.mean(axis=0)
    std = np.maximum(train_flat.std(axis=0), STD_FLOOR)
    del train_flat
    train_features = apply_standardization(train, mean, std)
    test_features = apply_standardization(test, mean, std)
    logger.info(f"Preprocessed {len(train_features)} train / {len(test_features)} test rows, "
                f"N={train_features.n_features}")
    return train_features, test_features


def filter_classes(ds: FeatureDataset, K: int) -> FeatureDataset:
    """Keep the first K classes (labels 0..K-1)"""
    if not 2 <= K <= 10:
        raise UsageError(f"K must be in [2, 10], got {K}")
    present = set(np.unique(ds.labels).tolist())
    for cls in range(K):
        if cls not in present:
            raise UsageError(f"class {cls} absent from the {ds.split} split")
    keep = ds.labels < K
    return replace(ds, features=ds.features[keep], labels=ds.labels[keep])


def _keep_raw_classes(raw: RawDataset, K: int) -> RawDataset:
    keep = raw.labels < K
    return RawDataset(raw.images[keep], raw.labels[keep], raw.split)


def relabel_for_task(ds: FeatureDataset, task: "BinaryTask") -> BinaryDataset:
    """Keep samples of the task's classes and map them to 0 / 1"""
    zero = np.isin(ds.labels, sorted(task.zero_classes))
    one = np.isin(ds.labels, sorted(task.one_classes))
    if not zero.any():
        raise UsageError(f"task {task.id}: no {ds.split} samples for label-0 classes {sorted(task.zero_classes)}")
    if not one.any():
        raise UsageError(f"task {task.id}: no {ds.split} samples for label-1 classes {sorted(task.one_classes)}")
    keep = zero | one
    return BinaryDataset(ds.features[keep], one[keep].astype(np.float64), ds.labels[keep], task.id)


def subsample(ds: FeatureDataset, limit: Optional[int], seed: int) -> FeatureDataset:
    """Deterministic class-stratified subset of at most `limit` rows"""
    if not limit or limit >= len(ds):
        return ds
    rng = np.random.default_rng([seed, len(ds), limit])
    chosen = []
    for cls in np.unique(ds.labels):
        members = np.flatnonzero(ds.labels == cls)
        take = max(1, int(round(limit * members.size / len(ds))))
        chosen.append(rng.permutation(members)[:take])
    index = np.sort(np.concatenate(chosen))
    return replace(ds, features=ds.features[index], labels=ds.labels[index])


def batches(ds: Union[Sized, int], batch_size: int, seed: int, epoch: int) -> List[np.ndarray]:
    """Shuffled mini-batch index slices; the permutation depends only on (seed, epoch)"""
    if batch_size < 1:
        raise UsageError(f"batch_size must be at least 1, got {batch_size}")
    n = ds if isinstance(ds, (int, np.integer)) else len(ds)
    order = np.random.default_rng([int(seed), int(epoch)]).permutation(n)
    return [order[start:start + batch_size] for start in range(0, n, batch_size)]


# ========================================
# FEATURE CACHE
# ========================================

def cache_path(cache_dir: Union[str, Path], dataset: str, K: int, split: str,
               limit: Optional[int] = None, seed: int = 0) -> Path:
    # a subsample depends on the seed, the full split does not
    suffix = f"-n{limit}-s{seed}" if limit else ""
    return Path(cache_dir) / f"{dataset}-k{K}-p{PIPELINE_VERSION}-{split}{suffix}.feat"


def save_features(ds: FeatureDataset, path: Union[str, Path]) -> Path:
    """Write labels, mean, std and features as little-endian float64 after a text header"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rows, cols = ds.features.shape
    header = (f"{FEATURE_HEADER}\nrows={rows} cols={cols} split={ds.split} "
              f"degenerate={ds.degenerate_rows}\ndata\n")
    payload = np.concatenate([ds.labels.astype(np.float64), ds.mean, ds.std, ds.features.ravel()])
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        f.write(payload.astype("<f8").tobytes())
    return path


def load_features(path: Union[str, Path]) -> FeatureDataset:
    path = Path(path)
    raw = path.read_bytes()
    parts = raw.split(b"\n", 3)
    if len(parts) < 4 or parts[0].decode("ascii", "replace") != FEATURE_HEADER or parts[2] != b"data":
        raise ParseError(f"bad header, expected '{FEATURE_HEADER}'", str(path), 0)
    try:
        fields = dict(item.split("=", 1) for item in parts[1].decode("ascii").split())
        rows, cols = int(fields["rows"]), int(fields["cols"])
        degenerate = int(fields.get("degenerate", 0))
    except (KeyError, ValueError, UnicodeDecodeError) as e:
        raise ParseError(f"bad header fields: {e}", str(path), len(parts[0]) + 1)
    offset = len(raw) - len(parts[3])
    expected = (rows + 2 * cols + rows * cols) * 8
    if len(parts[3]) != expected:
        raise ParseError(f"payload is {len(parts[3])} bytes, expected {expected}", str(path), offset)
    values = np.frombuffer(parts[3], dtype="<f8").astype(np.float64)
    labels = values[:rows].astype(np.int64)
    mean = values[rows:rows + cols]
    std = values[rows + cols:rows + 2 * cols]
    features = values[rows + 2 * cols:].reshape(rows, cols)
    return FeatureDataset(features, labels, mean, std, fields.get("split", "train"), degenerate)


def prepare_features(dataset: str, data_dir: Union[str, Path], K: int,
                     cache_dir: Optional[Union[str, Path]] = None,
                     train_limit: Optional[int] = None, test_limit: Optional[int] = None,
                     seed: int = 0) -> Tuple[FeatureDataset, FeatureDataset]:
    """Load, preprocess and filter a K-class problem, going through the cache when set"""
    if cache_dir:
        paths = (cache_path(cache_dir, dataset, K, "train", train_limit, seed),
                 cache_path(cache_dir, dataset, K, "test", test_limit, seed))
        if all(p.exists() for p in paths):
            logger.info(f"Feature cache hit for {dataset} K={K}")
            return load_features(paths[0]), load_features(paths[1])

    raw_train, raw_test = load_dataset(dataset, data_dir)
    train, test = preprocess(_keep_raw_classes(raw_train, K), _keep_raw_classes(raw_test, K))
    train = subsample(filter_classes(train, K), train_limit, seed)
    test = subsample(filter_classes(test, K), test_limit, seed)

    if cache_dir:
        save_features(train, paths[0])
        save_features(test, paths[1])
    return train, test


def class_counts(labels: Iterable[int], K: int) -> List[int]:
    return np.bincount(np.asarray(list(labels), dtype=np.int64), minlength=K)[:K].tolist()
