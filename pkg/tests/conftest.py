"""Shared fixtures: synthetic IDX / CIFAR-10 writers, a small fixture dataset, stub scorers."""

import os
import struct
from pathlib import Path

import numpy as np
import pytest

from data_pipeline import CIFAR_FILES, IDX_FILES, IDX_IMAGE_MAGIC, IDX_LABEL_MAGIC


def write_idx_images(path, images, magic=IDX_IMAGE_MAGIC):
    images = np.asarray(images, dtype=np.uint8)
    count, rows, cols = images.shape[:3]
    Path(path).write_bytes(struct.pack(">IIII", magic, count, rows, cols) + images.tobytes())
    return Path(path)


def write_idx_labels(path, labels, magic=IDX_LABEL_MAGIC):
    labels = np.asarray(labels, dtype=np.uint8)
    Path(path).write_bytes(struct.pack(">II", magic, labels.size) + labels.tobytes())
    return Path(path)


def write_cifar_batch(path, images, labels):
    """images: (n, 32, 32, 3) uint8; one label byte then R, G, B planes per record"""
    images = np.asarray(images, dtype=np.uint8)
    records = [bytes([int(label)]) + image.transpose(2, 0, 1).tobytes()
               for image, label in zip(images, labels)]
    Path(path).write_bytes(b"".join(records))
    return Path(path)


def pattern_images(labels, size=6, seed=0):
    """Class k lights its own band of pixels on a noisy background"""
    rng = np.random.default_rng(seed)
    labels = np.asarray(labels)
    images = rng.integers(0, 40, size=(labels.size, size, size), dtype=np.uint8)
    flat = images.reshape(labels.size, -1)
    band = flat.shape[1] // 10
    for i, label in enumerate(labels):
        flat[i, label * band:(label + 1) * band] = 220
    return images


def write_idx_dataset(root, per_class_train=30, per_class_test=8, classes=6, size=6):
    """data_dir/mnist/ with class-pattern IDX files; returns data_dir"""
    target = Path(root) / "mnist"
    target.mkdir(parents=True, exist_ok=True)
    for split, per_class, seed in (("train", per_class_train, 1), ("test", per_class_test, 2)):
        labels = np.repeat(np.arange(classes), per_class)
        labels = np.random.default_rng(seed).permutation(labels)
        image_name, label_name = IDX_FILES[split]
        write_idx_images(target / image_name, pattern_images(labels, size, seed))
        write_idx_labels(target / label_name, labels)
    return Path(root)


@pytest.fixture
def fixture_data_dir(tmp_path):
    """Six-class 6x6 IDX dataset: 180 train and 48 test images"""
    return write_idx_dataset(tmp_path / "data")


@pytest.fixture
def cifar_data_dir(tmp_path):
    root = tmp_path / "data" / "cifar10" / "cifar-10-batches-bin"
    root.mkdir(parents=True)
    rng = np.random.default_rng(3)
    for split, names in CIFAR_FILES.items():
        for name in names:
            labels = np.arange(10).repeat(2 if split == "train" else 1)
            images = rng.integers(0, 256, size=(labels.size, 32, 32, 3), dtype=np.uint8)
            write_cifar_batch(root / name, images, labels)
    return tmp_path / "data"


class FixedScorer:
    """Returns the same score for every row"""

    def __init__(self, value):
        self.value = float(value)
        self.calls = 0

    def score(self, X):
        self.calls += 1
        X = np.atleast_2d(np.asarray(X))
        return np.full(X.shape[0], self.value)


class ColumnScorer:
    """Score of row i is column[i] (X carries the row index in its first feature)"""

    def __init__(self, column):
        self.column = np.asarray(column, dtype=np.float64)

    def score(self, X):
        X = np.atleast_2d(np.asarray(X))
        return self.column[X[:, 0].astype(int)]


@pytest.fixture(scope="session")
def real_data_dir():
    """Root of the downloaded datasets (`python cli.py fetch ...`)"""
    path = os.environ.get("MULTIBIN_DATA_DIR")
    if not path:
        pytest.skip("MULTIBIN_DATA_DIR not set")
    return Path(path)
