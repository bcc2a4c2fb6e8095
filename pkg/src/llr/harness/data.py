"""Datasets: the CIFAR-10 binary format and small synthetic stand-ins."""

import os
from dataclasses import dataclass

import numpy as np

from llr.errors import ContractError, FormatError

RECORD = 3073
IMAGE_SHAPE = (3, 32, 32)
TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
TEST_FILES = ("test_batch.bin",)
DATA_ENV = "LLR_CIFAR10_DIR"


@dataclass
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    split: str = "train"
    num_classes: int = 10

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise ContractError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.images.size and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise ContractError("pixel values must lie in [0, 1]")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ContractError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self):
        return len(self.labels)

    def subset(self, index):
        return Dataset(self.images[index], self.labels[index], self.split, self.num_classes)

    def take(self, k):
        return self.subset(slice(0, k))


def decode_records(blob, offset=0):
    """Decode raw CIFAR-10 bytes into (uint8 images NCHW, labels)."""
    if len(blob) % RECORD:
        whole = len(blob) // RECORD * RECORD
        raise FormatError(f"length {len(blob)} is not a multiple of {RECORD}; trailing partial record", offset + whole)
    raw = np.frombuffer(blob, dtype=np.uint8).reshape(-1, RECORD)
    labels = raw[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels > 9)
    if bad.size:
        i = int(bad[0])
        raise FormatError(f"label byte {labels[i]} > 9 in record {i}", offset + i * RECORD)
    return raw[:, 1:].reshape((-1,) + IMAGE_SHAPE), labels


def _files(path, split):
    if os.path.isfile(path):
        return [path]
    names = TRAIN_FILES if split == "train" else TEST_FILES
    files = [os.path.join(path, n) for n in names]
    missing = [f for f in files if not os.path.exists(f)]
    if missing:
        raise FileNotFoundError(f"CIFAR-10 {split} files missing under {path}: {[os.path.basename(m) for m in missing]}")
    return files


def load_cifar10(path, split="train", classes=None, take=None):
    """Load CIFAR-10 binary batches from a file or the extracted directory.

    ``classes`` keeps only the listed labels and renumbers them 0..k-1 in the
    given order; ``take`` then keeps the first ``take`` records.
    """
    images, labels = [], []
    for f in _files(path, split):
        with open(f, "rb") as fh:
            img, lab = decode_records(fh.read())
        images.append(img)
        labels.append(lab)
    images = np.concatenate(images)
    labels = np.concatenate(labels)
    num_classes = 10
    if classes is not None:
        classes = [int(c) for c in classes]
        keep = np.isin(labels, classes)
        images, labels = images[keep], labels[keep]
        remap = {c: i for i, c in enumerate(classes)}
        labels = np.array([remap[int(v)] for v in labels], dtype=np.int64)
        num_classes = len(classes)
    if take is not None:
        images, labels = images[:take], labels[:take]
    return Dataset(images / 255.0, labels, split, num_classes)


def cifar10_dir():
    """Directory named by ``LLR_CIFAR10_DIR`` if it holds the binary batches, else None."""
    path = os.environ.get(DATA_ENV)
    if path and all(os.path.exists(os.path.join(path, f)) for f in TRAIN_FILES + TEST_FILES):
        return path
    return None


SPLITS = ("train", "test")


def _sample_rng(seed, split):
    if split not in SPLITS:
        raise ContractError(f"split must be one of {SPLITS}, got {split!r}")
    return np.random.default_rng(np.random.SeedSequence((seed, SPLITS.index(split) + 1)))


def synthetic_blobs(classes, dims, count, seed, margin=0.5, noise=0.05, split="train"):
    """Gaussian blobs around sign-pattern centers inside the unit cube.

    Centers sit at ``0.5 +- margin/2`` per coordinate, so any two distinct
    centers are exactly ``margin`` apart in l-infinity.  Samples are clipped
    to [0, 1].  The centers depend on ``seed`` only; ``split`` picks an
    independent sample stream around them.
    """
    if classes < 2:
        raise ContractError("synthetic_blobs needs at least two classes")
    if classes > 2 ** dims:
        raise ContractError(f"{dims} dims cannot host {classes} distinct sign patterns")
    rng = np.random.default_rng(seed)
    patterns = set()
    signs = []
    if classes == 2:
        s = rng.choice([-1.0, 1.0], size=dims)
        signs = [s, -s]
    else:
        while len(signs) < classes:
            s = rng.choice([-1.0, 1.0], size=dims)
            if tuple(s) not in patterns:
                patterns.add(tuple(s))
                signs.append(s)
    centers = 0.5 + 0.5 * margin * np.array(signs)
    rng = _sample_rng(seed, split)
    labels = rng.permutation(np.arange(count) % classes)
    x = centers[labels] + noise * rng.standard_normal((count, dims))
    return Dataset(np.clip(x, 0.0, 1.0), labels, split, classes)


def synthetic_images(classes, count, seed, size=32, channels=3, noise=0.15, split="train"):
    """Image-shaped data: a smooth class template plus pixel noise.

    Used wherever a convolutional model needs something to fit and real
    images are not available.
    """
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size] / size
    templates = []
    for _ in range(classes):
        fx, fy, ph = rng.uniform(0.5, 3.0), rng.uniform(0.5, 3.0), rng.uniform(0, 2 * np.pi, size=channels)
        t = np.stack([0.5 + 0.25 * np.sin(2 * np.pi * (fx * xx + fy * yy) + p) for p in ph])
        templates.append(t)
    templates = np.array(templates)
    rng = _sample_rng(seed, split)
    labels = rng.permutation(np.arange(count) % classes)
    x = templates[labels] + noise * rng.standard_normal((count, channels, size, size))
    return Dataset(np.clip(x, 0.0, 1.0), labels, split, classes)
