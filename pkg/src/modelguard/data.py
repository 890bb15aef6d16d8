"""MNIST ingestion from the raw IDX files and the in-memory batch type."""

from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801

DATA_ENV = "MODELGUARD_MNIST"

_SPLITS = {
    "train": ("train-images", "train-labels"),
    "test": ("t10k-images", "t10k-labels"),
}


class IngestionError(Exception):
    """Raised when an IDX file is missing, truncated or carries the wrong magic."""

    def __init__(self, path, reason):
        self.path = Path(path)
        super().__init__(f"{self.path}: {reason}")


@dataclass
class ImageBatch:
    """Images in NHWC layout with values in [0, 1] and integer labels."""

    pixels: np.ndarray
    labels: np.ndarray
    num_classes: int = 10

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.pixels.ndim != 4:
            raise ValueError(f"pixels must be [N,H,W,C], got shape {self.pixels.shape}")
        if len(self.pixels) != len(self.labels):
            raise ValueError("pixels and labels disagree on batch size")
        if self.pixels.size and (self.pixels.min() < 0.0 or self.pixels.max() > 1.0):
            raise ValueError("pixel values must lie in [0, 1]")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in 0..{self.num_classes - 1}")

    def __len__(self):
        return len(self.labels)

    def subset(self, index) -> ImageBatch:
        return ImageBatch(self.pixels[index], self.labels[index], self.num_classes)

    def head(self, n: int) -> ImageBatch:
        return self.subset(slice(0, n))


def default_mnist_root() -> Path:
    return Path(os.environ.get(DATA_ENV, "data/mnist"))


def _find(root: Path, stem: str, kind: str) -> Path:
    # both the canonical "-idx3-ubyte" and the dotted ".idx3-ubyte" spellings are common
    for sep in ("-", "."):
        for suffix in ("", ".gz"):
            candidate = root / f"{stem}{sep}{kind}-ubyte{suffix}"
            if candidate.is_file():
                return candidate
    raise IngestionError(root / f"{stem}-{kind}-ubyte", "file not found")


def read_idx(path, expected_magic: int) -> np.ndarray:
    """Decode one big-endian IDX file of unsigned bytes."""
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    try:
        with opener(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise IngestionError(path, f"unreadable ({exc})") from exc
    if len(raw) < 4:
        raise IngestionError(path, "truncated header")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise IngestionError(path, f"bad magic number 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IngestionError(path, "truncated dimension block")
    shape = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(shape))
    if len(raw) - header != count:
        raise IngestionError(path, f"payload has {len(raw) - header} bytes, header promises {count}")
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(shape)


def _load_split(root: Path, split: str) -> ImageBatch:
    image_stem, label_stem = _SPLITS[split]
    image_path = _find(root, image_stem, "idx3")
    label_path = _find(root, label_stem, "idx1")
    images = read_idx(image_path, IMAGES_MAGIC)
    labels = read_idx(label_path, LABELS_MAGIC)
    if len(images) != len(labels):
        raise IngestionError(label_path, f"{len(labels)} labels for {len(images)} images")
    if labels.max() > 9:
        raise IngestionError(label_path, "label outside 0..9")
    pixels = (images.astype(np.float32) / 255.0)[..., None]
    return ImageBatch(pixels, labels.astype(np.int64), num_classes=10)


def load_mnist(path=None) -> tuple[ImageBatch, ImageBatch]:
    """Return ``(train, test)`` read from the four standard IDX files under ``path``."""
    root = Path(path) if path is not None else default_mnist_root()
    if not root.is_dir():
        raise IngestionError(root, "dataset directory not found")
    return _load_split(root, "train"), _load_split(root, "test")
