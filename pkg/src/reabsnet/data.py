"""MNIST-format ingestion, normalization, splits, and the detector's binary dataset.

Images travel as 28x28x1 float32 arrays with pixels in [-0.5, 0.5]; raw IDX
payloads are big-endian per the original format.  Adversarial images generated
for detector training are cached to disk in a small binary container so the
expensive generation step is resumable.
"""

from __future__ import annotations

import csv
import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import CacheFormatError, IdxFormatError

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801

CACHE_MAGIC = b"RBAD"
CACHE_VERSION = 1

NATURAL = 0
ADVERSARIAL = 1


@dataclass
class DatasetSplit:
    train_images: np.ndarray
    train_labels: np.ndarray
    val_images: np.ndarray
    val_labels: np.ndarray
    test_images: np.ndarray
    test_labels: np.ndarray


def _read_exact(f, n: int, offset: int, what: str) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise IdxFormatError(f"truncated file while reading {what}", offset + len(data))
    return data


def _open_maybe_gzip(path):
    f = open(path, "rb")
    head = f.read(2)
    f.seek(0)
    if head == b"\x1f\x8b":
        f.close()
        return gzip.open(path, "rb")
    return f


def load_idx(images_path, labels_path) -> tuple[np.ndarray, np.ndarray]:
    """Parse an IDX image/label file pair; returns (uint8 images NxHxW, labels N).

    Files may be gzip-compressed.  Malformed headers or payloads raise
    IdxFormatError carrying the byte offset of the problem.
    """
    with _open_maybe_gzip(images_path) as f:
        magic, count, rows, cols = struct.unpack(">IIII", _read_exact(f, 16, 0, "image header"))
        if magic != IDX_IMAGE_MAGIC:
            raise IdxFormatError(f"wrong magic 0x{magic:08x} in image file (want 0x{IDX_IMAGE_MAGIC:08x})", 0)
        payload = _read_exact(f, count * rows * cols, 16, "image payload")
        images = np.frombuffer(payload, dtype=np.uint8).reshape(count, rows, cols)
    with _open_maybe_gzip(labels_path) as f:
        magic, label_count = struct.unpack(">II", _read_exact(f, 8, 0, "label header"))
        if magic != IDX_LABEL_MAGIC:
            raise IdxFormatError(f"wrong magic 0x{magic:08x} in label file (want 0x{IDX_LABEL_MAGIC:08x})", 0)
        labels = np.frombuffer(_read_exact(f, label_count, 8, "label payload"), dtype=np.uint8)
    if count != label_count:
        raise IdxFormatError(
            f"image count {count} does not match label count {label_count}", 4)
    return images, labels


def write_idx(images: np.ndarray, labels: np.ndarray, images_path, labels_path) -> None:
    """Serialize uint8 images/labels back to the IDX container (inverse of load_idx)."""
    images = np.ascontiguousarray(images, dtype=np.uint8)
    labels = np.ascontiguousarray(labels, dtype=np.uint8)
    n, rows, cols = images.shape
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGE_MAGIC, n, rows, cols))
        f.write(images.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABEL_MAGIC, len(labels)))
        f.write(labels.tobytes())


def normalize(raw: np.ndarray) -> np.ndarray:
    """Map byte pixels 0..255 to [-0.5, 0.5] float32 with a trailing channel axis."""
    out = (np.asarray(raw, dtype=np.float32) / 255.0) - 0.5
    if out.ndim == 2:
        return out[..., None]
    if out.ndim == 3:
        return out[..., None]
    raise ValueError(f"expected HxW or NxHxW byte images, got shape {raw.shape}")


def denormalize(images: np.ndarray) -> np.ndarray:
    """Inverse of normalize, rounding back to bytes."""
    return np.clip(np.round((images[..., 0] + 0.5) * 255.0), 0, 255).astype(np.uint8)


def split(images: np.ndarray, labels: np.ndarray, seed: int,
          train_size: int = 55_000, val_size: int = 5_000) -> tuple:
    """Deterministic seeded shuffle into (train, validation) partitions."""
    n = len(images)
    if n != train_size + val_size:
        raise ValueError(f"expected {train_size + val_size} examples to split, got {n}")
    order = np.random.default_rng(seed).permutation(n)
    tr, va = order[:train_size], order[train_size:]
    return images[tr], labels[tr], images[va], labels[va]


def load_split(train_images_path, train_labels_path, test_images_path, test_labels_path,
               seed: int, train_size: int = 55_000, val_size: int = 5_000) -> DatasetSplit:
    """Load both IDX pairs, normalize, and carve the train/validation partition."""
    raw_train, train_labels = load_idx(train_images_path, train_labels_path)
    raw_test, test_labels = load_idx(test_images_path, test_labels_path)
    tr_x, tr_y, va_x, va_y = split(normalize(raw_train), train_labels.astype(np.int64),
                                   seed=seed, train_size=train_size, val_size=val_size)
    return DatasetSplit(
        train_images=tr_x, train_labels=tr_y,
        val_images=va_x, val_labels=va_y,
        test_images=normalize(raw_test), test_labels=test_labels.astype(np.int64),
    )


def build_guardian_dataset(naturals: np.ndarray, adversarials: np.ndarray,
                           success: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Assemble the balanced natural-vs-adversarial training set.

    `adversarials` are generated one-for-one from `naturals`; pairs whose
    attack failed are dropped together so the classes stay exactly balanced.
    Output interleaves (natural_i, adversarial_i) in source order.
    """
    naturals = np.asarray(naturals)
    adversarials = np.asarray(adversarials)
    success = np.asarray(success, dtype=bool)
    if len(naturals) != len(adversarials) or len(naturals) != len(success):
        raise ValueError("naturals, adversarials and success flags must align one-for-one")
    keep = np.flatnonzero(success)
    if keep.size == 0:
        raise ValueError("no successful adversarial examples to build a detector dataset from")
    images = np.empty((2 * keep.size,) + naturals.shape[1:], dtype=naturals.dtype)
    images[0::2] = naturals[keep]
    images[1::2] = adversarials[keep]
    labels = np.empty(2 * keep.size, dtype=np.int64)
    labels[0::2] = NATURAL
    labels[1::2] = ADVERSARIAL
    return images, labels


# ---------------------------------------------------------------------------
# Adversarial cache: 16-byte header, fixed-width records, bit-exact round-trip
# ---------------------------------------------------------------------------

_HEADER = struct.Struct(">4sIII")  # magic, version, count, flags
_REC_HEAD = struct.Struct("<IB")   # source index, success


@dataclass
class CacheRecord:
    source_index: int
    success: bool
    image: np.ndarray  # flat 784 float32


def write_adversarial_cache(path, records: list[CacheRecord], flags: int = 0) -> None:
    with open(path, "wb") as f:
        f.write(_HEADER.pack(CACHE_MAGIC, CACHE_VERSION, len(records), flags))
        for rec in records:
            image = np.ascontiguousarray(rec.image, dtype="<f4").reshape(-1)
            if image.size != 784:
                raise CacheFormatError(f"record {rec.source_index}: expected 784 pixels, got {image.size}")
            f.write(_REC_HEAD.pack(rec.source_index, 1 if rec.success else 0))
            f.write(image.tobytes())


def read_adversarial_cache(path) -> tuple[list[CacheRecord], int]:
    """Returns (records, flags); truncated or mis-tagged files raise CacheFormatError."""
    record_bytes = _REC_HEAD.size + 784 * 4
    with open(path, "rb") as f:
        head = f.read(_HEADER.size)
        if len(head) != _HEADER.size:
            raise CacheFormatError(f"{path}: truncated header")
        magic, version, count, flags = _HEADER.unpack(head)
        if magic != CACHE_MAGIC:
            raise CacheFormatError(f"{path}: wrong magic {magic!r}")
        if version != CACHE_VERSION:
            raise CacheFormatError(f"{path}: unsupported version {version}")
        body = f.read()
    if len(body) != count * record_bytes:
        raise CacheFormatError(
            f"{path}: payload is {len(body)} bytes, want {count * record_bytes} for {count} records")
    records = []
    for i in range(count):
        chunk = body[i * record_bytes:(i + 1) * record_bytes]
        source_index, success = _REC_HEAD.unpack_from(chunk, 0)
        image = np.frombuffer(chunk, dtype="<f4", count=784, offset=_REC_HEAD.size).copy()
        records.append(CacheRecord(source_index=source_index, success=bool(success), image=image))
    return records, flags


def write_cache_metadata(path, rows: list[dict]) -> None:
    """Per-record attack metadata CSV adjacent to a cache file."""
    fields = ["source_index", "method", "targeted", "success", "l0", "l2", "linf", "iterations"]
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=fields)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row[k] for k in fields})


def read_cache_metadata(path) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))
