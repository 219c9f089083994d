"""IDX ingestion, augmentation and deterministic batch iteration."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    """Malformed IDX file; ``offset`` is the byte position of the problem."""

    def __init__(self, path, offset: int, msg: str):
        super().__init__(f"{path}: byte {offset}: {msg}")
        self.path = path
        self.offset = offset


@dataclass
class Dataset:
    images: np.ndarray  # (n, c, h, w) float32
    labels: np.ndarray  # (n,) int64
    split: str = "train"

    def __post_init__(self):
        if self.images.ndim != 4:
            raise ValueError(f"images must be (n, c, h, w), got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and self.labels.min() < 0:
            raise ValueError("labels must be non-negative class indices")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1 if len(self.labels) else 0

    def subset(self, n: int | None) -> "Dataset":
        if n is None or n >= len(self):
            return self
        return Dataset(self.images[:n], self.labels[:n], self.split)


@dataclass(frozen=True)
class AugmentSpec:
    pad: int = 0
    crop: int | None = None
    hflip_prob: float = 0.0

    def __post_init__(self):
        if self.pad < 0:
            raise ValueError(f"augment pad must be >= 0, got {self.pad}")
        if not 0.0 <= self.hflip_prob <= 1.0:
            raise ValueError(f"hflip_prob must be in [0, 1], got {self.hflip_prob}")
        if self.crop is not None and self.crop < 1:
            raise ValueError(f"crop must be positive, got {self.crop}")

    @property
    def is_identity(self) -> bool:
        return self.pad == 0 and self.crop is None and self.hflip_prob == 0.0


def _read_bytes(path) -> bytes:
    path = Path(path)
    raw = path.read_bytes()
    if path.suffix == ".gz":
        raw = gzip.decompress(raw)
    return raw


def read_idx(path, expected_magic: int | tuple[int, ...]) -> np.ndarray:
    allowed = (expected_magic,) if isinstance(expected_magic, int) else tuple(expected_magic)
    raw = _read_bytes(path)
    if len(raw) < 4:
        raise IdxFormatError(path, 0, f"file too short for magic number ({len(raw)} bytes)")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic not in allowed:
        want = " or ".join(f"0x{m:08x}" for m in allowed)
        raise IdxFormatError(path, 0, f"bad magic 0x{magic:08x}, expected {want}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IdxFormatError(path, len(raw), f"truncated header: need {header} bytes")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(dims, dtype=np.int64))
    if len(raw) < header + count:
        raise IdxFormatError(path, len(raw), f"truncated payload: need {header + count} bytes for dims {dims}")
    if len(raw) > header + count:
        raise IdxFormatError(path, header + count, "trailing bytes after payload")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=header).reshape(dims)


def write_idx(path, array: np.ndarray) -> None:
    """Write a uint8 array as IDX (ndim taken from the array)."""
    arr = np.ascontiguousarray(array, dtype=np.uint8)
    magic = 0x00000800 | arr.ndim
    with open(path, "wb") as f:
        f.write(struct.pack(">I", magic))
        f.write(struct.pack(f">{arr.ndim}I", *arr.shape))
        f.write(arr.tobytes())


def _per_channel(values, c: int, name: str) -> np.ndarray:
    v = np.atleast_1d(np.asarray(values, dtype=np.float32))
    if v.size == 1:
        v = np.repeat(v, c)
    if v.size != c:
        raise ValueError(f"{name} has {v.size} entries for {c} channels")
    return v.reshape(1, c, 1, 1)


def load_idx(
    images_path,
    labels_path,
    mean: Sequence[float] | float = 0.0,
    std: Sequence[float] | float = 1.0,
    split: str = "train",
) -> Dataset:
    """Load an IDX image/label pair; pixels go to [0, 1] then ``(x - mean) / std``.

    Image files may be (n, h, w) or (n, h, w, c).
    """
    images = read_idx(images_path, (IDX_IMAGES_MAGIC, IDX_IMAGES_MAGIC + 1))
    labels = read_idx(labels_path, IDX_LABELS_MAGIC)
    if len(images) != len(labels):
        raise ValueError(f"{images_path} has {len(images)} images but {labels_path} has {len(labels)} labels")
    if len(images) == 0:
        raise ValueError(f"{images_path} contains no images")
    x = images[:, None] if images.ndim == 3 else images.transpose(0, 3, 1, 2)
    x = x.astype(np.float32) / 255.0
    c = x.shape[1]
    std_arr = _per_channel(std, c, "std")
    if np.any(std_arr <= 0):
        raise ValueError("std entries must be positive")
    x = (x - _per_channel(mean, c, "mean")) / std_arr
    return Dataset(np.ascontiguousarray(x, dtype=np.float32), labels.astype(np.int64), split)


def augment(image: np.ndarray, spec: AugmentSpec, rng: np.random.Generator) -> np.ndarray:
    """Zero-pad, random crop, random horizontal flip of a (c, h, w) image."""
    c, h, w = image.shape
    crop = spec.crop or h
    p = spec.pad
    if crop > h + 2 * p or crop > w + 2 * p:
        raise ValueError(f"crop {crop} exceeds padded size {(h + 2 * p, w + 2 * p)}")
    padded = np.pad(image, ((0, 0), (p, p), (p, p))) if p else image
    top = int(rng.integers(0, h + 2 * p - crop + 1))
    left = int(rng.integers(0, w + 2 * p - crop + 1))
    out = padded[:, top:top + crop, left:left + crop]
    if spec.hflip_prob > 0 and rng.random() < spec.hflip_prob:
        out = out[:, :, ::-1]
    return np.ascontiguousarray(out)


def epoch_permutation(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


def batch_iter(
    data: Dataset,
    batch_size: int,
    shuffle: bool = True,
    seed: int = 0,
    epoch: int = 0,
    augment_spec: AugmentSpec | None = None,
) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yield ``(images, labels)`` batches; the last partial batch is kept.

    Order and augmentation are a pure function of ``(seed, epoch)``.
    """
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    n = len(data)
    order = epoch_permutation(n, seed, epoch) if shuffle else np.arange(n)
    aug_rng = np.random.default_rng([seed, epoch, 1])
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        x = data.images[idx]
        if augment_spec is not None and not augment_spec.is_identity:
            x = np.stack([augment(img, augment_spec, aug_rng) for img in x])
        yield x, data.labels[idx]
