"""Synthetic 10-class IDX corpus built from scikit-learn's bundled 8x8 digits.

Source digits are split into disjoint train/test pools first, then each
pool is resampled with small random affine jitter and pixel noise. The
result is written as four IDX files in the usual MNIST naming scheme.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from scipy import ndimage
from sklearn.datasets import load_digits

from .data import write_idx

FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}


def _jitter(img: np.ndarray, size: int, rng: np.random.Generator) -> np.ndarray:
    big = ndimage.zoom(img, size / img.shape[0], order=1)
    angle = np.deg2rad(rng.uniform(-15, 15))
    scale = rng.uniform(0.85, 1.1)
    cos, sin = np.cos(angle) / scale, np.sin(angle) / scale
    mat = np.array([[cos, -sin], [sin, cos]])
    center = (size - 1) / 2
    shift = rng.uniform(-1.0, 1.0, size=2)
    offset = center - mat @ (center + shift)
    out = ndimage.affine_transform(big, mat, offset=offset, order=1, mode="constant")
    out = out + rng.normal(0, 0.08, size=out.shape)
    return np.clip(out, 0, 1)


def make_digits_corpus(
    out_dir,
    n_train: int = 6000,
    n_test: int = 1000,
    size: int = 12,
    seed: int = 0,
) -> dict[str, Path]:
    """Write the corpus to ``out_dir`` and return the four file paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    digits = load_digits()
    images = digits.images / 16.0
    labels = digits.target
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(labels))
    cut = int(0.75 * len(order))
    pools = {"train": order[:cut], "test": order[cut:]}
    paths = {k: out_dir / v for k, v in FILES.items()}
    for split, n in (("train", n_train), ("test", n_test)):
        pick = rng.choice(pools[split], size=n, replace=True)
        x = np.stack([_jitter(images[i], size, rng) for i in pick])
        write_idx(paths[f"{split}_images"], np.round(x * 255))
        write_idx(paths[f"{split}_labels"], labels[pick])
    return paths
