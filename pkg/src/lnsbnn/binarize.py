"""Sign binarization, straight-through gradients and bit-packed +-1 tensors.

Packing layout (also the on-disk layout of exported models): elements are
taken in row-major order, element ``i`` lives in 64-bit little-endian word
``i // 64`` at bit ``i % 64``. Bit 1 encodes +1, bit 0 encodes -1, and bits
past the logical length are zero.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError, Tensor, conv_output_size, make_op

WORD_BITS = 64
SCALE_EPS = 1e-8


def sign(x):
    """Elementwise sign with ``sign(0) = +1``; works on arrays and Tensors (no grad)."""
    data = x.data if isinstance(x, Tensor) else np.asarray(x)
    out = np.where(data >= 0, 1, -1).astype(data.dtype if data.dtype.kind == "f" else np.float32)
    return Tensor(out) if isinstance(x, Tensor) else out


def ste_backward(upstream_grad: np.ndarray) -> np.ndarray:
    """Straight-through gradient: the upstream gradient clipped to [-1, 1]."""
    return np.clip(upstream_grad, -1, 1)


def sign_ste(x: Tensor, clip: bool = True) -> Tensor:
    """Differentiable sign: forward ``sign``, backward ``ste_backward``.

    ``clip=False`` passes the gradient through unchanged; tests use it to
    confirm that no clipping happened.
    """
    out = np.where(x.data >= 0, 1, -1).astype(x.dtype)
    if clip:
        return make_op(out, (x,), lambda g: (ste_backward(g),))
    return make_op(out, (x,), lambda g: (g,))


@dataclass(frozen=True)
class BitTensor:
    """Bit-packed logical +-1 tensor."""

    shape: tuple[int, ...]
    words: np.ndarray  # uint64, little-endian on disk

    def __post_init__(self):
        n = int(np.prod(self.shape, dtype=np.int64))
        expected = -(-n // WORD_BITS)
        if self.words.dtype != np.uint64 or self.words.shape != (expected,):
            raise ShapeError(f"BitTensor of shape {self.shape} needs {expected} uint64 words")

    @property
    def size(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64))

    @property
    def nbytes(self) -> int:
        return self.words.nbytes


def pack(x) -> BitTensor:
    """Pack a tensor of exact +-1 values."""
    data = x.data if isinstance(x, Tensor) else np.asarray(x)
    flat = data.reshape(-1)
    bad = np.flatnonzero((flat != 1) & (flat != -1))
    if bad.size:
        i = int(bad[0])
        raise ValueError(f"pack: element {i} is {flat[i]!r}, expected +1 or -1")
    return _pack_bits(flat > 0, data.shape)


def _pack_bits(bits: np.ndarray, shape) -> BitTensor:
    n = bits.size
    nwords = -(-n // WORD_BITS)
    buf = np.zeros(nwords * WORD_BITS, dtype=np.uint8)
    buf[:n] = bits.reshape(-1)
    words = np.packbits(buf, bitorder="little").view("<u8").astype(np.uint64)
    return BitTensor(tuple(int(s) for s in shape), words)


def _unpack_bits(bt: BitTensor) -> np.ndarray:
    raw = bt.words.astype("<u8").view(np.uint8)
    return np.unpackbits(raw, bitorder="little")[: bt.size].reshape(bt.shape)


def unpack(bt: BitTensor) -> Tensor:
    return Tensor(_unpack_bits(bt).astype(np.float32) * 2 - 1)


def _channel_words(bt: BitTensor, pad: int = 0) -> np.ndarray:
    """Re-lay an (n, c, h, w) BitTensor as (n, h+2p, w+2p, words) over channels.

    Padding pixels get all-zero words, i.e. logical -1 on every channel.
    """
    bits = _unpack_bits(bt)  # (n, c, h, w) of 0/1
    n, c, h, w = bits.shape
    nwords = -(-c // WORD_BITS)
    lanes = np.zeros((n, h + 2 * pad, w + 2 * pad, nwords * WORD_BITS), dtype=np.uint8)
    lanes[:, pad:pad + h, pad:pad + w, :c] = bits.transpose(0, 2, 3, 1)
    packed = np.packbits(lanes, axis=-1, bitorder="little")
    return packed.view("<u8").astype(np.uint64)


def binary_conv2d(act: BitTensor, weight: BitTensor, stride: int = 1, padding: int = 0) -> np.ndarray:
    """+-1 convolution by XOR and popcount on packed words.

    Returns an int64 array (n, o, h', w'). Padding contributes logical -1.
    Each kernel tap handles all input channels of one pixel as one word
    group: ``dot = c - 2 * popcount(a XOR w)``.
    """
    if len(act.shape) != 4 or len(weight.shape) != 4 or act.shape[1] != weight.shape[1]:
        raise ShapeError(f"binary_conv2d: activations {act.shape} incompatible with weights {weight.shape}")
    n, c, h, w = act.shape
    o, _, k, k2 = weight.shape
    if k != k2:
        raise ShapeError(f"binary_conv2d: weight {weight.shape} kernel must be square")
    ho = conv_output_size(h, k, stride, padding)
    wo = conv_output_size(w, k, stride, padding)
    a = _channel_words(act, padding)  # (n, H, W, nw)
    kw = _channel_words(weight)  # (o, k, k, nw)
    mismatches = np.zeros((n, ho, wo, o), dtype=np.int64)
    for i in range(k):
        for j in range(k):
            tap = a[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :]
            x = tap[:, :, :, None, :] ^ kw[None, None, None, :, i, j, :]
            mismatches += np.bitwise_count(x).sum(axis=-1, dtype=np.int64)
    out = c * k * k - 2 * mismatches
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def layer_scale(weights) -> float:
    """Layer-wise scale: mean absolute latent weight."""
    data = weights.data if isinstance(weights, Tensor) else np.asarray(weights)
    if data.size == 0:
        raise ValueError("layer_scale: empty weights")
    s = float(np.abs(data).mean())
    if s == 0.0:
        warnings.warn("layer_scale: all-zero weights, using eps", RuntimeWarning, stacklevel=2)
        return SCALE_EPS
    return s
