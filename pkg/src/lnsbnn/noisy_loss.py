"""Class-conditional label noise and the unbiased corrected squared loss.

Noisy labels are +-1. ``rho_pos`` is the probability that a true +1 is seen
as -1, ``rho_neg`` the probability that a true -1 is seen as +1. The corrected
loss for an observed label ``t``::

    ((1 - rho[-t]) * l(p, t) - rho[t] * l(p, -t)) / (1 - rho_pos - rho_neg)

with ``l(p, q) = (p - q)**2``. Its expectation under the noise equals the
clean loss; individual values may be negative.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError, Tensor, make_op


@dataclass(frozen=True)
class NoiseRates:
    rho_pos: float = 0.005
    rho_neg: float = 0.005

    def __post_init__(self):
        if not (self.rho_pos >= 0 and self.rho_neg >= 0):
            raise ValueError(f"noise rates must be non-negative, got {self.rho_pos}, {self.rho_neg}")
        if self.rho_pos + self.rho_neg >= 1:
            raise ValueError(
                f"rho_pos + rho_neg must be < 1, got {self.rho_pos} + {self.rho_neg}"
            )

    @classmethod
    def symmetric(cls, rho: float) -> "NoiseRates":
        return cls(rho, rho)

    @property
    def denom(self) -> float:
        return 1.0 - self.rho_pos - self.rho_neg

    def rate_for(self, label):
        """Rate indexed by label sign: rho_pos where label is +1, rho_neg where -1."""
        return np.where(np.asarray(label) > 0, self.rho_pos, self.rho_neg)


def _check_labels(label) -> np.ndarray:
    q = np.asarray(label)
    if not np.all((q == 1) | (q == -1)):
        raise ValueError("labels must be +1 or -1")
    return q


def mse_label_loss(prediction, label):
    """``(prediction - label)**2``; vectorized over arrays."""
    q = _check_labels(label)
    return (np.asarray(prediction) - q) ** 2


def corrected_loss(prediction, noisy_label, rates: NoiseRates):
    q = _check_labels(noisy_label)
    p = np.asarray(prediction)
    rho_same = rates.rate_for(q)
    rho_other = rates.rate_for(-q)
    return ((1 - rho_other) * (p - q) ** 2 - rho_same * (p + q) ** 2) / rates.denom


def corrected_loss_grad(prediction, noisy_label, rates: NoiseRates):
    """Derivative of :func:`corrected_loss` w.r.t. the prediction."""
    q = _check_labels(noisy_label)
    p = np.asarray(prediction)
    return 2 * (p - q) - 4 * rates.rate_for(q) * q / rates.denom


def layer_loss(predictions: Tensor, noisy_labels, rates: NoiseRates, reduction: str = "mean") -> Tensor:
    """Corrected loss over a whole layer of predictions, as a tape operation.

    The backward pass uses the closed-form per-element gradient.
    """
    labels = noisy_labels.data if isinstance(noisy_labels, Tensor) else np.asarray(noisy_labels)
    if predictions.shape != labels.shape:
        raise ShapeError(f"layer_loss: predictions {predictions.shape} vs labels {labels.shape}")
    if reduction not in ("mean", "sum"):
        raise ValueError(f"reduction must be 'mean' or 'sum', got {reduction!r}")
    labels = _check_labels(labels)
    p = predictions.data
    per = corrected_loss(p, labels, rates)
    n = per.size if reduction == "mean" else 1
    total = per.sum() / n

    def bwd(g):
        return ((g / n) * corrected_loss_grad(p, labels, rates).astype(p.dtype),)

    return make_op(np.asarray(total, dtype=p.dtype), (predictions,), bwd)


def flip_noise_simulate(clean, rates: NoiseRates, seed: int) -> np.ndarray:
    """Flip +1 -> -1 with prob ``rho_pos`` and -1 -> +1 with prob ``rho_neg``."""
    q = _check_labels(clean.data if isinstance(clean, Tensor) else clean)
    rng = np.random.default_rng(seed)
    u = rng.random(q.shape)
    flip = u < rates.rate_for(q)
    return np.where(flip, -q, q)
