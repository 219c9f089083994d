"""Per-layer mapping networks that predict binary weights from latent weights.

A layer's latent weight tensor (o, c, k, k) is read as a batch of ``o``
c-channel k x k images and passed through::

    conv(c->2c) -> BN -> ReLU -> conv(2c->2c) -> BN -> ReLU -> conv(2c->c) -> tanh

All convolutions are 3x3, stride 1, padding 1, without bias. Batch norm
always uses the statistics of the ``o`` filters, so the mapping is a
deterministic function of the latent weights.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .binarize import sign, sign_ste
from .noisy_loss import NoiseRates, layer_loss
from .tensor import ShapeError, Tape, Tensor

PARAM_NAMES = ("w1", "g1", "b1", "w2", "g2", "b2", "w3")
INIT_NOISE = 1e-3


@dataclass
class MappingNet:
    """Parameters of one mapping network, keyed by :data:`PARAM_NAMES`."""

    params: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def channels(self) -> int:
        return self.params["w1"].shape[1]

    @classmethod
    def init(
        cls,
        channels: int,
        rng: np.random.Generator,
        latent: np.ndarray | None = None,
        dtype=np.float32,
    ) -> "MappingNet":
        """Near-passthrough initialization.

        Layer 1 splits each channel into positive and negative copies, layer 2
        recombines them into the signed value and its negation, layer 3 takes
        their difference. Without ``latent`` the output sign follows each
        latent weight relative to its channel mean. With ``latent``, the batch
        norm shifts are set so that centering is undone for these weights and
        ``sign(f(W))`` starts out equal to ``sign(W)`` up to the init noise.
        """
        c = channels
        eye = np.eye(c)

        def noise(*shape):
            return rng.uniform(-INIT_NOISE, INIT_NOISE, size=shape)

        w1 = noise(2 * c, c, 3, 3)
        w1[:, :, 1, 1] += np.concatenate([eye, -eye])
        w2 = noise(2 * c, 2 * c, 3, 3)
        w2[:, :, 1, 1] += np.block([[eye, -eye], [-eye, eye]])
        w3 = noise(c, 2 * c, 3, 3)
        w3[:, :, 1, 1] += np.concatenate([eye, -eye], axis=1)
        params = {
            "w1": w1, "g1": np.ones(2 * c), "b1": np.zeros(2 * c),
            "w2": w2, "g2": np.ones(2 * c), "b2": np.zeros(2 * c),
            "w3": w3,
        }
        net = cls({k: v.astype(dtype) for k, v in params.items()})
        if latent is not None:
            net._uncenter(latent)
        return net

    def _uncenter(self, latent: np.ndarray) -> None:
        p = self.params
        eps = T.BN_EPS
        x = latent.astype(np.float64)

        def conv(h, w):
            return T.conv2d(Tensor(h, np.float64), Tensor(w, np.float64), 1, 1).data

        def shift(h):
            mu = h.mean(axis=(0, 2, 3))
            var = h.var(axis=(0, 2, 3))
            return mu / np.sqrt(var + eps), var

        h1 = conv(x, p["w1"])
        b1, var1 = shift(h1)
        p["b1"] = b1.astype(p["b1"].dtype)
        a1 = np.maximum(h1 / np.sqrt(var1 + eps)[None, :, None, None], 0)
        h2 = conv(a1, p["w2"])
        b2, _ = shift(h2)
        p["b2"] = b2.astype(p["b2"].dtype)

    def tensors(self, dtype=None) -> dict[str, Tensor]:
        return {k: Tensor(v, dtype=dtype) for k, v in self.params.items()}

    def copy(self) -> "MappingNet":
        return MappingNet({k: v.copy() for k, v in self.params.items()})


def mapping_forward(latent: Tensor, theta: dict[str, Tensor]) -> Tensor:
    """Real-valued weight predictions in (-1, 1), same shape as ``latent``."""
    if latent.ndim != 4 or latent.shape[1] != theta["w1"].shape[1]:
        raise ShapeError(
            f"mapping_forward: latent {latent.shape} does not match mapping input "
            f"channels {theta['w1'].shape[1]}"
        )
    h, _ = T.batch_norm(T.conv2d(latent, theta["w1"], 1, 1), theta["g1"], theta["b1"])
    h = T.relu(h)
    h, _ = T.batch_norm(T.conv2d(h, theta["w2"], 1, 1), theta["g2"], theta["b2"])
    h = T.relu(h)
    return T.tanh(T.conv2d(h, theta["w3"], 1, 1))


def mapping_binarize(prediction: Tensor) -> Tensor:
    """Sign of the prediction with straight-through backward."""
    return sign_ste(prediction)


def predict_binary(latent: np.ndarray, net: MappingNet) -> np.ndarray:
    """``sign(f(W))`` as a +-1 float32 array, without recording gradients."""
    q = mapping_forward(Tensor(latent), net.tensors())
    return sign(q.data).astype(np.float32)


def warm_start(
    net: MappingNet,
    latent: np.ndarray,
    labels: np.ndarray,
    epochs: int,
    lr: float,
    rates: NoiseRates | None = None,
    steps_per_epoch: int = 1,
    momentum: float = 0.9,
    reduction: str = "mean",
) -> MappingNet:
    """Fit the mapping net alone to the noisy labels with the corrected loss.

    Latent weights are inputs only and are never modified. One epoch is
    ``steps_per_epoch`` full-layer gradient steps.
    """
    if epochs < 0:
        raise ValueError(f"warm_start: epochs must be >= 0, got {epochs}")
    rates = rates or NoiseRates()
    net = net.copy()
    opt = T.SGD(momentum=momentum)
    w = Tensor(latent)
    for _ in range(epochs * steps_per_epoch):
        theta = net.tensors()
        with Tape() as tape:
            tape.watch(*theta.values())
            loss = layer_loss(mapping_forward(w, theta), labels, rates, reduction)
        grads = tape.gradient(loss, list(theta.values()))
        opt.step(net.params, dict(zip(theta.keys(), grads)), lr)
    return net
