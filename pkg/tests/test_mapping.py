import numpy as np
import pytest

from lnsbnn.binarize import sign
from lnsbnn.mapping import PARAM_NAMES, MappingNet, mapping_forward, predict_binary, warm_start
from lnsbnn.noisy_loss import NoiseRates, layer_loss
from lnsbnn.tensor import ShapeError, Tape, Tensor
from lnsbnn.train import flip_rate

from oracles import central_diff, grad_rel_err


def test_parameter_shapes(rng):
    net = MappingNet.init(5, rng)
    shapes = {k: v.shape for k, v in net.params.items()}
    assert shapes == {
        "w1": (10, 5, 3, 3), "g1": (10,), "b1": (10,),
        "w2": (10, 10, 3, 3), "g2": (10,), "b2": (10,),
        "w3": (5, 10, 3, 3),
    }
    assert tuple(net.params) == PARAM_NAMES


def test_output_shape_and_range(rng):
    w = rng.normal(0, 0.1, (8, 4, 3, 3)).astype(np.float32)
    q = mapping_forward(Tensor(w), MappingNet.init(4, rng).tensors())
    assert q.shape == w.shape
    assert np.all(np.abs(q.data) < 1)


@pytest.mark.parametrize("shift", [0.0, 0.05])
def test_init_is_near_passthrough(rng, shift):
    # channel offsets are undone when the latent weights are given at init
    w = (rng.normal(0, 0.05, (32, 16, 3, 3)) + shift * rng.normal(size=(1, 16, 1, 1))).astype(np.float32)
    net = MappingNet.init(16, rng, latent=w)
    assert flip_rate(sign(w), predict_binary(w, net)) < 0.05


def test_channel_mismatch(rng):
    with pytest.raises(ShapeError):
        mapping_forward(Tensor(np.zeros((4, 3, 3, 3))), MappingNet.init(2, rng).tensors())


def test_deterministic(rng):
    w = rng.normal(size=(6, 3, 3, 3)).astype(np.float32)
    net = MappingNet.init(3, rng)
    a = mapping_forward(Tensor(w), net.tensors()).data
    b = mapping_forward(Tensor(w), net.tensors()).data
    assert a.tobytes() == b.tobytes()


def test_gradients_match_finite_differences(rng):
    w = rng.normal(0, 0.3, (4, 2, 3, 3))
    net = MappingNet.init(2, rng, dtype=np.float64)
    for k in ("w1", "w2", "w3"):
        net.params[k] = net.params[k] + rng.normal(0, 0.2, net.params[k].shape)
    labels = np.where(rng.random(w.shape) < 0.5, 1.0, -1.0)
    rates = NoiseRates(0.1, 0.05)
    names = list(net.params)
    arrays = [w] + [net.params[k] for k in names]

    def loss_fn(w, *theta):
        return layer_loss(mapping_forward(w, dict(zip(names, theta))), labels, rates, "sum")

    tensors = [Tensor(a, dtype=np.float64) for a in arrays]
    with Tape() as tape:
        tape.watch(*tensors)
        loss = loss_fn(*tensors)
    analytic = tape.gradient(loss, tensors)
    numeric = central_diff(lambda: loss_fn(*[Tensor(a, dtype=np.float64) for a in arrays]).item(), arrays, 1e-6)
    for a, n in zip(analytic, numeric):
        assert grad_rel_err(a, n) < 1e-5


class TestWarmStart:
    def setup_method(self):
        rng = np.random.default_rng(5)
        self.w = rng.normal(0, 0.1, (8, 3, 3, 3)).astype(np.float32)
        self.labels = np.where(rng.random(self.w.shape) < 0.5, 1.0, -1.0).astype(np.float32)
        self.net = MappingNet.init(3, rng, latent=self.w)

    def _loss(self, net):
        return layer_loss(mapping_forward(Tensor(self.w), net.tensors()), self.labels, NoiseRates()).item()

    def test_reduces_loss(self):
        trained = warm_start(self.net, self.w, self.labels, epochs=30, lr=0.05)
        assert self._loss(trained) < self._loss(self.net)

    def test_latent_untouched_and_input_net_unchanged(self):
        w0, p0 = self.w.copy(), {k: v.copy() for k, v in self.net.params.items()}
        warm_start(self.net, self.w, self.labels, epochs=3, lr=0.05)
        np.testing.assert_array_equal(self.w, w0)
        for k in p0:
            np.testing.assert_array_equal(self.net.params[k], p0[k])

    def test_zero_epochs_is_identity(self):
        out = warm_start(self.net, self.w, self.labels, epochs=0, lr=0.05)
        for k in out.params:
            np.testing.assert_array_equal(out.params[k], self.net.params[k])

    def test_negative_epochs(self):
        with pytest.raises(ValueError):
            warm_start(self.net, self.w, self.labels, epochs=-1, lr=0.05)
