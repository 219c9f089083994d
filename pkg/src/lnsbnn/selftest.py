"""Fast property checks runnable from the command line.

Each check returns ``(name, passed, detail)``. They cover the corrected loss
(unbiasedness, gradient, zero-noise reduction), the packed convolution
kernel against a dense +-1 convolution, and tape gradients of the mapping
network against central differences.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .binarize import binary_conv2d, pack
from .mapping import MappingNet, mapping_forward
from .noisy_loss import NoiseRates, corrected_loss, corrected_loss_grad, flip_noise_simulate, layer_loss, mse_label_loss
from .tensor import Tape, Tensor

Result = tuple[str, bool, str]


def check_unbiased(n: int = 200_000, seed: int = 0) -> Result:
    worst = 0.0
    for k, (rp, rn) in enumerate([(0.05, 0.05), (0.2, 0.2), (0.2, 0.1)]):
        rates = NoiseRates(rp, rn)
        for q in (1.0, -1.0):
            noisy = flip_noise_simulate(np.full(n, q), rates, seed + k)
            for p in (-0.9, 0.0, 0.5, 1.0):
                vals = corrected_loss(p, noisy, rates)
                z = abs(vals.mean() - mse_label_loss(p, q)) / (vals.std() / np.sqrt(n) + 1e-300)
                worst = max(worst, z)
    return "corrected loss is unbiased", worst < 4.0, f"max z-score {worst:.2f}"


def check_loss_gradient(seed: int = 0) -> Result:
    rng = np.random.default_rng(seed)
    eps, worst = 1e-6, 0.0
    for _ in range(100):
        p = rng.uniform(-1.5, 1.5)
        q = rng.choice([-1.0, 1.0])
        rp, rn = rng.uniform(0, 0.45, 2)
        rates = NoiseRates(rp, rn)
        num = (corrected_loss(p + eps, q, rates) - corrected_loss(p - eps, q, rates)) / (2 * eps)
        worst = max(worst, abs(num - corrected_loss_grad(p, q, rates)))
    return "corrected loss gradient", worst < 1e-6, f"max abs error {worst:.2e}"


def check_zero_noise(seed: int = 0) -> Result:
    rng = np.random.default_rng(seed)
    p = rng.uniform(-2, 2, 1000)
    q = np.where(rng.random(1000) < 0.5, 1.0, -1.0)
    rates = NoiseRates(0.0, 0.0)
    same = np.array_equal(corrected_loss(p, q, rates), (p - q) ** 2) and np.array_equal(
        corrected_loss_grad(p, q, rates), 2 * (p - q))
    return "zero noise gives plain squared loss", bool(same), "bitwise" if same else "mismatch"


def check_packed_conv(cases: int = 40, seed: int = 0) -> Result:
    rng = np.random.default_rng(seed)
    bad = 0
    for _ in range(cases):
        n, c, o = rng.integers(1, 4), rng.integers(1, 9), rng.integers(1, 6)
        k = int(rng.choice([1, 3]))
        stride, pad = int(rng.choice([1, 2])), int(rng.integers(0, 2))
        size = k + stride * int(rng.integers(0, 5)) - 2 * pad
        if size < 1:
            size += stride * 2
        x = np.where(rng.random((n, c, size, size)) < 0.5, 1.0, -1.0)
        w = np.where(rng.random((o, c, k, k)) < 0.5, 1.0, -1.0)
        try:
            dense = T.conv2d(T.pad2d(Tensor(x, dtype=np.float64), pad, -1.0), Tensor(w, dtype=np.float64), stride, 0)
        except T.ShapeError:
            continue
        got = binary_conv2d(pack(x), pack(w), stride, pad)
        bad += not np.array_equal(got, dense.data.astype(np.int64))
    return "packed conv matches dense +-1 conv", bad == 0, f"{bad} mismatching cases"


def check_mapping_gradient(seed: int = 0) -> Result:
    rng = np.random.default_rng(seed)
    latent = rng.normal(0, 0.1, (4, 3, 3, 3))
    net = MappingNet.init(3, rng, dtype=np.float64)
    labels = np.where(rng.random(latent.shape) < 0.5, 1.0, -1.0)
    rates = NoiseRates(0.05, 0.02)

    def loss_of(w, theta):
        return layer_loss(mapping_forward(w, theta), labels, rates, "sum")

    w = Tensor(latent, dtype=np.float64)
    theta = net.tensors(np.float64)
    with Tape() as tape:
        tape.watch(w, *theta.values())
        loss = loss_of(w, theta)
    grads = tape.gradient(loss, [w, *theta.values()])
    arrays = [latent, *(t.data for t in theta.values())]
    eps, worst = 1e-5, 0.0
    for idx, (arr, g) in enumerate(zip(arrays, grads)):
        flat = arr.ravel()
        for j in rng.choice(flat.size, size=min(5, flat.size), replace=False):
            vals = []
            for delta in (eps, -eps):
                moved = [a.copy() for a in arrays]
                moved[idx].ravel()[j] += delta
                th = {k: Tensor(a, dtype=np.float64) for k, a in zip(theta.keys(), moved[1:])}
                vals.append(loss_of(Tensor(moved[0], dtype=np.float64), th).item())
            num = (vals[0] - vals[1]) / (2 * eps)
            worst = max(worst, abs(num - g.ravel()[j]) / max(abs(num), 1e-3))
    return "mapping network gradients", worst < 1e-4, f"max rel error {worst:.2e}"


CHECKS = (check_unbiased, check_loss_gradient, check_zero_noise, check_packed_conv, check_mapping_gradient)


def run_selftest(echo=print) -> bool:
    ok = True
    for check in CHECKS:
        name, passed, detail = check()
        echo(f"{'PASS' if passed else 'FAIL'}  {name}: {detail}")
        ok &= passed
    return ok
