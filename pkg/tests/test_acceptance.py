"""Acceptance checks; each test records one PASS/FAIL line (see the terminal summary)."""

import time

import numpy as np
import pytest

from lnsbnn.binarize import binary_conv2d, pack, sign, sign_ste
from lnsbnn.config import ConfigError, parse_config_text
from lnsbnn.corpus import make_digits_corpus
from lnsbnn.data import AugmentSpec, load_idx
from lnsbnn.export import export_binary, load_exported
from lnsbnn.mapping import MappingNet
from lnsbnn.metrics import write_metrics
from lnsbnn.model import LayerSpec, ModelSpec, desk4, init_params
from lnsbnn.noisy_loss import NoiseRates, corrected_loss, corrected_loss_grad, flip_noise_simulate, mse_label_loss
from lnsbnn import tensor as T
from lnsbnn.tensor import BNState, Tensor
from lnsbnn.train import (
    Checkpoint, TrainConfig, compute_gradients, evaluate, finetune, lns_finetune, pretrain_baseline, total_loss,
)

from oracles import grad_rel_err, window_conv2d
from test_train import toy_data, toy_spec


def loss_formula(p, t, rho_pos, rho_neg):
    """Corrected squared loss written out case by case for a single observed label t."""
    if t == 1:
        num = (1 - rho_neg) * (p - 1) ** 2 - rho_pos * (p + 1) ** 2
    else:
        num = (1 - rho_pos) * (p + 1) ** 2 - rho_neg * (p - 1) ** 2
    return num / (1 - rho_pos - rho_neg)


def test_c1_unbiased_corrected_loss(report):
    t0 = time.perf_counter()
    n = 10**6
    worst, failures = 0.0, []
    for k, (rp, rn) in enumerate([(0.05, 0.05), (0.2, 0.2), (0.2, 0.1)]):
        rates = NoiseRates(rp, rn)
        for q in (1.0, -1.0):
            noisy = flip_noise_simulate(np.full(n, q), rates, seed=100 + 2 * k + (q > 0))
            for p in (-0.9, 0.0, 0.5, 1.0):
                vals = corrected_loss(p, noisy, rates)
                # a zero spread means both observed labels give the clean loss exactly
                bound = max(4 * vals.std() / np.sqrt(n), 1e-12)
                err = abs(vals.mean() - float(mse_label_loss(p, q)))
                worst = max(worst, err / bound)
                if err > bound:
                    failures.append((p, q, rp, rn, err, bound))
    elapsed = time.perf_counter() - t0
    ok = not failures and elapsed < 10
    report(1, ok, f"24 cases, worst |mean - clean| = {worst:.2f} x (4 std/sqrt N), {elapsed:.1f}s")
    assert not failures, failures
    assert elapsed < 10


def test_c2_gradient_matches_finite_differences(report):
    t0 = time.perf_counter()
    rate_pairs = [(0.0, 0.0), (0.005, 0.005), (0.05, 0.05), (0.2, 0.2), (0.2, 0.1),
                  (0.1, 0.3), (0.4, 0.0), (0.0, 0.4), (0.3, 0.45), (0.01, 0.02)]
    eps, worst, count = 1e-6, 0.0, 0
    for p in np.linspace(-1.5, 1.5, 5):
        for t in (1, -1):
            for rp, rn in rate_pairs:
                fd = (loss_formula(p + eps, t, rp, rn) - loss_formula(p - eps, t, rp, rn)) / (2 * eps)
                analytic = float(corrected_loss_grad(np.float64(p), t, NoiseRates(rp, rn)))
                worst = max(worst, abs(fd - analytic))
                count += 1
                # the implementation also agrees with the case-by-case formula
                assert float(corrected_loss(p, t, NoiseRates(rp, rn))) == pytest.approx(
                    loss_formula(p, t, rp, rn), rel=1e-12, abs=1e-12)
    elapsed = time.perf_counter() - t0
    ok = count == 100 and worst < 1e-6 and elapsed < 1
    report(2, ok, f"{count} grid points, max |analytic - FD| = {worst:.2e}, {elapsed:.3f}s")
    assert count == 100
    assert worst < 1e-6
    assert elapsed < 1


def test_c3_zero_noise_reduces_to_mse(report):
    rng = np.random.default_rng(3)
    p = rng.normal(size=10_000) * 2
    q = np.where(rng.random(10_000) < 0.5, 1.0, -1.0)
    rates = NoiseRates(0.0, 0.0)
    loss_same = np.array_equal(corrected_loss(p, q, rates), (p - q) ** 2)
    grad_same = np.array_equal(corrected_loss_grad(p, q, rates), 2 * (p - q))
    report(3, loss_same and grad_same, f"bitwise loss equal={loss_same}, gradient equal={grad_same}")
    assert loss_same and grad_same


def test_c4_packed_kernel_is_bit_exact(report):
    rng = np.random.default_rng(4)
    t0 = time.perf_counter()
    mismatched, done = 0, 0
    while done < 200:
        n, c, o = (int(rng.integers(1, m + 1)) for m in (4, 8, 8))
        k = int(rng.integers(1, 4))
        stride, pad = int(rng.choice([1, 2])), int(rng.choice([0, 1]))
        h = int(rng.integers(max(k - 2 * pad, 1), 17))
        h -= (h + 2 * pad - k) % stride  # keep the output grid exact
        if h < 1:
            continue
        w = h if rng.random() < 0.5 else h + stride if h + stride <= 16 else h
        x = np.where(rng.random((n, c, h, w)) < 0.5, 1, -1).astype(np.int64)
        wt = np.where(rng.random((o, c, k, k)) < 0.5, 1, -1).astype(np.int64)
        oracle = window_conv2d(x, wt, stride, pad, pad_value=-1)
        got = binary_conv2d(pack(x), pack(wt), stride, pad)
        mismatched += got.shape != oracle.shape or not np.array_equal(got, oracle)
        done += 1
    elapsed = time.perf_counter() - t0
    ok = mismatched == 0 and elapsed < 30
    report(4, ok, f"{done} random cases, {mismatched} mismatches, {elapsed:.1f}s")
    assert mismatched == 0
    assert elapsed < 30


class _Linearizer:
    """Records the base point of every piecewise operation, then replays it linearly.

    On the first (analytic) pass ``sign`` uses the straight-through backward
    and ``relu``/``hardtanh`` are the library ops; each input is remembered.
    On later passes every such op is replaced by its linear piece at the
    remembered input: ``sign(x0) + (x - x0)`` for sign, the base-point mask
    for relu and hardtanh. Finite differences of the replayed loss are then
    free of kink crossings and measure the derivative the backward pass is
    supposed to produce.
    """

    def __init__(self, relu, hardtanh, clip=True):
        self._relu, self._hardtanh, self.clip = relu, hardtanh, clip
        self.anchors, self.replay, self.i = [], False, 0

    def _next(self):
        x0 = self.anchors[self.i]
        self.i += 1
        return x0

    def sign(self, x):
        if not self.replay:
            self.anchors.append(x.data.copy())
            return sign_ste(x, clip=self.clip)
        x0 = self._next()
        return Tensor(sign(x0) + (x.data - x0), dtype=np.float64)

    def relu(self, x):
        if not self.replay:
            self.anchors.append(x.data.copy())
            return self._relu(x)
        return Tensor(np.where(self._next() > 0, x.data, 0.0), dtype=np.float64)

    def hardtanh(self, x):
        if not self.replay:
            self.anchors.append(x.data.copy())
            return self._hardtanh(x)
        x0 = self._next()
        return Tensor(np.where(np.abs(x0) < 1, x.data, np.clip(x0, -1, 1)), dtype=np.float64)

    def restart(self):
        self.replay, self.i = True, 0


def _toy_lns_checkpoint(rng):
    spec = ModelSpec((1, 5, 5), (
        LayerSpec("conv1", "conv", 2, activation="hardtanh"),
        LayerSpec("conv2", "conv", 4, activation="hardtanh", quantized=True),
        LayerSpec("conv3", "conv", 4, activation="relu", quantized=True),
        LayerSpec("fc", "linear", 3),
    ))
    params, _ = init_params(spec, rng)
    params = {k: v.astype(np.float64) for k, v in params.items()}
    for k in params:
        params[k] = params[k] + rng.normal(0, 0.2, params[k].shape)
    for q in spec.quantized:  # keep latent weights clear of the label sign switch
        w = params[f"{q.name}.weight"]
        params[f"{q.name}.weight"] = np.where(np.abs(w) < 0.05, np.sign(w + 1e-12) * 0.05, w)
    bn = {l.name: BNState(np.zeros(l.out_channels), np.ones(l.out_channels)) for l in spec.layers if l.kind == "conv"}
    mapping = {}
    for q in spec.quantized:
        w = params[f"{q.name}.weight"]
        net = MappingNet.init(w.shape[1], rng, latent=w, dtype=np.float64)
        for k in ("w1", "w2", "w3"):
            net.params[k] = net.params[k] + rng.normal(0, 0.1, net.params[k].shape)
        mapping[q.name] = net
    return Checkpoint(spec, params, bn, phase="finetune", mode="lns", mapping=mapping,
                      pretrain_binary={q.name: sign(params[f"{q.name}.weight"]) for q in spec.quantized})


def test_c5_end_to_end_gradients(report, monkeypatch):
    rng = np.random.default_rng(5)
    ck = _toy_lns_checkpoint(rng)
    x = rng.normal(size=(6, 1, 5, 5))
    y = np.array([0, 1, 2, 0, 1, 2])
    cfg = TrainConfig(alpha=1.0, rates=NoiseRates(0.05, 0.02))

    def gradients(clip):
        lin = _Linearizer(T.relu, T.hardtanh, clip)
        with monkeypatch.context() as m:
            m.setattr(T, "relu", lin.relu)
            m.setattr(T, "hardtanh", lin.hardtanh)
            stats, grads, _ = compute_gradients(ck, x, y, cfg, binarize=lin.sign, weight_binarize=lin.sign)
        return lin, stats, grads

    lin, stats, grads = gradients(clip=True)
    # identical gradients without clipping: the straight-through rule acts as the identity here
    _, _, unclipped = gradients(clip=False)
    no_clipping = all(np.array_equal(grads[k], unclipped[k]) for k in grads)

    def loss_at():
        lin.restart()
        with monkeypatch.context() as m:
            m.setattr(T, "relu", lin.relu)
            m.setattr(T, "hardtanh", lin.hardtanh)
            s, _, _ = compute_gradients(ck, x, y, cfg, binarize=lin.sign, weight_binarize=lin.sign)
        return s.total_loss

    eps = 1e-3
    targets = {k: ck.params[k] for k in ck.params}
    targets.update({f"map.{l}.{p}": a for l, net in ck.mapping.items() for p, a in net.params.items()})
    assert set(targets) == set(grads)
    assert loss_at() == pytest.approx(stats.total_loss, rel=1e-12)
    assert stats.total_loss == pytest.approx(total_loss(stats.cls_loss, [stats.aux_loss], 1.0))
    worst, worst_name, checked = 0.0, "", 0
    for name, arr in targets.items():
        num = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            old = arr[idx]
            f = {}
            for k in (-2, -1, 1, 2):
                arr[idx] = old + k * eps
                f[k] = loss_at()
            arr[idx] = old
            # fourth-order central stencil: the two-point one leaves O(eps^2) truncation near 1e-3
            num[idx] = (f[-2] - 8 * f[-1] + 8 * f[1] - f[2]) / (12 * eps)
        checked += arr.size
        err = grad_rel_err(grads[name], num)
        if err > worst:
            worst, worst_name = err, name
    ok = no_clipping and worst < 1e-3
    report(5, ok, f"{checked} components of W and theta, max rel err {worst:.2e} ({worst_name}), "
                  f"STE clip inactive={no_clipping}")
    assert no_clipping
    assert worst < 1e-3


def test_c8_checkpoint_and_export_integrity(report, tmp_path):
    data, test = toy_data(64), toy_data(24, 3)
    pre = pretrain_baseline(toy_spec(), data, TrainConfig(lr=0.05, epochs=2, batch_size=16))
    cfg = TrainConfig(lr=0.01, epochs=3, batch_size=16, seed=1, warm_start_epochs=1)

    def csv_writer(path, save_at=None):
        def on_epoch(ck, recs):
            for r in recs:
                write_metrics(r, path)
            if ck.epoch == save_at:
                ck.save(tmp_path / "mid.ckpt")
        return on_epoch

    straight = lns_finetune(pre, data, cfg, test, csv_writer(tmp_path / "a.csv", save_at=2))
    lns_finetune(Checkpoint.load(tmp_path / "mid.ckpt"), data, cfg, test, csv_writer(tmp_path / "b.csv"))

    def epoch3_rows(path):
        return [line.rsplit(",", 1)[0] for line in path.read_text().splitlines()[1:] if line.startswith("3,")]

    resumed_same = epoch3_rows(tmp_path / "a.csv") == epoch3_rows(tmp_path / "b.csv") != []
    export_binary(straight, tmp_path / "m.lnsb")
    batch = test.images[:16]
    logits_same = np.array_equal(load_exported(tmp_path / "m.lnsb").logits(batch),
                                 straight.inference_model().logits(batch))
    report(8, resumed_same and logits_same,
           f"resumed epoch-3 CSV rows identical={resumed_same}, exported logits identical={logits_same}")
    assert resumed_same and logits_same


@pytest.mark.parametrize("text,key", [
    ("lns.rho_pos = 0.6\nlns.rho_neg = 0.5\n", "lns.rho_neg"),
    ("lns.rho_pos = 0.5\nlns.rho_neg = 0.5\n", "lns.rho_neg"),
    ("lns.alpha = -0.5\n", "lns.alpha"),
    ("train.lr = 0\n", "train.lr"),
    ("train.lr = -1\n", "train.lr"),
])
def test_c9_hyperparameter_guards(report, text, key):
    with pytest.raises(ConfigError) as e:
        parse_config_text(text)
    ok = e.value.key == key and key in str(e.value)
    report(9, ok, f"{text.strip()!r} rejected naming {e.value.key}")
    assert ok


# ---------------------------------------------------------------------------
# desk-scale ablation: 20-epoch pretrain, then 5 seeds each of simple and LNS fine-tuning
# ---------------------------------------------------------------------------

FT_SEEDS = range(5)


@pytest.fixture(scope="module")
def ablation(tmp_path_factory):
    t0 = time.perf_counter()
    root = tmp_path_factory.mktemp("corpus")
    files = make_digits_corpus(root, n_train=6000, n_test=1000, seed=0)
    train = load_idx(files["train_images"], files["train_labels"], 0.29, 0.30, "train")
    test = load_idx(files["test_images"], files["test_labels"], 0.29, 0.30, "test")
    aug = AugmentSpec(pad=1, crop=12)
    pre = pretrain_baseline(desk4(), train, TrainConfig(lr=0.1, epochs=20, milestones=(10, 15), augment=aug))
    pre_acc = evaluate(pre, test)
    runs = {"simple": [], "lns": []}
    for mode in runs:
        for seed in FT_SEEDS:
            cfg = TrainConfig.cifar_finetune(epochs=10, milestones=(3, 6, 9), seed=seed, augment=aug,
                                             warm_start_epochs=1, flip_vs_pretrain=True)
            recs = []
            ck = finetune(pre, train, cfg, mode, on_epoch=lambda c, r: recs.extend(r))
            runs[mode].append({"acc": evaluate(ck, test), "records": recs})
    return {"pre_acc": pre_acc, "runs": runs, "seconds": time.perf_counter() - t0,
            "sizes": (len(train), len(test), train.num_classes)}


def test_c6_ablation(report, ablation):
    pre = ablation["pre_acc"]
    simple = np.mean([r["acc"] for r in ablation["runs"]["simple"]])
    lns = np.mean([r["acc"] for r in ablation["runs"]["lns"]])
    n_train, n_test, classes = ablation["sizes"]
    minutes = ablation["seconds"] / 60
    # compare correct-prediction counts summed over seeds so ties are exact
    seeds = len(ablation["runs"]["lns"])
    pre_hits = round(pre * n_test) * seeds
    simple_hits = sum(round(r["acc"] * n_test) for r in ablation["runs"]["simple"])
    lns_hits = sum(round(r["acc"] * n_test) for r in ablation["runs"]["lns"])
    checks = {
        "simple >= pretrain": simple_hits >= pre_hits,
        "lns >= pretrain": lns_hits >= pre_hits,
        "lns >= simple - 0.2pp": lns_hits * 1000 >= simple_hits * 1000 - 2 * n_test * seeds,
        "runtime < 30 min": minutes < 30,
        "corpus size": n_train >= 6000 and n_test >= 1000 and classes == 10,
    }
    ok = all(checks.values())
    failed = [k for k, v in checks.items() if not v]
    report(6, ok, f"pretrain {pre:.4f}, simple mean {simple:.4f}, LNS mean {lns:.4f}, {minutes:.1f} min"
                  + (f"; failed: {', '.join(failed)}" if failed else ""))
    assert ok, checks


def test_c7_flip_rate_behaviour(report, ablation):
    per_seed, first_epoch = [], []
    for run in ablation["runs"]["lns"]:
        flips = [r.flip_rate for r in run["records"] if r.split == "train"]
        per_seed.append((np.mean(flips[:3]), np.mean(flips[-3:])))
        first = next(r for r in run["records"] if r.split == "train")
        first_epoch.append(max(first.flip_rate, first.flip_rate_pretrain))
    decreasing = all(last < early for early, last in per_seed)
    small_start = max(first_epoch) < 0.05
    detail = ", ".join(f"{e:.4f}->{l:.4f}" for e, l in per_seed)
    report(7, decreasing and small_start,
           f"LNS mean flip first 3 -> last 3 epochs per seed: {detail}; max first-epoch flip {max(first_epoch):.4f}")
    assert decreasing
    assert small_start
