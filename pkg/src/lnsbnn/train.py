"""Two-phase training: sign/STE pretraining, then fine-tuning.

Fine-tuning comes in two flavours: ``simple`` continues sign/STE training at
the fine-tune schedule, ``lns`` attaches a mapping network to every quantized
layer and adds the noise-corrected auxiliary loss

    total = cls_loss + alpha * sum_i aux_i

where ``aux_i`` compares the mapping prediction ``f(W_i)`` with the noisy
labels ``sign(W_i)``. Both the latent weights and the mapping parameters are
updated by the same SGD step.
"""

from __future__ import annotations

import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Callable

import numpy as np

from . import tensor as T
from .binarize import sign, sign_ste
from .data import AugmentSpec, Dataset, batch_iter
from .fileformat import CHECKPOINT_MAGIC, read_container, write_container
from .mapping import MappingNet, mapping_binarize, mapping_forward, predict_binary, warm_start
from .metrics import MetricsRecord
from .model import InferenceModel, ModelSpec, forward, init_params
from .noisy_loss import NoiseRates, layer_loss
from .tensor import BNState, Tape, Tensor

logger = logging.getLogger(__name__)

NAN_PATIENCE = 3


class DivergenceError(RuntimeError):
    """Training produced non-finite losses; ``checkpoint`` is the last good state."""

    def __init__(self, msg: str, checkpoint: "Checkpoint"):
        super().__init__(msg)
        self.checkpoint = checkpoint


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 0.0
    batch_size: int = 128
    epochs: int = 400
    milestones: tuple[int, ...] = ()
    lr_decay: float = 0.1
    seed: int = 0
    alpha: float = 1.0
    rates: NoiseRates = field(default_factory=NoiseRates)
    reduction: str = "mean"
    warm_start_epochs: int = 5
    warm_start_lr: float | None = None
    frozen_labels: bool = False
    augment: AugmentSpec | None = None
    flip_vs_pretrain: bool = False

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError(f"alpha must be >= 0, got {self.alpha}")
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        # lr = 0 is allowed programmatically for frozen runs; config files demand lr > 0
        if not self.lr >= 0:
            raise ValueError(f"lr must be >= 0, got {self.lr}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.warm_start_epochs < 0:
            raise ValueError(f"warm_start_epochs must be >= 0, got {self.warm_start_epochs}")
        if any(b <= a for a, b in zip(self.milestones, self.milestones[1:])):
            raise ValueError(f"milestones must be strictly increasing, got {self.milestones}")
        if self.reduction not in ("mean", "sum"):
            raise ValueError(f"reduction must be 'mean' or 'sum', got {self.reduction!r}")

    @classmethod
    def cifar_pretrain(cls, **kw) -> "TrainConfig":
        """CIFAR-10 baseline schedule: 400 epochs, batch 128, lr 0.1, momentum 0.9."""
        return cls(**{"lr": 0.1, "batch_size": 128, "epochs": 400, "momentum": 0.9, "weight_decay": 0.0, **kw})

    @classmethod
    def cifar_finetune(cls, **kw) -> "TrainConfig":
        """CIFAR-10 fine-tune schedule: 120 epochs from lr 0.01, x0.1 every 30."""
        base = {"lr": 0.01, "batch_size": 128, "epochs": 120, "milestones": (30, 60, 90), "lr_decay": 0.1,
                "alpha": 1.0, "rates": NoiseRates.symmetric(0.005)}
        return cls(**{**base, **kw})

    def lr_at(self, epoch: int) -> float:
        drops = sum(1 for m in self.milestones if epoch >= m)
        return self.lr * self.lr_decay ** drops

    def to_dict(self) -> dict:
        d = asdict(self)
        d["milestones"] = list(self.milestones)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["milestones"] = tuple(d.get("milestones", ()))
        if isinstance(d.get("rates"), dict):
            d["rates"] = NoiseRates(**d["rates"])
        if isinstance(d.get("augment"), dict):
            d["augment"] = AugmentSpec(**d["augment"])
        return cls(**d)


@dataclass
class Checkpoint:
    """Complete training state.

    ``mode`` is ``"sign"`` when binary weights are ``sign(W)`` and ``"lns"``
    when they come from the per-layer mapping networks.
    """

    spec: ModelSpec
    params: dict[str, np.ndarray]
    bn: dict[str, BNState]
    opt: dict[str, np.ndarray] = field(default_factory=dict)
    phase: str = "pretrain"
    mode: str = "sign"
    mapping: dict[str, MappingNet] = field(default_factory=dict)
    pretrain_binary: dict[str, np.ndarray] = field(default_factory=dict)
    epoch: int = 0
    seed: int = 0
    config: dict = field(default_factory=dict)

    @classmethod
    def initial(cls, spec: ModelSpec, seed: int = 0) -> "Checkpoint":
        params, bn = init_params(spec, np.random.default_rng([seed, 0]))
        return cls(spec, params, bn, seed=seed)

    def copy(self) -> "Checkpoint":
        return replace(
            self,
            params={k: v.copy() for k, v in self.params.items()},
            bn=dict(self.bn),
            opt={k: v.copy() for k, v in self.opt.items()},
            mapping={k: v.copy() for k, v in self.mapping.items()},
            pretrain_binary={k: v.copy() for k, v in self.pretrain_binary.items()},
            config=dict(self.config),
        )

    def binary_weights(self) -> dict[str, np.ndarray]:
        out = {}
        for q in self.spec.quantized:
            w = self.params[f"{q.name}.weight"]
            out[q.name] = predict_binary(w, self.mapping[q.name]) if self.mode == "lns" else sign(w)
        return out

    def inference_model(self) -> InferenceModel:
        return InferenceModel.build(self.spec, self.params, self.bn, self.binary_weights())

    # -- persistence ---------------------------------------------------------

    def save(self, path) -> int:
        tensors = []

        def add(name, arr):
            arr = np.asarray(arr, dtype=np.float32)
            tensors.append((name, arr, "f32", list(arr.shape)))

        for k, v in self.params.items():
            add(f"param/{k}", v)
        for k, s in self.bn.items():
            add(f"bn/{k}/mean", s.mean)
            add(f"bn/{k}/var", s.var)
        for k, v in self.opt.items():
            add(f"opt/{k}", v)
        for layer, net in self.mapping.items():
            for k, v in net.params.items():
                add(f"map/{layer}/{k}", v)
        for k, v in self.pretrain_binary.items():
            add(f"pretrain_sign/{k}", v)
        meta = {
            "kind": "checkpoint",
            "spec": self.spec.to_dict(),
            "phase": self.phase,
            "mode": self.mode,
            "epoch": self.epoch,
            "config": self.config,
            "rng": {"seed": self.seed, "next_epoch": self.epoch, "bit_generator":
                    np.random.default_rng([self.seed, self.epoch]).bit_generator.state},
        }
        return write_container(path, CHECKPOINT_MAGIC, tensors, meta)

    @classmethod
    def load(cls, path) -> "Checkpoint":
        header, arrays = read_container(path, CHECKPOINT_MAGIC)
        ck = cls(
            ModelSpec.from_dict(header["spec"]), {}, {},
            phase=header["phase"], mode=header["mode"], epoch=header["epoch"],
            seed=header["rng"]["seed"], config=header.get("config", {}),
        )
        bn_parts: dict[str, dict[str, np.ndarray]] = {}
        for name, arr in arrays.items():
            kind, _, rest = name.partition("/")
            if kind == "param":
                ck.params[rest] = arr
            elif kind == "bn":
                layer, stat = rest.rsplit("/", 1)
                bn_parts.setdefault(layer, {})[stat] = arr
            elif kind == "opt":
                ck.opt[rest] = arr
            elif kind == "map":
                layer, p = rest.rsplit("/", 1)
                ck.mapping.setdefault(layer, MappingNet()).params[p] = arr
            elif kind == "pretrain_sign":
                ck.pretrain_binary[rest] = arr
        ck.bn = {k: BNState(v["mean"], v["var"]) for k, v in bn_parts.items()}
        return ck


# ---------------------------------------------------------------------------
# losses and metrics helpers
# ---------------------------------------------------------------------------


def total_loss(cls_loss, aux_losses, alpha: float):
    """``cls_loss + alpha * sum(aux_losses)``; works on floats and Tensors."""
    if alpha < 0:
        raise ValueError(f"alpha must be >= 0, got {alpha}")
    if alpha == 0 or not aux_losses:
        return cls_loss
    aux = aux_losses[0]
    for a in aux_losses[1:]:
        aux = aux + a
    return cls_loss + aux * alpha


def flip_rate(before, after) -> float:
    """Fraction of +-1 entries that differ; dicts are pooled over all layers."""
    if isinstance(before, dict):
        if before.keys() != after.keys():
            raise ValueError(f"layer sets differ: {sorted(before)} vs {sorted(after)}")
        pairs = [(np.asarray(before[k]), np.asarray(after[k])) for k in before]
    else:
        pairs = [(np.asarray(before), np.asarray(after))]
    changed = total = 0
    for b, a in pairs:
        if b.shape != a.shape:
            raise T.ShapeError(f"flip_rate: shapes {b.shape} and {a.shape} differ")
        changed += int(np.count_nonzero(b != a))
        total += b.size
    return changed / total if total else 0.0


@dataclass
class StepStats:
    cls_loss: float
    aux_loss: float
    total_loss: float
    correct: int
    count: int


def compute_gradients(
    ck: Checkpoint,
    x: np.ndarray,
    y: np.ndarray,
    cfg: TrainConfig,
    binarize: Callable[[Tensor], Tensor] = sign_ste,
    weight_binarize: Callable[[Tensor], Tensor] | None = None,
) -> tuple[StepStats, dict[str, np.ndarray], dict[str, BNState]]:
    """Forward + backward on one batch in training mode.

    Returns stats, gradients keyed by parameter name (mapping parameters as
    ``map.<layer>.<param>``) and the updated BN running states. Nothing in
    ``ck`` is modified. ``binarize``/``weight_binarize`` replace the
    activation and weight sign functions (tests use this hook).
    """
    weight_binarize = weight_binarize or (mapping_binarize if ck.mode == "lns" else sign_ste)
    params = {k: Tensor(v) for k, v in ck.params.items()}
    theta = {
        f"map.{layer}.{k}": t
        for layer, net in ck.mapping.items() if ck.mode == "lns"
        for k, t in net.tensors().items()
    }
    with Tape() as tape:
        tape.watch(*params.values(), *theta.values())
        bw = {}
        aux = []
        for q in ck.spec.quantized:
            w = params[f"{q.name}.weight"]
            if ck.mode == "lns":
                if q.name not in ck.mapping:
                    raise KeyError(f"no mapping network for quantized layer {q.name}")
                th = {k.rsplit(".", 1)[1]: t for k, t in theta.items() if k.startswith(f"map.{q.name}.")}
                pred = mapping_forward(w, th)
                labels = ck.pretrain_binary[q.name] if cfg.frozen_labels else sign(w.data)
                aux.append(layer_loss(pred, labels, cfg.rates, cfg.reduction))
                bw[q.name] = weight_binarize(pred)
            else:
                bw[q.name] = weight_binarize(w)
        logits, new_bn = forward(ck.spec, params, ck.bn, Tensor(x, dtype=params_dtype(ck)), bw, True, binarize)
        cls = T.cross_entropy(logits, y)
        loss = total_loss(cls, aux, cfg.alpha)
    names = list(params) + list(theta)
    grads = dict(zip(names, tape.gradient(loss, [*params.values(), *theta.values()])))
    aux_val = float(sum(a.item() for a in aux))
    stats = StepStats(cls.item(), aux_val, loss.item(),
                      int((logits.data.argmax(axis=1) == y).sum()), len(y))
    return stats, grads, new_bn


def params_dtype(ck: Checkpoint):
    return next(iter(ck.params.values())).dtype


def apply_gradients(ck: Checkpoint, opt: T.SGD, grads: dict[str, np.ndarray], lr: float) -> None:
    plain = {k: g for k, g in grads.items() if not k.startswith("map.")}
    opt.step(ck.params, plain, lr)
    for layer, net in ck.mapping.items():
        prefix = f"map.{layer}."
        sub = {k[len(prefix):]: g for k, g in grads.items() if k.startswith(prefix)}
        if sub:
            named = {prefix + k: v for k, v in net.params.items()}
            opt.step(named, {prefix + k: g for k, g in sub.items()}, lr)
            net.params.update({k[len(prefix):]: v for k, v in named.items()})


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def _eval_threads() -> int:
    try:
        return max(1, int(os.environ.get("LNS_THREADS", "1")))
    except ValueError:
        return 1


def evaluate_model(model: InferenceModel, data: Dataset, batch_size: int = 500,
                   threads: int | None = None) -> tuple[float, float]:
    """Return ``(accuracy, mean cross-entropy)`` of an inference model."""
    if len(data) == 0:
        raise ValueError("evaluate: empty dataset")
    threads = threads or _eval_threads()
    starts = list(range(0, len(data), batch_size))

    def run(s):
        x, y = data.images[s:s + batch_size], data.labels[s:s + batch_size]
        logits = model.logits(x)
        logp = T.log_softmax(logits.astype(np.float64))
        return int((logits.argmax(axis=1) == y).sum()), float(-logp[np.arange(len(y)), y].sum())

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            parts = list(pool.map(run, starts))
    else:
        parts = [run(s) for s in starts]
    # reduce in batch order so the result does not depend on scheduling
    correct = sum(p[0] for p in parts)
    nll = 0.0
    for p in parts:
        nll += p[1]
    return correct / len(data), nll / len(data)


def evaluate(checkpoint: Checkpoint | InferenceModel, data: Dataset) -> float:
    """Top-1 accuracy through the bit-packed inference path."""
    model = checkpoint if isinstance(checkpoint, InferenceModel) else checkpoint.inference_model()
    return evaluate_model(model, data)[0]


# ---------------------------------------------------------------------------
# training loops
# ---------------------------------------------------------------------------

EpochCallback = Callable[[Checkpoint, list[MetricsRecord]], None]


def _aux_now(ck: Checkpoint, cfg: TrainConfig) -> float:
    if ck.mode != "lns":
        return 0.0
    total = 0.0
    for q in ck.spec.quantized:
        w = ck.params[f"{q.name}.weight"]
        labels = ck.pretrain_binary[q.name] if cfg.frozen_labels else sign(w)
        pred = mapping_forward(Tensor(w), ck.mapping[q.name].tensors())
        total += layer_loss(pred, labels, cfg.rates, cfg.reduction).item()
    return total


def _run_epochs(ck: Checkpoint, data: Dataset, cfg: TrainConfig, test: Dataset | None,
                on_epoch: EpochCallback | None) -> Checkpoint:
    if len(data) == 0:
        raise ValueError("training dataset is empty")
    opt = T.SGD(cfg.momentum, cfg.weight_decay)
    opt.buffers = {k: v.copy() for k, v in ck.opt.items()}
    prev = ck.binary_weights()
    last_good = ck.copy()
    nan_streak = 0
    for epoch in range(ck.epoch, cfg.epochs):
        t0 = time.perf_counter()
        lr = cfg.lr_at(epoch)
        cls_sum = aux_sum = tot_sum = 0.0
        correct = count = 0
        for x, y in batch_iter(data, cfg.batch_size, True, cfg.seed, epoch, cfg.augment):
            stats, grads, new_bn = compute_gradients(ck, x, y, cfg)
            if not math.isfinite(stats.total_loss):
                nan_streak += 1
                logger.warning("non-finite loss at epoch %d (%d in a row)", epoch, nan_streak)
                if nan_streak >= NAN_PATIENCE:
                    raise DivergenceError(f"loss diverged at epoch {epoch}", last_good)
                continue
            nan_streak = 0
            if lr > 0:
                # lr = 0 freezes the whole model, running statistics included
                apply_gradients(ck, opt, grads, lr)
                ck.bn = new_bn
            n = stats.count
            cls_sum += stats.cls_loss * n
            aux_sum += stats.aux_loss * n
            tot_sum += stats.total_loss * n
            correct += stats.correct
            count += n
        ck.epoch = epoch + 1
        ck.opt = {k: v.copy() for k, v in opt.buffers.items()}
        cur = ck.binary_weights()
        fr = flip_rate(prev, cur)
        fr_pre = flip_rate(ck.pretrain_binary, cur) if cfg.flip_vs_pretrain and ck.pretrain_binary else None
        prev = cur
        count = max(count, 1)
        records = [MetricsRecord(epoch + 1, "train", cls_sum / count, aux_sum / count, tot_sum / count,
                                 correct / count, fr, lr, time.perf_counter() - t0, fr_pre)]
        if test is not None:
            acc, nll = evaluate_model(ck.inference_model(), test)
            aux = _aux_now(ck, cfg)
            records.append(MetricsRecord(epoch + 1, "test", nll, aux, total_loss(nll, [aux], cfg.alpha)
                                         if ck.mode == "lns" else nll,
                                         acc, fr, lr, time.perf_counter() - t0, fr_pre))
        logger.info("%s epoch %d lr %.4g: %s", ck.phase, epoch + 1, lr,
                    " ".join(f"{r.split} acc {r.accuracy:.4f} loss {r.cls_loss:.4f} flip {r.flip_rate:.4f}"
                             for r in records))
        last_good = ck.copy()
        if on_epoch is not None:
            on_epoch(ck, records)
    return ck


def pretrain_baseline(
    spec: ModelSpec | Checkpoint,
    data: Dataset,
    cfg: TrainConfig,
    test: Dataset | None = None,
    on_epoch: EpochCallback | None = None,
) -> Checkpoint:
    """Train with sign/STE binarization and cross-entropy only.

    Passing a pretrain :class:`Checkpoint` instead of a spec resumes it.
    """
    if isinstance(spec, Checkpoint):
        if spec.phase != "pretrain":
            raise ValueError("can only resume a pretrain checkpoint here")
        ck = spec.copy()
    else:
        ck = Checkpoint.initial(spec, cfg.seed)
    ck.config = {"phase": "pretrain", **cfg.to_dict()}
    return _run_epochs(ck, data, cfg, test, on_epoch)


def _start_finetune(start: Checkpoint, data: Dataset, cfg: TrainConfig, mode: str) -> Checkpoint:
    ck = start.copy()
    ck.phase, ck.mode, ck.epoch, ck.opt, ck.seed = "finetune", mode, 0, {}, cfg.seed
    ck.pretrain_binary = {q.name: sign(ck.params[f"{q.name}.weight"]) for q in ck.spec.quantized}
    if mode == "lns":
        rng = np.random.default_rng([cfg.seed, 2])
        steps = math.ceil(len(data) / cfg.batch_size)
        for q in ck.spec.quantized:
            w = ck.params[f"{q.name}.weight"]
            net = MappingNet.init(w.shape[1], rng, latent=w)
            ck.mapping[q.name] = warm_start(
                net, w, ck.pretrain_binary[q.name], cfg.warm_start_epochs,
                cfg.warm_start_lr if cfg.warm_start_lr is not None else cfg.lr,
                cfg.rates, steps_per_epoch=steps, momentum=cfg.momentum, reduction=cfg.reduction,
            )
    return ck


def finetune(
    start: Checkpoint,
    data: Dataset,
    cfg: TrainConfig,
    mode: str = "lns",
    test: Dataset | None = None,
    on_epoch: EpochCallback | None = None,
) -> Checkpoint:
    """Fine-tune from a pretrain checkpoint, or resume a fine-tune checkpoint."""
    if mode not in ("lns", "simple"):
        raise ValueError(f"unknown fine-tune mode {mode!r}")
    internal = "lns" if mode == "lns" else "sign"
    if start.phase == "pretrain":
        ck = _start_finetune(start, data, cfg, internal)
    elif start.mode != internal:
        raise ValueError(f"checkpoint was fine-tuned in mode {start.mode!r}, not {internal!r}")
    else:
        ck = start.copy()
        missing = [q.name for q in ck.spec.quantized if internal == "lns" and q.name not in ck.mapping]
        if missing:
            raise KeyError(f"checkpoint lacks mapping networks for {missing}")
    ck.config = {"phase": "finetune", "mode": mode, **cfg.to_dict()}
    return _run_epochs(ck, data, cfg, test, on_epoch)


def lns_finetune(start: Checkpoint, data: Dataset, cfg: TrainConfig, test: Dataset | None = None,
                 on_epoch: EpochCallback | None = None) -> Checkpoint:
    return finetune(start, data, cfg, "lns", test, on_epoch)


def simple_finetune(start: Checkpoint, data: Dataset, cfg: TrainConfig, test: Dataset | None = None,
                    on_epoch: EpochCallback | None = None) -> Checkpoint:
    return finetune(start, data, cfg, "simple", test, on_epoch)
