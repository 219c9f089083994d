"""Dense tensors and a small reverse-mode autodiff tape.

Operations are plain functions over :class:`Tensor` values. When one or more
:class:`Tape` contexts are active, every operation whose inputs are known to a
tape is recorded there together with a closure computing input gradients.
Replaying the records in reverse execution order gives the chain rule.

Only the operations needed to train small binary CNNs are provided. There is
no general broadcasting engine: elementwise binary ops require equal shapes or
a Python scalar.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

_FLOATS = (np.dtype(np.float32), np.dtype(np.float64))

BN_MOMENTUM = 0.9
BN_EPS = 1e-5


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class DetachedError(LookupError):
    """Raised when a gradient is requested for a value the tape never saw."""


class Tensor:
    """Immutable wrapper around a float32 (or float64) numpy array.

    float64 is kept when passed explicitly; everything else is cast to float32.
    """

    __slots__ = ("data", "__weakref__")

    def __init__(self, data, dtype=None):
        arr = np.asarray(data)
        if dtype is None:
            dtype = arr.dtype if arr.dtype in _FLOATS else np.float32
        arr = np.array(arr, dtype=dtype, copy=True, order="C")
        arr.flags.writeable = False
        self.data = arr

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, -other if not isinstance(other, Tensor) else neg(other))

    def __rsub__(self, other):
        return add(neg(self), other)

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / other)

    def sum(self):
        return tsum(self)

    def mean(self):
        return tmean(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


# ---------------------------------------------------------------------------
# tape
# ---------------------------------------------------------------------------

_state = threading.local()


def _active_tapes() -> list["Tape"]:
    stack = getattr(_state, "tapes", None)
    if stack is None:
        stack = _state.tapes = []
    return stack


@dataclass
class _Record:
    out: Tensor
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Records operations executed inside its ``with`` block.

    Usage::

        with Tape() as tape:
            tape.watch(w)
            loss = cross_entropy(linear(x, w, b), y)
        grads = backward(tape, loss)
    """

    def __init__(self):
        self._records: list[_Record] = []
        self._known: dict[int, Tensor] = {}
        self._watched: dict[int, Tensor] = {}

    def __enter__(self) -> "Tape":
        _active_tapes().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _active_tapes()
        stack.remove(self)

    def watch(self, *tensors: Tensor) -> None:
        for t in tensors:
            if not isinstance(t, Tensor):
                raise TypeError(f"can only watch Tensors, got {type(t).__name__}")
            self._known[id(t)] = t
            self._watched[id(t)] = t

    def watched(self) -> list[Tensor]:
        return list(self._watched.values())

    def _maybe_record(self, out, inputs, backward) -> None:
        if any(id(t) in self._known for t in inputs):
            self._records.append(_Record(out, inputs, backward))
            self._known[id(out)] = out

    def gradient(self, loss: Tensor, sources: Iterable[Tensor]) -> list[np.ndarray]:
        """Gradients of scalar ``loss`` w.r.t. each of ``sources``."""
        sources = list(sources)
        for s in sources:
            if id(s) not in self._known:
                raise DetachedError(f"{s!r} was never watched or produced on this tape")
        grads = self._run(loss)
        return [
            grads[id(s)] if id(s) in grads else np.zeros(s.shape, dtype=s.dtype)
            for s in sources
        ]

    def _run(self, loss: Tensor) -> dict[int, np.ndarray]:
        if not isinstance(loss, Tensor) or loss.size != 1:
            shape = getattr(loss, "shape", None)
            raise ShapeError(f"backward needs a scalar loss, got shape {shape}")
        if id(loss) not in self._known:
            raise DetachedError("loss was not computed on this tape")
        grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=loss.dtype)}
        # records are in execution order, which is already a topological order
        for rec in reversed(self._records):
            g = grads.get(id(rec.out))
            if g is None:
                continue
            for inp, gi in zip(rec.inputs, rec.backward(g)):
                if gi is None or id(inp) not in self._known:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = np.asarray(gi, dtype=inp.dtype)
        return grads


def backward(tape: Tape, loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Gradients of ``loss`` for every tensor watched on ``tape``."""
    watched = tape.watched()
    return dict(zip(watched, tape.gradient(loss, watched)))


def make_op(
    out_data: np.ndarray,
    inputs: Sequence[Tensor],
    backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]],
) -> Tensor:
    """Wrap a forward result and register its backward rule on active tapes.

    ``backward_fn`` receives the upstream gradient and returns one gradient
    (or None) per input.
    """
    dtype = np.result_type(*[t.dtype for t in inputs]) if inputs else np.float32
    arr = np.ascontiguousarray(out_data, dtype=dtype)
    if arr is out_data and not arr.flags.owndata:
        arr = arr.copy()
    arr.flags.writeable = False
    out = object.__new__(Tensor)
    out.data = arr
    inputs = tuple(inputs)
    for tape in _active_tapes():
        tape._maybe_record(out, inputs, backward_fn)
    return out


# ---------------------------------------------------------------------------
# elementwise and reductions
# ---------------------------------------------------------------------------


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


def add(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        _same_shape(a, b, "add")
        return make_op(a.data + b.data, (a, b), lambda g: (g, g))
    return make_op(a.data + b, (a,), lambda g: (g,))


def neg(a: Tensor) -> Tensor:
    return make_op(-a.data, (a,), lambda g: (-g,))


def mul(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        _same_shape(a, b, "mul")
        return make_op(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))
    return make_op(a.data * b, (a,), lambda g: (g * b,))


def tsum(a: Tensor) -> Tensor:
    return make_op(a.data.sum(), (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))


def tmean(a: Tensor) -> Tensor:
    n = a.size
    return make_op(a.data.mean(), (a,), lambda g: (np.full(a.shape, g / n, dtype=a.dtype),))


def square(a: Tensor) -> Tensor:
    return make_op(a.data * a.data, (a,), lambda g: (2 * a.data * g,))


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    return make_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def flatten(a: Tensor) -> Tensor:
    return reshape(a, (a.shape[0], -1))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return make_op(np.where(mask, a.data, 0), (a,), lambda g: (g * mask,))


def prelu(a: Tensor, slope: Tensor) -> Tensor:
    """Per-channel parametric ReLU; ``slope`` has one entry per channel (axis 1)."""
    if slope.ndim != 1 or a.ndim < 2 or slope.shape[0] != a.shape[1]:
        raise ShapeError(f"prelu: slope {slope.shape} does not match channels of {a.shape}")
    bshape = (1, -1) + (1,) * (a.ndim - 2)
    s = slope.data.reshape(bshape)
    pos = a.data > 0
    out = np.where(pos, a.data, s * a.data)
    axes = tuple(i for i in range(a.ndim) if i != 1)

    def bwd(g):
        ga = np.where(pos, g, g * s)
        gs = np.where(pos, 0, g * a.data).sum(axis=axes)
        return ga, gs

    return make_op(out, (a, slope), bwd)


def hardtanh(a: Tensor) -> Tensor:
    inside = (a.data > -1) & (a.data < 1)
    return make_op(np.clip(a.data, -1, 1), (a,), lambda g: (g * inside,))


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.data)
    return make_op(t, (a,), lambda g: (g * (1 - t * t),))


def global_avg_pool(a: Tensor) -> Tensor:
    """(n, c, h, w) -> (n, c)."""
    n, c, h, w = a.shape
    return make_op(
        a.data.mean(axis=(2, 3)),
        (a,),
        lambda g: (np.broadcast_to(g[:, :, None, None] / (h * w), a.shape).copy(),),
    )


# ---------------------------------------------------------------------------
# convolution, linear, normalization
# ---------------------------------------------------------------------------


def pad2d(a: Tensor, padding: int, value: float = 0.0) -> Tensor:
    """Constant-pad the two trailing spatial axes."""
    if padding == 0:
        return a
    p = padding
    out = np.pad(a.data, ((0, 0), (0, 0), (p, p), (p, p)), constant_values=value)
    return make_op(out, (a,), lambda g: (g[:, :, p:-p, p:-p],))


def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    span = size + 2 * padding - k
    if span < 0 or span % stride:
        raise ShapeError(
            f"conv: extent {size} with kernel {k}, stride {stride}, padding {padding} "
            "does not tile evenly"
        )
    return span // stride + 1


def _windows(x: np.ndarray, k: int, stride: int) -> np.ndarray:
    # (n, c, h, w) -> (n, c, h', w', k, k) view
    win = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def conv2d(x: Tensor, weight: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of (n, c, h, w) input with (o, c, k, k) weight."""
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with weight {weight.shape}")
    if weight.shape[2] != weight.shape[3]:
        raise ShapeError(f"conv2d: weight {weight.shape} kernel must be square")
    if stride < 1 or padding < 0:
        raise ValueError(f"conv2d: bad stride {stride} / padding {padding}")
    n, c, h, w = x.shape
    k = weight.shape[2]
    ho = conv_output_size(h, k, stride, padding)
    wo = conv_output_size(w, k, stride, padding)
    p = padding
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    o = weight.shape[0]
    rows = n * ho * wo
    # im2col: (n, h', w', c, k, k) flattened to (rows, c*k*k)
    cols = _windows(xp, k, stride).transpose(0, 2, 3, 1, 4, 5).reshape(rows, c * k * k)
    wmat = weight.data.reshape(o, c * k * k)
    out = (cols @ wmat.T).reshape(n, ho, wo, o).transpose(0, 3, 1, 2)

    def bwd(g):
        gm = g.transpose(0, 2, 3, 1).reshape(rows, o)
        gw = (gm.T @ cols).reshape(weight.shape)
        gcols = (gm @ wmat).reshape(n, ho, wo, c, k, k)
        gxp = np.zeros(xp.shape, dtype=gcols.dtype)
        # col2im: scatter each kernel tap back onto the padded input
        for i in range(k):
            for j in range(k):
                gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += gcols[..., i, j].transpose(0, 3, 1, 2)
        gx = gxp[:, :, p:p + h, p:p + w] if p else gxp
        return gx, gw

    return make_op(np.ascontiguousarray(out), (x, weight), bwd)


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """``x @ weight.T + bias`` for (n, d) input and (m, d) weight."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    if bias.shape != (weight.shape[0],):
        raise ShapeError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
    out = x.data @ weight.data.T + bias.data
    return make_op(out, (x, weight, bias), lambda g: (g @ weight.data, g.T @ x.data, g.sum(axis=0)))


@dataclass(frozen=True)
class BNState:
    """Running statistics for batch normalization."""

    mean: np.ndarray
    var: np.ndarray

    @classmethod
    def fresh(cls, channels: int, dtype=np.float32) -> "BNState":
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype))


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    state: BNState | None = None,
    training: bool = True,
    eps: float = BN_EPS,
    momentum: float = BN_MOMENTUM,
) -> tuple[Tensor, BNState | None]:
    """Normalize per channel (axis 1) over every other axis.

    Returns the output and the updated running state. In training mode the
    batch statistics are used and, when ``state`` is given, folded into a new
    state by exponential moving average. Eval mode requires ``state``.
    """
    if x.ndim < 2 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ShapeError(f"batch_norm: gamma {gamma.shape}/beta {beta.shape} vs input {x.shape}")
    if eps <= 0:
        raise ValueError("batch_norm: eps must be positive")
    if x.size == 0:
        raise ShapeError("batch_norm: empty batch")
    axes = tuple(i for i in range(x.ndim) if i != 1)
    bshape = (1, -1) + (1,) * (x.ndim - 2)
    gam = gamma.data.reshape(bshape)
    bet = beta.data.reshape(bshape)

    if not training:
        if state is None:
            raise ValueError("batch_norm: eval mode needs running statistics")
        inv = 1.0 / np.sqrt(state.var.reshape(bshape).astype(x.dtype) + eps)
        xhat = (x.data - state.mean.reshape(bshape).astype(x.dtype)) * inv
        out = gam * xhat + bet

        def bwd_eval(g):
            return g * gam * inv, (g * xhat).sum(axis=axes), g.sum(axis=axes)

        return make_op(out, (x, gamma, beta), bwd_eval), state

    mu = x.data.mean(axis=axes, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = gam * xhat + bet

    def bwd(g):
        gxhat = g * gam
        gx = inv * (gxhat - gxhat.mean(axis=axes, keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=axes, keepdims=True))
        return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    new_state = state
    if state is not None:
        bm = mu.reshape(-1).astype(state.mean.dtype)
        bv = var.reshape(-1).astype(state.var.dtype)
        new_state = BNState(
            (momentum * state.mean + (1 - momentum) * bm).astype(state.mean.dtype),
            (momentum * state.var + (1 - momentum) * bv).astype(state.var.dtype),
        )
    return make_op(out, (x, gamma, beta), bwd), new_state


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    labels = np.asarray(labels)
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy: logits must be (n, K), got {logits.shape}")
    n, k = logits.shape
    if n < 1 or labels.shape != (n,):
        raise ShapeError(f"cross_entropy: labels {labels.shape} vs logits {logits.shape}")
    if labels.dtype.kind not in "iu" or labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"cross_entropy: labels must be integers in [0, {k})")
    logp = log_softmax(logits.data)
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()

    def bwd(g):
        p = np.exp(logp)
        p[rows, labels] -= 1
        return (p * (g / n),)

    return make_op(np.asarray(loss, dtype=logits.dtype), (logits,), bwd)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


def sgd_step(
    param: np.ndarray,
    grad: np.ndarray,
    buf: np.ndarray | None,
    lr: float,
    momentum: float = 0.0,
    weight_decay: float = 0.0,
) -> tuple[np.ndarray, np.ndarray]:
    """One SGD-with-momentum update; returns ``(new_param, new_buf)``.

    ``v <- momentum * v + grad + weight_decay * param``; ``param <- param - lr * v``.
    """
    if param.shape != grad.shape:
        raise ShapeError(f"sgd_step: param {param.shape} vs grad {grad.shape}")
    if lr < 0:
        raise ValueError(f"sgd_step: lr must be non-negative, got {lr}")
    d = grad + weight_decay * param if weight_decay else grad
    v = d if buf is None else momentum * buf + d
    v = np.asarray(v, dtype=param.dtype)
    return (param - lr * v).astype(param.dtype), v


class SGD:
    """Momentum SGD over a dict of named numpy parameters."""

    def __init__(self, momentum: float = 0.9, weight_decay: float = 0.0):
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.buffers: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float) -> None:
        for name, g in grads.items():
            params[name], self.buffers[name] = sgd_step(
                params[name], g, self.buffers.get(name), lr, self.momentum, self.weight_decay
            )
