"""Binary CNN description, dense training forward and packed inference model.

Quantized convolutions binarize their input activations with ``sign`` and pad
with -1, which is exactly what the packed XOR/popcount kernel computes, so the
dense training path and the bit-packed inference path agree.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import tensor as T
from .binarize import BitTensor, binary_conv2d, layer_scale, pack, sign, sign_ste
from .tensor import BNState, Tensor

ACTIVATIONS = ("none", "relu", "prelu", "hardtanh")
SCALE_MODES = ("none", "layer_wise")


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str  # "conv" or "linear"
    out_channels: int
    kernel: int = 3
    stride: int = 1
    padding: int = 1
    activation: str = "none"
    quantized: bool = False

    def __post_init__(self):
        if self.kind not in ("conv", "linear"):
            raise ValueError(f"layer {self.name}: unknown kind {self.kind!r}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"layer {self.name}: unknown activation {self.activation!r}")
        if self.kind == "linear" and self.quantized:
            raise ValueError(f"layer {self.name}: linear layers stay full precision")


@dataclass(frozen=True)
class ModelSpec:
    input_shape: tuple[int, int, int]  # (c, h, w)
    layers: tuple[LayerSpec, ...]
    scale_mode: str = "none"

    def __post_init__(self):
        if not self.layers or self.layers[-1].kind != "linear":
            raise ValueError("model must end with a linear classifier")
        if sum(layer.kind == "linear" for layer in self.layers) != 1:
            raise ValueError("model must have exactly one linear classifier")
        if self.scale_mode not in SCALE_MODES:
            raise ValueError(f"unknown scale_mode {self.scale_mode!r}")

    @property
    def quantized(self) -> list[LayerSpec]:
        return [layer for layer in self.layers if layer.quantized]

    @property
    def num_classes(self) -> int:
        return self.layers[-1].out_channels

    def shapes(self) -> dict[str, tuple[int, ...]]:
        """Weight shape of every layer, keyed by layer name."""
        c, h, w = self.input_shape
        out = {}
        for layer in self.layers:
            if layer.kind == "conv":
                out[layer.name] = (layer.out_channels, c, layer.kernel, layer.kernel)
                h = T.conv_output_size(h, layer.kernel, layer.stride, layer.padding)
                w = T.conv_output_size(w, layer.kernel, layer.stride, layer.padding)
                c = layer.out_channels
            else:
                out[layer.name] = (layer.out_channels, c * h * w)
        return out

    def to_dict(self) -> dict:
        return {
            "input_shape": list(self.input_shape),
            "scale_mode": self.scale_mode,
            "layers": [asdict(layer) for layer in self.layers],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(
            tuple(d["input_shape"]),
            tuple(LayerSpec(**layer) for layer in d["layers"]),
            d.get("scale_mode", "none"),
        )


def desk4(input_shape=(1, 12, 12), num_classes: int = 10, width: int = 16, scale_mode: str = "none") -> ModelSpec:
    """Four-layer binary CNN; first conv and classifier stay full precision."""
    return ModelSpec(
        tuple(input_shape),
        (
            LayerSpec("conv1", "conv", width, activation="hardtanh"),
            LayerSpec("conv2", "conv", 2 * width, activation="hardtanh", quantized=True),
            LayerSpec("conv3", "conv", 2 * width, kernel=4, stride=2, activation="relu", quantized=True),
            LayerSpec("fc", "linear", num_classes),
        ),
        scale_mode,
    )


MODEL_SPECS: dict[str, Callable[..., ModelSpec]] = {"desk4": desk4}


def init_params(spec: ModelSpec, rng: np.random.Generator) -> tuple[dict[str, np.ndarray], dict[str, BNState]]:
    """Fan-in scaled uniform weights, unit BN, zero biases."""
    params: dict[str, np.ndarray] = {}
    bn: dict[str, BNState] = {}
    for layer in spec.layers:
        shape = spec.shapes()[layer.name]
        bound = 1.0 / np.sqrt(np.prod(shape[1:]))
        params[f"{layer.name}.weight"] = rng.uniform(-bound, bound, size=shape).astype(np.float32)
        if layer.kind == "linear":
            params[f"{layer.name}.bias"] = np.zeros(layer.out_channels, np.float32)
            continue
        params[f"{layer.name}.bn.gamma"] = np.ones(layer.out_channels, np.float32)
        params[f"{layer.name}.bn.beta"] = np.zeros(layer.out_channels, np.float32)
        bn[layer.name] = BNState.fresh(layer.out_channels)
        if layer.activation == "prelu":
            params[f"{layer.name}.prelu"] = np.full(layer.out_channels, 0.25, np.float32)
    return params, bn


def _activate(x: Tensor, layer: LayerSpec, params) -> Tensor:
    if layer.activation == "relu":
        return T.relu(x)
    if layer.activation == "hardtanh":
        return T.hardtanh(x)
    if layer.activation == "prelu":
        return T.prelu(x, params[f"{layer.name}.prelu"])
    return x


def scales_for(spec: ModelSpec, params) -> dict[str, float]:
    """Per quantized layer output multiplier (1.0 unless layer-wise scaling)."""
    out = {}
    for layer in spec.quantized:
        w = params[f"{layer.name}.weight"]
        out[layer.name] = layer_scale(w) if spec.scale_mode == "layer_wise" else 1.0
    return out


def forward(
    spec: ModelSpec,
    params: dict[str, Tensor],
    bn: dict[str, BNState],
    x: Tensor,
    binary_weights: dict[str, Tensor],
    training: bool = True,
    binarize: Callable[[Tensor], Tensor] = sign_ste,
) -> tuple[Tensor, dict[str, BNState]]:
    """Dense forward pass; returns logits and updated BN running states.

    ``binary_weights`` maps each quantized layer to its +-1 weights (already
    on the tape if gradients are wanted). ``binarize`` binarizes activations
    entering quantized layers.
    """
    scales = scales_for(spec, {k: v.data for k, v in params.items()})
    new_bn = dict(bn)
    for layer in spec.layers:
        if layer.kind == "linear":
            return T.linear(T.flatten(x), params[f"{layer.name}.weight"], params[f"{layer.name}.bias"]), new_bn
        if layer.quantized:
            xb = T.pad2d(binarize(x), layer.padding, value=-1.0)
            y = T.conv2d(xb, binary_weights[layer.name], layer.stride, 0)
            if scales[layer.name] != 1.0:
                y = y * float(np.float32(scales[layer.name]))
        else:
            y = T.conv2d(x, params[f"{layer.name}.weight"], layer.stride, layer.padding)
        y, new_bn[layer.name] = T.batch_norm(
            y, params[f"{layer.name}.bn.gamma"], params[f"{layer.name}.bn.beta"],
            bn.get(layer.name), training,
        )
        x = _activate(y, layer, params)
    raise AssertionError("unreachable: spec ends with linear")


@dataclass
class InferenceModel:
    """Deployable model: packed +-1 weights for quantized layers, floats elsewhere."""

    spec: ModelSpec
    floats: dict[str, np.ndarray]  # full-precision weights, BN params, running stats
    bits: dict[str, BitTensor]
    scales: dict[str, float] = field(default_factory=dict)

    @classmethod
    def build(
        cls,
        spec: ModelSpec,
        params: dict[str, np.ndarray],
        bn: dict[str, BNState],
        binary_weights: dict[str, np.ndarray],
    ) -> "InferenceModel":
        floats = {}
        for name, value in params.items():
            layer = name.split(".")[0]
            if name.endswith(".weight") and any(q.name == layer for q in spec.quantized):
                continue
            floats[name] = np.asarray(value, np.float32)
        for layer, state in bn.items():
            floats[f"{layer}.bn.running_mean"] = state.mean.astype(np.float32)
            floats[f"{layer}.bn.running_var"] = state.var.astype(np.float32)
        bits = {q.name: pack(binary_weights[q.name]) for q in spec.quantized}
        return cls(spec, floats, bits, scales_for(spec, params))

    def logits(self, x: np.ndarray) -> np.ndarray:
        f = self.floats
        h = Tensor(np.asarray(x, np.float32))
        for layer in self.spec.layers:
            n = layer.name
            if layer.kind == "linear":
                return T.linear(T.flatten(h), Tensor(f[f"{n}.weight"]), Tensor(f[f"{n}.bias"])).data
            if layer.quantized:
                acts = pack(sign(h.data))
                y = binary_conv2d(acts, self.bits[n], layer.stride, layer.padding).astype(np.float32)
                if self.scales[n] != 1.0:
                    y = y * np.float32(self.scales[n])
                y = Tensor(y)
            else:
                y = T.conv2d(h, Tensor(f[f"{n}.weight"]), layer.stride, layer.padding)
            state = BNState(f[f"{n}.bn.running_mean"], f[f"{n}.bn.running_var"])
            y, _ = T.batch_norm(y, Tensor(f[f"{n}.bn.gamma"]), Tensor(f[f"{n}.bn.beta"]), state, training=False)
            h = _activate(y, layer, {k: Tensor(v) for k, v in f.items() if k.endswith(".prelu")})
        raise AssertionError("unreachable: spec ends with linear")

    def predict(self, x: np.ndarray, batch_size: int = 500) -> np.ndarray:
        out = [self.logits(x[i:i + batch_size]).argmax(axis=1) for i in range(0, len(x), batch_size)]
        return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)
