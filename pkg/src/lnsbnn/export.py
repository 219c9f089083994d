"""Export of trained checkpoints as bit-packed ``LNSB`` inference models.

Quantized layers are stored as packed +-1 words (``bits``) plus one float32
scale; everything else (first conv, classifier, BN parameters and running
statistics) as float32. Latent weights and mapping networks are dropped.
"""

from __future__ import annotations

import numpy as np

from .binarize import BitTensor
from .fileformat import EXPORT_MAGIC, read_container, write_container
from .model import InferenceModel, ModelSpec


def save_inference_model(model: InferenceModel, path) -> int:
    tensors = []
    for name, bt in model.bits.items():
        tensors.append((f"bits/{name}", bt.words, "bits", list(bt.shape)))
        tensors.append((f"scale/{name}", np.array([model.scales[name]], np.float32), "f32", [1]))
    for name, arr in model.floats.items():
        tensors.append((f"f32/{name}", arr, "f32", list(arr.shape)))
    return write_container(path, EXPORT_MAGIC, tensors, {"kind": "export", "spec": model.spec.to_dict()})


def export_binary(checkpoint, path) -> int:
    """Write ``checkpoint``'s inference model to ``path``; returns the file size."""
    return save_inference_model(checkpoint.inference_model(), path)


def load_exported(path) -> InferenceModel:
    header, arrays = read_container(path, EXPORT_MAGIC)
    spec = ModelSpec.from_dict(header["spec"])
    shapes = {e["name"]: tuple(e["shape"]) for e in header["tensors"]}
    bits, scales, floats = {}, {}, {}
    for name, arr in arrays.items():
        kind, _, rest = name.partition("/")
        if kind == "bits":
            bits[rest] = BitTensor(shapes[name], arr)
        elif kind == "scale":
            scales[rest] = float(arr[0])
        else:
            floats[rest] = arr
    return InferenceModel(spec, floats, bits, scales)
