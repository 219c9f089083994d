"""Binary container shared by checkpoints (``LNS1``) and exported models (``LNSB``).

Layout::

    magic        4 bytes
    version      uint16 little-endian
    header_len   uint32 little-endian
    header       UTF-8 JSON, header_len bytes
    payloads     raw little-endian arrays in header order

The JSON header carries a ``tensors`` list of ``{name, shape, dtype, offset,
nbytes}`` (offsets relative to the first payload byte) plus free-form
metadata. dtypes are ``f32`` (float32) and ``bits`` (packed uint64 words).
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1
CHECKPOINT_MAGIC = b"LNS1"
EXPORT_MAGIC = b"LNSB"

_DTYPES = {"f32": np.dtype("<f4"), "bits": np.dtype("<u8")}


class FormatError(ValueError):
    pass


def write_container(path, magic: bytes, tensors: list[tuple[str, np.ndarray, str, list[int]]], meta: dict) -> int:
    """Write ``tensors`` = [(name, array, dtype_tag, logical_shape)]; returns bytes written."""
    entries = []
    blobs = []
    offset = 0
    for name, arr, tag, shape in tensors:
        blob = np.ascontiguousarray(arr, dtype=_DTYPES[tag]).tobytes()
        entries.append({"name": name, "shape": list(shape), "dtype": tag, "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps({**meta, "tensors": entries}, sort_keys=True).encode("utf-8")
    data = magic + struct.pack("<HI", FORMAT_VERSION, len(header)) + header + b"".join(blobs)
    Path(path).write_bytes(data)
    return len(data)


def read_container(path, magic: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    """Return ``(header, arrays)``; bit payloads come back as flat uint64 words."""
    raw = Path(path).read_bytes()
    if raw[:4] != magic:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}, expected {magic!r}")
    if len(raw) < 10:
        raise FormatError(f"{path}: truncated preamble")
    version, hlen = struct.unpack("<HI", raw[4:10])
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported format version {version}")
    if len(raw) < 10 + hlen:
        raise FormatError(f"{path}: truncated header")
    header = json.loads(raw[10:10 + hlen].decode("utf-8"))
    base = 10 + hlen
    arrays = {}
    for e in header["tensors"]:
        start = base + e["offset"]
        if start + e["nbytes"] > len(raw):
            raise FormatError(f"{path}: payload for {e['name']} is truncated")
        arr = np.frombuffer(raw, dtype=_DTYPES[e["dtype"]], count=e["nbytes"] // _DTYPES[e["dtype"]].itemsize, offset=start)
        if e["dtype"] == "f32":
            arr = arr.astype(np.float32).reshape(e["shape"])
        else:
            arr = arr.astype(np.uint64)
        arrays[e["name"]] = arr
    return header, arrays
