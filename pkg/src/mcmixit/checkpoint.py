"""Binary checkpoint container.

Layout (all integers little-endian)::

    offset  size  field
    0       8     magic b"MCMXCKPT"
    8       4     format version (uint32, currently 1)
    12      8     header length H in bytes (uint64)
    20      H     header: UTF-8 JSON object, keys sorted
    20+H    ...   tensor payload, tensors back to back in header order

The header holds ``model_config``, ``meta`` (free-form JSON: step, train
config, RNG state, ...) and ``tensors``: a list of ``{name, dtype, shape,
offset, nbytes}`` where ``offset`` is relative to the payload start and
``dtype`` is ``"<f4"`` or ``"<f8"``. Tensor names are ``param/<name>`` for
weights and ``adam_m/<name>``, ``adam_v/<name>`` for optimizer moments.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import ModelConfig

__all__ = ["Checkpoint", "CheckpointError", "save_checkpoint", "load_checkpoint", "FORMAT_VERSION"]

MAGIC = b"MCMXCKPT"
FORMAT_VERSION = 1
_DTYPES = {"<f4": np.float32, "<f8": np.float64}


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    model_config: ModelConfig
    params: dict
    adam_m: dict = field(default_factory=dict)
    adam_v: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    @property
    def step(self) -> int:
        return int(self.meta.get("step", 0))


def _entries(prefix, tensors):
    for name in sorted(tensors):
        yield f"{prefix}/{name}", np.asarray(tensors[name])


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    """Write ``ckpt`` atomically (temp file + rename)."""
    blobs, table, offset = [], [], 0
    groups = (("param", ckpt.params), ("adam_m", ckpt.adam_m), ("adam_v", ckpt.adam_v))
    for prefix, tensors in groups:
        for name, arr in _entries(prefix, tensors):
            dt = "<f4" if arr.dtype == np.float32 else "<f8"
            raw = np.ascontiguousarray(arr, dtype=dt).tobytes()
            table.append({"name": name, "dtype": dt, "shape": list(arr.shape),
                          "offset": offset, "nbytes": len(raw)})
            blobs.append(raw)
            offset += len(raw)
    header = json.dumps(
        {"model_config": ckpt.model_config.to_dict(), "meta": ckpt.meta, "tensors": table},
        sort_keys=True, separators=(",", ":"),
    ).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", FORMAT_VERSION, len(header)))
        fh.write(header)
        for raw in blobs:
            fh.write(raw)
    os.replace(tmp, path)


def load_checkpoint(path) -> Checkpoint:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack("<IQ", data[8:20])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(data[20 : 20 + hlen].decode("utf-8"))
    base = 20 + hlen
    groups = {"param": {}, "adam_m": {}, "adam_v": {}}
    for entry in header["tensors"]:
        prefix, name = entry["name"].split("/", 1)
        if prefix not in groups or entry["dtype"] not in _DTYPES:
            raise CheckpointError(f"{path}: bad tensor entry {entry['name']}")
        start = base + entry["offset"]
        raw = data[start : start + entry["nbytes"]]
        if len(raw) != entry["nbytes"]:
            raise CheckpointError(f"{path}: truncated tensor {entry['name']}")
        groups[prefix][name] = np.frombuffer(raw, dtype=entry["dtype"]).reshape(entry["shape"]).copy()
    return Checkpoint(
        ModelConfig.from_dict(header["model_config"]),
        groups["param"], groups["adam_m"], groups["adam_v"], header.get("meta", {}),
    )
