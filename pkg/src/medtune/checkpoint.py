"""Named-tensor checkpoint files.

Layout::

    b"MEDTCKPT"                 8-byte magic
    u64 little-endian           header length in bytes
    header                      UTF-8 JSON: kind, config, meta, tensor index
    payload                     little-endian float32 tensors in index order

Each index entry is ``{"name", "shape", "offset", "nbytes"}`` with offsets
relative to the start of the payload.
"""

from __future__ import annotations

import json
import math
import struct
from pathlib import Path

import numpy as np

MAGIC = b"MEDTCKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save(path, tensors: dict[str, np.ndarray], kind: str, config: dict | None = None, meta: dict | None = None) -> None:
    index = []
    offset = 0
    blobs = []
    for name, arr in tensors.items():
        blob = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        index.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(blob)})
        offset += len(blob)
        blobs.append(blob)
    header = {
        "format": "medtune-checkpoint",
        "version": VERSION,
        "kind": kind,
        "config": config or {},
        "meta": meta or {},
        "tensors": index,
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(head)))
        f.write(head)
        for blob in blobs:
            f.write(blob)


def load(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Return ``(header, tensors)``; tensors come back as float32 arrays."""
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a medtune checkpoint")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    try:
        header = json.loads(raw[16 : 16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header") from exc
    if header.get("version") != VERSION:
        raise CheckpointError(f"{path}: unsupported version {header.get('version')}")
    base = 16 + hlen
    tensors = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        if entry["nbytes"] != 4 * math.prod(shape):
            raise CheckpointError(f"{path}: size mismatch for {entry['name']}")
        start = base + entry["offset"]
        chunk = raw[start : start + entry["nbytes"]]
        if len(chunk) != entry["nbytes"]:
            raise CheckpointError(f"{path}: truncated payload for {entry['name']}")
        tensors[entry["name"]] = np.frombuffer(chunk, dtype="<f4").astype(np.float32).reshape(shape)
    return header, tensors


def save_model(path, weights, meta: dict | None = None) -> None:
    save(path, weights.state_arrays(), "model", weights.config.to_dict(), meta)


def load_model(path, requires_grad: bool = True, dtype=None):
    from .model import ModelConfig, TransformerWeights
    from .tensor import Tensor

    header, tensors = load(path)
    if header["kind"] not in ("model", "train_state"):
        raise CheckpointError(f"{path}: expected a model checkpoint, got {header['kind']!r}")
    config = ModelConfig.from_dict(header["config"]["model"] if "model" in header["config"] else header["config"])
    params = {
        name: Tensor(arr, requires_grad=requires_grad, dtype=dtype)
        for name, arr in tensors.items()
        if not name.startswith(("lora.", "optim."))
    }
    return TransformerWeights(config, params)
