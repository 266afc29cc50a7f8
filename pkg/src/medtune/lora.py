"""Low-rank adapters on the named projections of a :class:`TransformerWeights`.

For a base weight ``W`` of shape ``[fan_in, fan_out]`` the adapted layer is::

    y = x @ W + (alpha / r) * (x @ A.T) @ B.T,   A: [r, fan_in], B: [fan_out, r]

so the merged weight is ``W + (alpha / r) * (B @ A).T``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import checkpoint
from . import tensor as tc
from .model import LINEAR_NAMES, ConfigError, LinearLayerId, ModelConfig, TransformerWeights
from .tensor import ShapeError, Tensor


@dataclass(frozen=True)
class LoraConfig:
    r: int = 8
    alpha: float = 16.0
    target: tuple[str, ...] = LINEAR_NAMES

    def __post_init__(self):
        if not isinstance(self.r, (int, np.integer)) or self.r < 1:
            raise ConfigError(f"LoRA rank must be a positive integer, got {self.r!r}")
        if not (self.alpha > 0 and math.isfinite(self.alpha)):
            raise ConfigError(f"LoRA alpha must be finite and positive, got {self.alpha!r}")
        unknown = sorted(set(self.target) - set(LINEAR_NAMES))
        if unknown:
            raise ConfigError(f"unknown LoRA target(s): {unknown}")
        if len(set(self.target)) != len(self.target) or not self.target:
            raise ConfigError("LoRA target must be a nonempty set of distinct names")
        object.__setattr__(self, "target", tuple(self.target))

    @property
    def scaling(self) -> float:
        return self.alpha / self.r

    def to_dict(self) -> dict:
        return {"r": int(self.r), "alpha": float(self.alpha), "target": list(self.target)}

    @classmethod
    def from_dict(cls, d: dict) -> "LoraConfig":
        return cls(r=d["r"], alpha=d["alpha"], target=tuple(d.get("target", LINEAR_NAMES)))


@dataclass
class AdapterPair:
    a: Tensor
    b: Tensor
    owner: LinearLayerId


@dataclass
class AdapterSet:
    config: LoraConfig
    pairs: dict[LinearLayerId, AdapterPair] = field(default_factory=dict)

    def named_parameters(self):
        for lid, pair in self.pairs.items():
            yield f"lora.{lid.key}.a", pair.a
            yield f"lora.{lid.key}.b", pair.b

    def num_parameters(self) -> int:
        return sum(t.data.size for _, t in self.named_parameters())


def attach_adapters(weights: TransformerWeights, config: LoraConfig, seed: int) -> AdapterSet:
    """Create adapters for every targeted projection and freeze all base weights."""
    rng = np.random.default_rng(seed)
    dtype = weights["token_embedding"].data.dtype
    adapters = AdapterSet(config)
    for i in range(weights.config.n_layers):
        for name in config.target:
            lid = LinearLayerId(i, name)
            fan_in, fan_out = weights.config.linear_shape(name)
            a = rng.normal(0.0, 1.0 / config.r, size=(config.r, fan_in)).astype(dtype)
            b = np.zeros((fan_out, config.r), dtype=dtype)
            adapters.pairs[lid] = AdapterPair(Tensor(a, requires_grad=True), Tensor(b, requires_grad=True), lid)
    weights.set_trainable(False)
    return adapters


def adapted_linear(x: Tensor, base_w: Tensor, pair: AdapterPair, config: LoraConfig) -> Tensor:
    fan_in, fan_out = base_w.shape
    if pair.a.shape != (config.r, fan_in) or pair.b.shape != (fan_out, config.r):
        raise ShapeError(
            f"adapter shapes A{pair.a.shape} B{pair.b.shape} do not fit base {base_w.shape} at r={config.r}"
        )
    base = tc.matmul(x, base_w)
    low = tc.matmul(tc.matmul(x, tc.transpose(pair.a)), tc.transpose(pair.b))
    return tc.add(base, tc.scale(low, config.scaling))


def merge(weights: TransformerWeights, adapters: AdapterSet) -> TransformerWeights:
    merged = weights.copy()
    s = adapters.config.scaling
    for lid, pair in adapters.pairs.items():
        w = merged.linear(lid)
        delta = (pair.b.data @ pair.a.data).T
        if not np.any(delta):
            continue
        w.data = (w.data + s * delta).astype(w.data.dtype)
    merged.set_trainable(True)
    return merged


def count_trainable(config: ModelConfig, lora: LoraConfig) -> int:
    total = 0
    for name in lora.target:
        fan_in, fan_out = config.linear_shape(name)
        total += lora.r * (fan_in + fan_out)
    return total * config.n_layers


def save_adapters(path, adapters: AdapterSet, model_config: ModelConfig, meta: dict | None = None) -> None:
    arrays = {name: t.data for name, t in adapters.named_parameters()}
    checkpoint.save(path, arrays, "adapters", {"model": model_config.to_dict(), "lora": adapters.config.to_dict()}, meta)


def load_adapters(path, dtype=None) -> AdapterSet:
    header, tensors = checkpoint.load(path)
    if header["kind"] not in ("adapters", "train_state") or "lora" not in header["config"]:
        raise checkpoint.CheckpointError(f"{path}: no adapters in checkpoint of kind {header['kind']!r}")
    return adapters_from_arrays(LoraConfig.from_dict(header["config"]["lora"]), tensors, dtype)


def adapters_from_arrays(config: LoraConfig, tensors: dict[str, np.ndarray], dtype=None) -> AdapterSet:
    adapters = AdapterSet(config)
    for name, arr in tensors.items():
        if not (name.startswith("lora.") and name.endswith(".a")):
            continue
        key = name[len("lora.") : -len(".a")]
        _, idx, proj = key.split(".")
        lid = LinearLayerId(int(idx), proj)
        b = tensors[f"lora.{key}.b"]
        adapters.pairs[lid] = AdapterPair(
            Tensor(arr, requires_grad=True, dtype=dtype), Tensor(b, requires_grad=True, dtype=dtype), lid
        )
    return adapters
