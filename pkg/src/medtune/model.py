"""Llama-2 style decoder: RMSNorm pre-norm blocks, RoPE, grouped-query attention, SwiGLU.

Linear weights are stored ``[fan_in, fan_out]`` and applied as ``x @ W``.
No biases anywhere; ``lm_head`` is untied from the token embedding.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import TYPE_CHECKING, Iterator, NamedTuple, Sequence

import numpy as np

from . import tensor as tc
from .tensor import Tensor

if TYPE_CHECKING:
    from .lora import AdapterSet

LINEAR_NAMES = ("q_proj", "k_proj", "v_proj", "o_proj", "gate_proj", "up_proj", "down_proj")
RESIDUAL_NAMES = ("o_proj", "down_proj")


class ConfigError(ValueError):
    pass


class InputError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int
    d_model: int
    n_heads: int
    n_kv_heads: int
    d_ff: int
    vocab_size: int
    context_length: int = 4096
    rope_theta: float = 10000.0

    def __post_init__(self):
        for name in ("n_layers", "d_model", "n_heads", "n_kv_heads", "d_ff", "vocab_size", "context_length"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.n_kv_heads > self.n_heads or self.n_heads % self.n_kv_heads:
            raise ConfigError(f"n_kv_heads {self.n_kv_heads} must divide n_heads {self.n_heads}")
        if self.rope_theta <= 0:
            raise ConfigError("rope_theta must be positive")
        if self.head_dim % 2:
            raise ConfigError(f"head_dim {self.head_dim} must be even for rotary embeddings")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def kv_dim(self) -> int:
        return self.head_dim * self.n_kv_heads

    def linear_shape(self, name: str) -> tuple[int, int]:
        """(fan_in, fan_out) of a named projection."""
        d, f, kv = self.d_model, self.d_ff, self.kv_dim
        return {
            "q_proj": (d, d),
            "k_proj": (d, kv),
            "v_proj": (d, kv),
            "o_proj": (d, d),
            "gate_proj": (d, f),
            "up_proj": (d, f),
            "down_proj": (f, d),
        }[name]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


PRESETS = {
    "llama2-7b-shape": ModelConfig(
        n_layers=32, d_model=4096, n_heads=32, n_kv_heads=32, d_ff=11008, vocab_size=32000
    ),
    "llama2-70b-shape": ModelConfig(
        n_layers=80, d_model=8192, n_heads=64, n_kv_heads=8, d_ff=28672, vocab_size=32000
    ),
}


class LinearLayerId(NamedTuple):
    layer_index: int
    name: str

    @property
    def key(self) -> str:
        return f"layers.{self.layer_index}.{self.name}"


def enumerate_linear_layers(config: ModelConfig) -> Iterator[LinearLayerId]:
    for i in range(config.n_layers):
        for name in LINEAR_NAMES:
            yield LinearLayerId(i, name)


def parameter_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {"token_embedding": (config.vocab_size, config.d_model)}
    for i in range(config.n_layers):
        shapes[f"layers.{i}.attn_norm"] = (config.d_model,)
        for name in LINEAR_NAMES[:4]:
            shapes[f"layers.{i}.{name}"] = config.linear_shape(name)
        shapes[f"layers.{i}.ffn_norm"] = (config.d_model,)
        for name in LINEAR_NAMES[4:]:
            shapes[f"layers.{i}.{name}"] = config.linear_shape(name)
    shapes["final_norm"] = (config.d_model,)
    shapes["lm_head"] = (config.d_model, config.vocab_size)
    return shapes


def count_dense(config: ModelConfig) -> int:
    return sum(math.prod(s) for s in parameter_shapes(config).values())


class TransformerWeights:
    """Named weight set. ``params`` keeps insertion order of :func:`parameter_shapes`."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor]):
        expected = parameter_shapes(config)
        if set(params) != set(expected):
            missing = sorted(set(expected) - set(params))
            extra = sorted(set(params) - set(expected))
            raise ConfigError(f"weight names mismatch: missing={missing[:5]} extra={extra[:5]}")
        for name, shape in expected.items():
            if params[name].shape != shape:
                raise ConfigError(f"{name}: shape {params[name].shape} != {shape}")
        self.config = config
        self.params = {name: params[name] for name in expected}

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def linear(self, lid: LinearLayerId) -> Tensor:
        return self.params[lid.key]

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self.params.items())

    def num_parameters(self) -> int:
        return sum(t.data.size for t in self.params.values())

    def set_trainable(self, flag: bool) -> None:
        for t in self.params.values():
            t.requires_grad = flag
            t.grad = None

    def copy(self) -> "TransformerWeights":
        return TransformerWeights(
            self.config,
            {k: Tensor(v.data.copy(), requires_grad=v.requires_grad, dtype=v.data.dtype) for k, v in self.params.items()},
        )

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}


def init_model(config: ModelConfig, seed: int) -> TransformerWeights:
    rng = np.random.default_rng(seed)
    dtype = tc.get_dtype()
    resid_scale = 1.0 / math.sqrt(2 * config.n_layers)
    params = {}
    for name, shape in parameter_shapes(config).items():
        if name.endswith("_norm"):
            arr = np.ones(shape)
        else:
            std = 0.02
            if name.rsplit(".", 1)[-1] in RESIDUAL_NAMES:
                std *= resid_scale
            arr = rng.normal(0.0, std, size=shape)
        params[name] = Tensor(arr.astype(dtype), requires_grad=True)
    return TransformerWeights(config, params)


def rope_tables(length: int, head_dim: int, theta: float, dtype) -> tuple[np.ndarray, np.ndarray]:
    half = head_dim // 2
    inv_freq = 1.0 / (theta ** (np.arange(half, dtype=np.float64) * 2.0 / head_dim))
    angles = np.outer(np.arange(length, dtype=np.float64), inv_freq)
    angles = np.concatenate([angles, angles], axis=1)
    return np.cos(angles).astype(dtype), np.sin(angles).astype(dtype)


def _linear(x: Tensor, weights: TransformerWeights, adapters, lid: LinearLayerId) -> Tensor:
    if adapters is not None and lid in adapters.pairs:
        from .lora import adapted_linear

        return adapted_linear(x, weights.linear(lid), adapters.pairs[lid], adapters.config)
    return tc.matmul(x, weights.linear(lid))


def _attention(h: Tensor, weights, adapters, layer: int, n_seq: int, seq_len: int, cos, sin) -> Tensor:
    cfg = weights.config
    hd = cfg.head_dim
    group = cfg.n_heads // cfg.n_kv_heads
    q = _linear(h, weights, adapters, LinearLayerId(layer, "q_proj"))
    k = _linear(h, weights, adapters, LinearLayerId(layer, "k_proj"))
    v = _linear(h, weights, adapters, LinearLayerId(layer, "v_proj"))
    inv_sqrt = 1.0 / math.sqrt(hd)
    seq_outputs = []
    for s in range(n_seq):
        rows = slice(s * seq_len, (s + 1) * seq_len)
        keys, values = [], []
        for kv in range(cfg.n_kv_heads):
            cols = slice(kv * hd, (kv + 1) * hd)
            keys.append(tc.rotary(k[rows, cols], cos, sin))
            values.append(v[rows, cols])
        heads = []
        for head in range(cfg.n_heads):
            qh = tc.rotary(q[rows, slice(head * hd, (head + 1) * hd)], cos, sin)
            kv = head // group
            scores = tc.scale(tc.matmul(qh, tc.transpose(keys[kv])), inv_sqrt)
            probs = tc.softmax_rows(scores, causal=True)
            heads.append(tc.matmul(probs, values[kv]))
        seq_outputs.append(heads[0] if len(heads) == 1 else tc.concat(heads, axis=1))
    attn = seq_outputs[0] if n_seq == 1 else tc.concat(seq_outputs, axis=0)
    return _linear(attn, weights, adapters, LinearLayerId(layer, "o_proj"))


def forward_batch(
    weights: TransformerWeights,
    adapters: "AdapterSet | None",
    batch: Sequence[Sequence[int]] | np.ndarray,
) -> Tensor:
    """Logits ``[n_seq * T, vocab]`` for equal-length sequences, rows grouped by sequence."""
    cfg = weights.config
    ids = np.asarray(batch, dtype=np.int64)
    if ids.ndim != 2 or ids.shape[1] == 0:
        raise InputError(f"expected a nonempty (n_seq, T) batch, got shape {ids.shape}")
    n_seq, seq_len = ids.shape
    if seq_len > cfg.context_length:
        raise InputError(f"sequence length {seq_len} exceeds context length {cfg.context_length}")
    if ids.min() < 0 or ids.max() >= cfg.vocab_size:
        raise InputError(f"token id out of range [0, {cfg.vocab_size})")
    dtype = weights["token_embedding"].data.dtype
    cos, sin = rope_tables(seq_len, cfg.head_dim, cfg.rope_theta, dtype)

    x = tc.embedding(weights["token_embedding"], ids.reshape(-1))
    for layer in range(cfg.n_layers):
        h = tc.rms_norm(x, weights[f"layers.{layer}.attn_norm"])
        x = tc.add(x, _attention(h, weights, adapters, layer, n_seq, seq_len, cos, sin))
        h = tc.rms_norm(x, weights[f"layers.{layer}.ffn_norm"])
        gate = tc.silu(_linear(h, weights, adapters, LinearLayerId(layer, "gate_proj")))
        up = _linear(h, weights, adapters, LinearLayerId(layer, "up_proj"))
        x = tc.add(x, _linear(tc.mul(gate, up), weights, adapters, LinearLayerId(layer, "down_proj")))
    x = tc.rms_norm(x, weights["final_norm"])
    return tc.matmul(x, weights["lm_head"])


def forward(weights: TransformerWeights, adapters: "AdapterSet | None", tokens: Sequence[int]) -> Tensor:
    """Logits ``[T, vocab]`` for one sequence."""
    return forward_batch(weights, adapters, [list(tokens)])


class ContextOverflowError(InputError):
    pass


def greedy_generate(
    weights: TransformerWeights,
    adapters: "AdapterSet | None",
    prompt: Sequence[int],
    max_new: int,
    stop_token: int | None = None,
) -> list[int]:
    if not len(prompt):
        raise InputError("prompt must be nonempty")
    if max_new < 0:
        raise InputError("max_new must be >= 0")
    if len(prompt) + max_new > weights.config.context_length:
        raise ContextOverflowError(
            f"prompt ({len(prompt)}) + max_new ({max_new}) exceeds context length "
            f"{weights.config.context_length}; truncate the prompt"
        )
    out = list(prompt)
    with tc.no_grad():
        for _ in range(max_new):
            logits = forward(weights, adapters, out).data
            nxt = int(np.argmax(logits[-1]))
            out.append(nxt)
            if stop_token is not None and nxt == stop_token:
                break
    return out
