"""Full-parameter and LoRA training loop with AdamW, warmup + cosine decay and global-norm clipping."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import checkpoint
from . import tensor as tc
from .data import PackedChunk
from .lora import AdapterSet, LoraConfig, adapters_from_arrays
from .model import ConfigError, TransformerWeights, forward_batch
from .tensor import Tensor

logger = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "full"
    epochs: int = 3
    peak_lr: float = 5e-5
    warmup_steps: int = 100
    final_lr_fraction: float = 0.10
    weight_decay: float = 0.1
    grad_clip: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    batch_chunks: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("full", "lora"):
            raise ConfigError(f"mode must be 'full' or 'lora', got {self.mode!r}")
        if not 0 < self.final_lr_fraction < 1:
            raise ConfigError("final_lr_fraction must lie in (0, 1)")
        if self.warmup_steps < 0:
            raise ConfigError("warmup_steps must be >= 0")
        if self.peak_lr <= 0:
            raise ConfigError("peak_lr must be positive")
        if self.epochs < 1 or self.batch_chunks < 1:
            raise ConfigError("epochs and batch_chunks must be >= 1")
        if self.grad_clip <= 0:
            raise ConfigError("grad_clip must be positive")

    @classmethod
    def preset(cls, mode: str, **overrides) -> "TrainConfig":
        base = {"full": dict(epochs=3, peak_lr=5e-5), "lora": dict(epochs=8, peak_lr=1e-4)}
        if mode not in base:
            raise ConfigError(f"unknown mode {mode!r}")
        return cls(mode=mode, **{**base[mode], **overrides})

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class LrSchedule:
    total_steps: int
    warmup_steps: int
    peak: float
    floor: float

    def __post_init__(self):
        if self.total_steps < 1 or not 0 <= self.warmup_steps < self.total_steps:
            raise ConfigError(f"need 0 <= warmup ({self.warmup_steps}) < total ({self.total_steps})")

    @classmethod
    def for_run(cls, total_steps: int, config: TrainConfig) -> "LrSchedule":
        warmup = config.warmup_steps
        if warmup >= total_steps:
            warmup = total_steps // 10
        return cls(total_steps, warmup, config.peak_lr, config.final_lr_fraction * config.peak_lr)


def lr_at(schedule: LrSchedule, step: int) -> float:
    if not 0 <= step <= schedule.total_steps:
        raise ValueError(f"step {step} outside [0, {schedule.total_steps}]")
    if step < schedule.warmup_steps:
        return schedule.peak * step / schedule.warmup_steps
    progress = (step - schedule.warmup_steps) / (schedule.total_steps - schedule.warmup_steps)
    return schedule.floor + 0.5 * (schedule.peak - schedule.floor) * (1.0 + math.cos(math.pi * progress))


@dataclass
class OptimState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def _decays(name: str, param: Tensor) -> bool:
    # weight matrices only; norm gains are 1-D
    return param.data.ndim >= 2


def adamw_step(params: dict[str, Tensor], state: OptimState, lr: float, config: TrainConfig) -> None:
    for name, p in params.items():
        if p.grad is None:
            raise TrainingError(f"no gradient for parameter {name}")
        if not np.all(np.isfinite(p.grad)):
            bad = int(np.size(p.grad) - np.count_nonzero(np.isfinite(p.grad)))
            raise TrainingError(f"non-finite gradient in {name} ({bad} entries); step aborted")
    state.step += 1
    t = state.step
    b1, b2 = config.beta1, config.beta2
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    for name, p in params.items():
        g = p.grad
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        data = p.data
        if config.weight_decay and _decays(name, p):
            data = data * (1.0 - lr * config.weight_decay)
        update = (m / bc1) / (np.sqrt(v / bc2) + config.eps)
        p.data = (data - lr * update).astype(p.data.dtype)


def clip_global_norm(grads: Sequence[np.ndarray], max_norm: float) -> float:
    """Scale ``grads`` in place so their joint L2 norm is at most ``max_norm``; return the pre-clip norm."""
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    norm = math.sqrt(math.fsum(float(np.vdot(g, g)) for g in grads))
    if norm > max_norm:
        factor = max_norm / norm
        for g in grads:
            g *= g.dtype.type(factor)
    return norm


@dataclass
class TrainResult:
    log: list[dict]
    weights: TransformerWeights
    adapters: AdapterSet | None
    state: OptimState
    epochs_done: int


def trainable_parameters(weights: TransformerWeights, adapters: AdapterSet | None, mode: str) -> dict[str, Tensor]:
    if mode == "lora":
        return dict(adapters.named_parameters())
    return dict(weights.named_parameters())


def batch_loss(weights, adapters, batch: Sequence[PackedChunk]) -> Tensor:
    """Mean NLL over every mask-1 position in the batch."""
    tokens = np.stack([c.tokens for c in batch])
    targets = np.concatenate([c.targets for c in batch])
    mask = np.concatenate([c.loss_mask for c in batch])
    logits = forward_batch(weights, adapters, tokens)
    return tc.cross_entropy_masked(logits, targets, mask)


def masked_loss(weights, adapters, chunks: Sequence[PackedChunk], batch_chunks: int = 8) -> float:
    """Token-weighted mean response loss over ``chunks`` without recording a tape."""
    total = 0.0
    count = 0
    with tc.no_grad():
        for i in range(0, len(chunks), batch_chunks):
            batch = [c for c in chunks[i : i + batch_chunks] if c.loss_mask.any()]
            if not batch:
                continue
            n = int(sum(c.loss_mask.sum() for c in batch))
            total += float(batch_loss(weights, adapters, batch).data) * n
            count += n
    if count == 0:
        raise TrainingError("no response tokens to evaluate")
    return total / count


def epoch_order(n_chunks: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng(seed + epoch).permutation(n_chunks)


def steps_per_epoch(n_chunks: int, batch_chunks: int) -> int:
    return math.ceil(n_chunks / batch_chunks)


def train(
    weights: TransformerWeights,
    adapters: AdapterSet | None,
    chunks: Sequence[PackedChunk],
    config: TrainConfig,
    out_dir=None,
    resume: "TrainState | None" = None,
    stop_after_epoch: int | None = None,
    log_every: int = 0,
) -> TrainResult:
    """Run the loop for ``config.epochs`` epochs.

    Chunks without any response target are dropped before batching, so the
    step count is ``epochs * ceil(n_usable / batch_chunks)``.
    ``out_dir`` receives ``state_epoch{N}.ckpt`` after each epoch plus
    ``log.jsonl``. ``stop_after_epoch`` ends the run early (as an interruption
    would); ``resume`` continues from a saved epoch state.
    """
    if not chunks:
        raise TrainingError("no training chunks")
    # a long prompt can fill whole chunks; those carry no loss and are skipped
    usable = [c for c in chunks if c.loss_mask.any()]
    if not usable:
        raise TrainingError("no response tokens in any chunk")
    if len(usable) < len(chunks):
        logger.warning("skipping %d of %d chunks with no response tokens", len(chunks) - len(usable), len(chunks))
    chunks = usable
    if config.mode == "lora" and adapters is None:
        raise TrainingError("lora mode requires attached adapters")
    if config.mode == "full" and adapters is not None:
        raise TrainingError("full mode must not have adapters attached")
    if config.mode == "full":
        weights.set_trainable(True)
    else:
        weights.set_trainable(False)

    per_epoch = steps_per_epoch(len(chunks), config.batch_chunks)
    schedule = LrSchedule.for_run(config.epochs * per_epoch, config)
    state = OptimState()
    log: list[dict] = []
    first_epoch = 0
    if resume is not None:
        state, log, first_epoch = resume.optim, list(resume.log), resume.epoch
    params = trainable_parameters(weights, adapters, config.mode)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    epochs_done = first_epoch
    for epoch in range(first_epoch, config.epochs):
        order = epoch_order(len(chunks), config.seed, epoch)
        for b in range(per_epoch):
            batch = [chunks[i] for i in order[b * config.batch_chunks : (b + 1) * config.batch_chunks]]
            if not any(c.loss_mask.any() for c in batch):
                raise TrainingError(f"batch {b} of epoch {epoch} has no response tokens")
            for p in params.values():
                p.grad = None
            loss = batch_loss(weights, adapters, batch)
            tc.backward(loss)
            grad_norm = clip_global_norm([p.grad for p in params.values()], config.grad_clip)
            lr = lr_at(schedule, state.step)
            adamw_step(params, state, lr, config)
            rec = {"step": state.step, "lr": lr, "loss": float(loss.data), "grad_norm": grad_norm, "epoch": epoch}
            log.append(rec)
            if log_every and state.step % log_every == 0:
                logger.info("step %d loss %.4f lr %.3g", state.step, rec["loss"], lr)
        epochs_done = epoch + 1
        if out is not None:
            save_state(out / f"state_epoch{epochs_done}.ckpt", weights, adapters, config, state, log, epochs_done)
            write_log(out / "log.jsonl", log)
        if stop_after_epoch is not None and epochs_done >= stop_after_epoch:
            break
    for p in params.values():
        p.grad = None
    return TrainResult(log, weights, adapters, state, epochs_done)


def write_log(path, log: Sequence[dict]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for rec in log:
            f.write(json.dumps(rec, sort_keys=True) + "\n")


@dataclass
class TrainState:
    weights: TransformerWeights
    adapters: AdapterSet | None
    config: TrainConfig
    optim: OptimState
    log: list[dict]
    epoch: int


def save_state(path, weights, adapters, config: TrainConfig, state: OptimState, log, epoch: int) -> None:
    arrays = dict(weights.state_arrays())
    if adapters is not None:
        arrays.update({name: t.data for name, t in adapters.named_parameters()})
    for name in state.m:
        arrays[f"optim.m.{name}"] = state.m[name]
        arrays[f"optim.v.{name}"] = state.v[name]
    cfg = {"model": weights.config.to_dict(), "train": config.to_dict()}
    if adapters is not None:
        cfg["lora"] = adapters.config.to_dict()
    meta = {"epoch": epoch, "step": state.step, "optim_order": list(state.m), "log": list(log)}
    checkpoint.save(path, arrays, "train_state", cfg, meta)


def load_state(path) -> TrainState:
    from .model import ModelConfig

    header, tensors = checkpoint.load(path)
    if header["kind"] != "train_state":
        raise checkpoint.CheckpointError(f"{path}: not a training state checkpoint")
    cfg = header["config"]
    model_cfg = ModelConfig.from_dict(cfg["model"])
    train_cfg = TrainConfig(**cfg["train"])
    base = {k: Tensor(v) for k, v in tensors.items() if not k.startswith(("lora.", "optim."))}
    weights = TransformerWeights(model_cfg, base)
    adapters = None
    if "lora" in cfg:
        adapters = adapters_from_arrays(LoraConfig.from_dict(cfg["lora"]), tensors)
    optim = OptimState(step=header["meta"]["step"])
    for name in header["meta"]["optim_order"]:
        optim.m[name] = tensors[f"optim.m.{name}"].copy()
        optim.v[name] = tensors[f"optim.v.{name}"].copy()
    return TrainState(weights, adapters, train_cfg, optim, header["meta"]["log"], header["meta"]["epoch"])
