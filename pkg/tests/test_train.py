import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from medtune.data import PackedChunk, pack
from medtune.lora import LoraConfig, attach_adapters
from medtune.model import ConfigError, init_model
from medtune.synthetic import instruction_samples, toy_config, tokenizer
from medtune.tensor import Tensor
from medtune.train import (
    LrSchedule,
    OptimState,
    TrainConfig,
    TrainingError,
    adamw_step,
    clip_global_norm,
    load_state,
    lr_at,
    train,
)

CFG = toy_config(d_model=32, d_ff=64, context_length=64)


@pytest.fixture(scope="module")
def chunks():
    return pack(instruction_samples(12, seed=1), tokenizer(), 64)


def _usable(chunks):
    return sum(bool(c.loss_mask.any()) for c in chunks)


def test_lr_examples():
    sched = LrSchedule(1000, 100, 1e-4, 1e-5)
    assert lr_at(sched, 0) == 0.0
    assert lr_at(sched, 100) == pytest.approx(1e-4, rel=1e-12)
    assert lr_at(sched, 1000) == pytest.approx(1e-5, rel=1e-12)
    assert lr_at(sched, 50) == pytest.approx(5e-5)
    with pytest.raises(ValueError):
        lr_at(sched, 1001)
    with pytest.raises(ValueError):
        lr_at(sched, -1)


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 3000), st.integers(0, 200), st.floats(1e-6, 1e-2), st.floats(0.01, 0.9))
def test_schedule_invariants(total, warmup, peak, frac):
    cfg = TrainConfig(warmup_steps=warmup, peak_lr=peak, final_lr_fraction=frac)
    sched = LrSchedule.for_run(total, cfg)
    assert lr_at(sched, sched.warmup_steps) == pytest.approx(peak, rel=1e-12)
    assert lr_at(sched, total) == pytest.approx(frac * peak, rel=1e-9)
    lrs = [lr_at(sched, s) for s in range(sched.warmup_steps, total + 1)]
    assert all(b <= a + 1e-18 for a, b in zip(lrs, lrs[1:]))
    assert all(lr_at(sched, s) <= peak * (1 + 1e-12) for s in range(0, total + 1, max(1, total // 50)))


def test_warmup_clamped_when_run_is_short():
    sched = LrSchedule.for_run(40, TrainConfig(warmup_steps=100))
    assert sched.warmup_steps == 4
    assert LrSchedule.for_run(1000, TrainConfig()).warmup_steps == 100


def test_config_presets_and_validation():
    full, lora = TrainConfig.preset("full"), TrainConfig.preset("lora")
    assert (full.epochs, full.peak_lr, lora.epochs, lora.peak_lr) == (3, 5e-5, 8, 1e-4)
    for c in (full, lora):
        assert (c.warmup_steps, c.final_lr_fraction, c.weight_decay, c.grad_clip, c.beta1, c.beta2) == (100, 0.1, 0.1, 1.0, 0.9, 0.95)
        assert c.batch_chunks == 8
    assert TrainConfig.preset("lora", peak_lr=3e-4).peak_lr == 3e-4
    for bad in (dict(final_lr_fraction=1.0), dict(final_lr_fraction=0.0), dict(warmup_steps=-1), dict(peak_lr=0.0), dict(mode="qlora")):
        with pytest.raises(ConfigError):
            TrainConfig(**bad)


@pytest.mark.usefixtures("f64")
def test_adamw_single_step_scalar():
    p = {"theta": Tensor(np.array([1.0], dtype=np.float64))}
    p["theta"].grad = np.array([1.0])
    state = OptimState()
    adamw_step(p, state, 0.1, TrainConfig(weight_decay=0.0))
    assert p["theta"].data[0] == pytest.approx(1 - 0.1 / (1 + 1e-8), abs=1e-12)
    assert round(float(p["theta"].data[0]), 4) == 0.9
    assert state.step == 1 and state.m["theta"].shape == (1,)


@pytest.mark.usefixtures("f64")
def test_adamw_zero_grad_and_decoupled_decay():
    w = np.arange(6, dtype=np.float64).reshape(2, 3)
    params = {"w": Tensor(w.copy()), "gain": Tensor(np.ones(3))}
    for t in params.values():
        t.grad = np.zeros_like(t.data)
    adamw_step(params, OptimState(), 0.1, TrainConfig(weight_decay=0.0))
    assert (params["w"].data == w).all()
    adamw_step(params, OptimState(), 0.1, TrainConfig(weight_decay=0.1))
    np.testing.assert_allclose(params["w"].data, w * 0.99, rtol=1e-15)
    assert (params["gain"].data == 1.0).all()  # 1-D gains never decay


def test_adamw_rejects_non_finite():
    params = {"w": Tensor(np.ones((2, 2)))}
    params["w"].grad = np.array([[1.0, np.nan], [np.inf, 0.0]])
    state = OptimState()
    with pytest.raises(TrainingError, match="2 entries"):
        adamw_step(params, state, 0.1, TrainConfig())
    assert state.step == 0 and (params["w"].data == 1).all()


def test_clip_examples():
    g = [np.array([0.3]), np.array([0.4])]
    assert clip_global_norm(g, 1.0) == pytest.approx(0.5)
    assert g[0][0] == 0.3 and g[1][0] == 0.4
    g = [np.array([3.0, 4.0])]
    assert clip_global_norm(g, 1.0) == 5.0
    np.testing.assert_allclose(g[0], [0.6, 0.8])
    with pytest.raises(ValueError):
        clip_global_norm(g, 0.0)


@settings(max_examples=60, deadline=None)
@given(st.lists(arrays(np.float64, st.integers(1, 6), elements=st.floats(-1e3, 1e3)), min_size=1, max_size=4), st.floats(1e-3, 10))
def test_clip_bound_property(grads, max_norm):
    pre = clip_global_norm(grads, max_norm)
    post = math.sqrt(sum(float((g * g).sum()) for g in grads))
    assert post <= max_norm + 1e-6
    if pre <= max_norm:
        assert post == pytest.approx(pre)


def test_train_argument_errors(chunks):
    w = init_model(CFG, 0)
    with pytest.raises(TrainingError):
        train(w, None, [], TrainConfig())
    with pytest.raises(TrainingError):
        train(w, None, chunks, TrainConfig(mode="lora"))
    ad = attach_adapters(init_model(CFG, 0), LoraConfig(), 0)
    with pytest.raises(TrainingError):
        train(w, ad, chunks, TrainConfig(mode="full"))
    dead = PackedChunk(chunks[0].tokens, chunks[0].targets, np.zeros_like(chunks[0].loss_mask), [])
    with pytest.raises(TrainingError, match="no response tokens"):
        train(w, None, [dead], TrainConfig(epochs=1))


def test_prompt_only_chunks_are_skipped(chunks):
    dead = PackedChunk(chunks[0].tokens, chunks[0].targets, np.zeros_like(chunks[0].loss_mask), [])
    cfg = TrainConfig(epochs=2, peak_lr=1e-3, warmup_steps=1, batch_chunks=2)
    with_dead = train(init_model(CFG, 0), None, [dead, dead, *chunks, dead], cfg)
    plain = train(init_model(CFG, 0), None, list(chunks), cfg)
    assert len(with_dead.log) == 2 * math.ceil(_usable(chunks) / 2)
    assert with_dead.log == plain.log


def test_lora_training_leaves_base_bit_identical(chunks):
    w = init_model(CFG, 0)
    before = {n: t.data.tobytes() for n, t in w.named_parameters()}
    ad = attach_adapters(w, LoraConfig(r=2, alpha=4), 0)
    res = train(w, ad, chunks, TrainConfig.preset("lora", epochs=2, peak_lr=1e-2, warmup_steps=1, batch_chunks=2))
    assert {n: t.data.tobytes() for n, t in w.named_parameters()} == before
    assert any(p.b.data.any() for p in ad.pairs.values())
    assert res.log[-1]["step"] == 2 * math.ceil(_usable(chunks) / 2)


def test_full_training_reduces_loss(chunks):
    w = init_model(CFG, 0)
    res = train(w, None, chunks, TrainConfig(epochs=40, peak_lr=3e-3, warmup_steps=2, batch_chunks=len(chunks)))
    assert res.log[0]["lr"] == 0.0
    assert res.log[-1]["loss"] < 0.7 * res.log[1]["loss"]


def test_mask_independence(chunks):
    rng = np.random.default_rng(9)
    noisy = []
    for c in chunks:
        t = c.targets.copy()
        off = c.loss_mask == 0
        t[off] = rng.integers(0, CFG.vocab_size, size=int(off.sum()))
        noisy.append(PackedChunk(c.tokens, t, c.loss_mask, c.boundaries))
    cfg = TrainConfig(epochs=3, peak_lr=1e-3, warmup_steps=1, batch_chunks=2)
    a = train(init_model(CFG, 0), None, chunks, cfg)
    b = train(init_model(CFG, 0), None, noisy, cfg)
    assert [r["loss"] for r in a.log] == [r["loss"] for r in b.log]
    assert [r["grad_norm"] for r in a.log] == [r["grad_norm"] for r in b.log]


def test_determinism_and_resume(chunks, tmp_path):
    cfg = TrainConfig(epochs=3, peak_lr=1e-3, warmup_steps=1, batch_chunks=3, seed=4)
    ref = train(init_model(CFG, 0), None, chunks, cfg, out_dir=tmp_path / "ref")
    again = train(init_model(CFG, 0), None, chunks, cfg, out_dir=tmp_path / "again")
    assert (tmp_path / "ref/state_epoch3.ckpt").read_bytes() == (tmp_path / "again/state_epoch3.ckpt").read_bytes()
    assert ref.log == again.log

    part = train(init_model(CFG, 0), None, chunks, cfg, out_dir=tmp_path / "part", stop_after_epoch=1)
    assert part.epochs_done == 1 and not (tmp_path / "part/state_epoch2.ckpt").exists()
    st_ = load_state(tmp_path / "part/state_epoch1.ckpt")
    assert st_.config == cfg and st_.epoch == 1
    done = train(st_.weights, None, chunks, cfg, out_dir=tmp_path / "part", resume=st_)
    assert done.log == ref.log
    assert (tmp_path / "part/state_epoch3.ckpt").read_bytes() == (tmp_path / "ref/state_epoch3.ckpt").read_bytes()


def test_lora_resume_bit_identical(chunks, tmp_path):
    cfg = TrainConfig.preset("lora", epochs=2, peak_lr=1e-2, warmup_steps=1, batch_chunks=4)

    def fresh():
        w = init_model(CFG, 0)
        return w, attach_adapters(w, LoraConfig(r=2, alpha=4), 0)

    ref = train(*fresh(), chunks, cfg, out_dir=tmp_path / "ref")
    train(*fresh(), chunks, cfg, out_dir=tmp_path / "part", stop_after_epoch=1)
    s = load_state(tmp_path / "part/state_epoch1.ckpt")
    done = train(s.weights, s.adapters, chunks, cfg, out_dir=tmp_path / "part", resume=s)
    assert done.log == ref.log
    assert (tmp_path / "part/state_epoch2.ckpt").read_bytes() == (tmp_path / "ref/state_epoch2.ckpt").read_bytes()


def test_log_format(chunks, tmp_path):
    train(init_model(CFG, 0), None, chunks, TrainConfig(epochs=1, batch_chunks=4), out_dir=tmp_path)
    lines = (tmp_path / "log.jsonl").read_text().splitlines()
    assert len(lines) == math.ceil(_usable(chunks) / 4)
    recs = [json.loads(x) for x in lines]
    assert all(set(r) == {"step", "lr", "loss", "grad_norm", "epoch"} for r in recs)
    assert [r["step"] for r in recs] == list(range(1, len(recs) + 1))
