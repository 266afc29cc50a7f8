"""Deterministic toy data and rigged models for exercising the pipeline end to end."""

from __future__ import annotations

import math

import numpy as np

from . import tensor as tc
from .data import ByteTokenizer, InstructionSample
from .evaluate import MMLU_CLINICAL_TOPICS, USMLE_SPLITS, BenchmarkItem
from .model import ModelConfig, TransformerWeights, init_model

FACTS = [
    ("normal adult resting heart rate", "60-100 bpm"),
    ("normal serum sodium", "135-145 mmol/L"),
    ("normal serum potassium", "3.5-5.0 mmol/L"),
    ("normal fasting glucose", "70-99 mg/dL"),
    ("normal platelet count", "150-400 x10^9/L"),
    ("normal adult respiratory rate", "12-20 /min"),
    ("normal body temperature", "36.5-37.5 C"),
    ("normal haemoglobin in men", "13.5-17.5 g/dL"),
    ("normal haemoglobin in women", "12.0-15.5 g/dL"),
    ("normal serum calcium", "8.5-10.5 mg/dL"),
    ("normal arterial pH", "7.35-7.45"),
    ("normal PaCO2", "35-45 mmHg"),
    ("normal HbA1c", "below 5.7 %"),
    ("normal serum creatinine", "0.6-1.2 mg/dL"),
    ("normal TSH", "0.4-4.0 mIU/L"),
    ("normal white cell count", "4-11 x10^9/L"),
    ("first-line drug for anaphylaxis", "adrenaline IM"),
    ("antidote for paracetamol overdose", "acetylcysteine"),
    ("antidote for opioid overdose", "naloxone"),
    ("antidote for warfarin", "vitamin K"),
    ("antidote for heparin", "protamine"),
    ("antidote for benzodiazepines", "flumazenil"),
    ("vitamin deficient in scurvy", "vitamin C"),
    ("vitamin deficient in beriberi", "thiamine"),
    ("vitamin deficient in pellagra", "niacin"),
    ("vitamin deficient in rickets", "vitamin D"),
    ("cause of tuberculosis", "M. tuberculosis"),
    ("cause of syphilis", "T. pallidum"),
    ("cause of malaria", "Plasmodium"),
    ("cause of Lyme disease", "B. burgdorferi"),
    ("largest organ of the body", "the skin"),
    ("longest bone of the body", "the femur"),
    ("site of insulin production", "beta cells"),
    ("site of bile production", "the liver"),
    ("number of adult teeth", "32"),
    ("number of cervical vertebrae", "7"),
]

SYSTEM_PROMPTS = ("You are a helpful medical assistant.", "Answer briefly.", "")


def instruction_samples(n: int = 32, seed: int = 0) -> list[InstructionSample]:
    """``n`` short factual Q/A samples (cycling through the fact list)."""
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(FACTS))
    out = []
    for i in range(n):
        topic, answer = FACTS[order[i % len(FACTS)]]
        system = SYSTEM_PROMPTS[i % len(SYSTEM_PROMPTS)]
        out.append(InstructionSample(system, f"What is the {topic}?", answer, source="synthetic"))
    return out


def general_corpus() -> list[InstructionSample]:
    """Plain statements of the same facts, no instruction framing; used to pretrain toy bases."""
    return [InstructionSample("", "", f"Note: the {topic} is {answer}.", source="general") for topic, answer in FACTS]


def toy_config(vocab_size: int = 261, context_length: int = 256, **overrides) -> ModelConfig:
    base = dict(n_layers=2, d_model=64, n_heads=4, n_kv_heads=4, d_ff=128, vocab_size=vocab_size, context_length=context_length)
    base.update(overrides)
    return ModelConfig(**base)


def rigged_model(favored: int, vocab_size: int = 261, context_length: int = 512, margin: float = 30.0, seed: int = 0) -> TransformerWeights:
    """A model whose next-token distribution puts ~all mass on ``favored`` at every position.

    Residual branches are zeroed so the final hidden state is the (shared)
    embedding row; ``lm_head`` maps it to a logit of ``margin`` on ``favored``.
    """
    cfg = ModelConfig(n_layers=1, d_model=8, n_heads=1, n_kv_heads=1, d_ff=8, vocab_size=vocab_size, context_length=context_length)
    w = init_model(cfg, seed)
    dtype = tc.get_dtype()
    emb = np.zeros((vocab_size, cfg.d_model), dtype=dtype)
    emb[:, 0] = 1.0
    w["token_embedding"].data = emb
    w["layers.0.o_proj"].data = np.zeros_like(w["layers.0.o_proj"].data)
    w["layers.0.down_proj"].data = np.zeros_like(w["layers.0.down_proj"].data)
    head = np.zeros((cfg.d_model, vocab_size), dtype=dtype)
    # rms_norm of e_0 is sqrt(d_model) * e_0
    head[0, favored] = margin / math.sqrt(cfg.d_model)
    w["lm_head"].data = head
    return w


def uniform_model(vocab_size: int = 261, context_length: int = 512, seed: int = 0) -> TransformerWeights:
    cfg = ModelConfig(n_layers=1, d_model=8, n_heads=1, n_kv_heads=1, d_ff=8, vocab_size=vocab_size, context_length=context_length)
    w = init_model(cfg, seed)
    w["lm_head"].data = np.zeros_like(w["lm_head"].data)
    return w


BENCHMARK_LABELS = (
    ["medqa", "headqa", "medmcqa"]
    + [f"mmlu.{t}" for t in MMLU_CLINICAL_TOPICS]
    + [f"usmle.{s}" for s in USMLE_SPLITS]
)
_DISTRACTOR_LETTERS = "bcdefghijklmnopqrstuvwxyz"


def synthetic_benchmark(n: int = 50, seed: int = 0, favored_char: str = "a", answer_len: int = 4) -> list[BenchmarkItem]:
    """MCQ items whose correct choice is ``favored_char`` repeated; distractors avoid it.

    All choices share one byte length, so a uniform model ties on every item.
    """
    rng = np.random.default_rng(seed)
    items = []
    for i in range(n):
        label = BENCHMARK_LABELS[i % len(BENCHMARK_LABELS)]
        k = 5 if label == "medqa" and i % 2 else 4
        topic, _ = FACTS[i % len(FACTS)]
        answer = int(rng.integers(k))
        choices = []
        for j in range(k):
            if j == answer:
                choices.append(favored_char * answer_len)
            else:
                choices.append("".join(rng.choice(list(_DISTRACTOR_LETTERS), size=answer_len)))
        items.append(BenchmarkItem(f"syn-{i:03d}", f"Which option names the {topic}?", tuple(choices), answer, label))
    return items


def contamination_corpus(n_train: int = 60, n_eval: int = 60, n_verbatim: int = 10, n_paraphrase: int = 10, seed: int = 0):
    """Training samples and eval items with planted duplicates.

    Returns ``(train_samples, eval_items, planted)`` where ``planted`` maps
    eval id to ``"verbatim"`` or ``"paraphrase"``. Paraphrases alternate
    between light and heavy rewording so they land on both sides of 0.8.
    """
    rng = np.random.default_rng(seed)
    organs = ["liver", "kidney", "heart", "lung", "spleen", "pancreas", "thyroid", "adrenal gland", "brain", "stomach"]
    signs = ["jaundice", "oedema", "tachycardia", "dyspnoea", "fever", "weight loss", "tremor", "pallor", "confusion", "rash"]
    ages = list(range(18, 90))

    def vignette(r):
        age = int(r.choice(ages))
        organ, sign = str(r.choice(organs)), str(r.choice(signs))
        sex = "man" if r.integers(2) else "woman"
        return (
            f"A {age}-year-old {sex} presents with {sign} lasting {int(r.integers(2, 30))} days. "
            f"Examination suggests disease of the {organ}. What is the most likely next step?"
        )

    def options(r):
        pool = ["order imaging", "start antibiotics", "refer urgently", "measure serum markers", "observe", "biopsy", "start steroids"]
        return tuple(str(x) for x in r.choice(pool, size=4, replace=False))

    train = []
    for i in range(n_train):
        train.append(InstructionSample("You are a helpful medical assistant.", vignette(rng), "Measure serum markers first.", source="synthetic"))

    items: list[BenchmarkItem] = []
    planted: dict[str, str] = {}
    labels = BENCHMARK_LABELS + ["pubmedqa"]
    for i in range(n_eval):
        label = labels[i % len(labels)]
        if label == "pubmedqa":
            choices = ("yes", "no", "maybe")
        else:
            choices = options(rng)
        question = vignette(rng)
        eid = f"ev-{i:03d}"
        if i < n_verbatim:
            question = f"Planted case {i}: a {40 + i}-year-old with persistent cough and night sweats; sputum smear pending. Best initial test?"
            train.append(InstructionSample("", question, "\n".join(choices), source="leak"))
            planted[eid] = "verbatim"
        elif i < n_verbatim + n_paraphrase:
            j = i - n_verbatim
            question = (
                f"Reworded case {j}: patient aged {50 + j} with a Glasgow coma score of {6 + j % 3} after head trauma, "
                f"pupils unequal. What is the immediate management priority?"
            )
            if j % 2:
                # heavy rewording: same fact, most n-grams changed
                reworded = (
                    f"Reworded case {j}: a patient aged {50 + j} with Glasgow coma score {6 + j % 3} following head trauma "
                    f"and unequal pupils. What is the immediate priority in management?"
                )
            else:
                # light rewording: a few words swapped
                reworded = (
                    f"Reworded case {j}: patient aged {50 + j} with a Glasgow coma score of {6 + j % 3} after a head injury, "
                    f"pupils unequal. What is the immediate management priority?"
                )
            train.append(InstructionSample("", reworded, "\n".join(choices), source="leak"))
            planted[eid] = "paraphrase"
        items.append(BenchmarkItem(eid, question, choices, int(rng.integers(len(choices))), label))
    return train, items, planted


def tokenizer() -> ByteTokenizer:
    return ByteTokenizer()
