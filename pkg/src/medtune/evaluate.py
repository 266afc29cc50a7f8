"""Zero-shot multiple-choice scoring by conditional log-likelihood."""

from __future__ import annotations

import json
import string
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import tensor as tc
from .data import ASSISTANT, PROMPTER, SYSTEM, ByteTokenizer, DataError
from .model import TransformerWeights, forward

DEFAULT_SYSTEM = "You are a helpful medical assistant."
MMLU_CLINICAL_TOPICS = (
    "clinical_knowledge",
    "college_biology",
    "college_medicine",
    "medical_genetics",
    "professional_medicine",
    "anatomy",
)
USMLE_SPLITS = ("self_assessment", "sample_exam")
SCORING_MODES = ("raw", "normalized")


class ContextOverflow(ValueError):
    pass


@dataclass(frozen=True)
class BenchmarkItem:
    id: str
    question: str
    choices: tuple[str, ...]
    answer_index: int
    benchmark: str
    has_image: bool = False

    def __post_init__(self):
        if len(self.choices) < 2:
            raise DataError(f"item {self.id}: needs at least two choices")
        if not 0 <= self.answer_index < len(self.choices):
            raise DataError(f"item {self.id}: answer index {self.answer_index} out of range")
        object.__setattr__(self, "choices", tuple(self.choices))

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "question": self.question,
            "choices": list(self.choices),
            "answer": self.answer_index,
            "benchmark": self.benchmark,
            "has_image": self.has_image,
        }


def read_benchmark(path) -> list[BenchmarkItem]:
    items = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                item = BenchmarkItem(
                    id=str(rec["id"]),
                    question=str(rec["question"]),
                    choices=tuple(str(c) for c in rec["choices"]),
                    answer_index=int(rec["answer"]),
                    benchmark=str(rec["benchmark"]),
                    has_image=bool(rec.get("has_image", False)),
                )
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise DataError(f"malformed benchmark record ({exc})", path, lineno) from None
            items.append(item)
    return items


def write_benchmark(path, items: Iterable[BenchmarkItem]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for item in items:
            f.write(json.dumps(item.to_dict(), ensure_ascii=False) + "\n")


def format_question(item: BenchmarkItem) -> str:
    letters = string.ascii_uppercase
    lines = [item.question] + [f"{letters[i]}. {c}" for i, c in enumerate(item.choices)]
    return "\n".join(lines)


def render_prompt(question: str, system: str = DEFAULT_SYSTEM) -> str:
    return SYSTEM + system + PROMPTER + question + ASSISTANT


@dataclass(frozen=True)
class ChoiceScore:
    raw_loglik: float
    normalized_loglik: float
    n_tokens: int

    def value(self, mode: str) -> float:
        return self.raw_loglik if mode == "raw" else self.normalized_loglik


def score_choice(weights, tokenizer: ByteTokenizer, question: str, choice: str, adapters=None, system: str = DEFAULT_SYSTEM) -> ChoiceScore:
    """Sum of next-token log-probs over the choice continuation."""
    prompt = tokenizer.encode(render_prompt(question, system))
    cont = tokenizer.encode(choice)
    if not cont:
        raise DataError("empty answer choice")
    ids = prompt + cont
    if len(ids) > weights.config.context_length:
        raise ContextOverflow(f"prompt + choice is {len(ids)} tokens, context is {weights.config.context_length}")
    with tc.no_grad():
        logits = forward(weights, adapters, ids).data
    logp = tc.log_softmax_rows(logits[len(prompt) - 1 : len(ids) - 1].astype(np.float64))
    raw = float(logp[np.arange(len(cont)), cont].sum())
    return ChoiceScore(raw, raw / len(choice.encode("utf-8")), len(cont))


def argmax_first(scores: Sequence[float]) -> tuple[int, bool]:
    """Index of the max (lowest index on ties) and whether a tie occurred."""
    best = max(scores)
    winners = [i for i, s in enumerate(scores) if s == best]
    return winners[0], len(winners) > 1


@dataclass
class ItemResult:
    id: str
    benchmark: str
    predicted: int | None
    answer: int
    correct: bool
    tie: bool = False
    scores: list[float] = field(default_factory=list)
    skipped: str | None = None


def evaluate_item(weights, tokenizer, item: BenchmarkItem, mode: str = "raw", adapters=None, system: str = DEFAULT_SYSTEM) -> ItemResult:
    if mode not in SCORING_MODES:
        raise ValueError(f"unknown scoring mode {mode!r}")
    if item.has_image:
        raise ValueError(f"item {item.id} contains an image and cannot be scored")
    question = format_question(item)
    scores = [score_choice(weights, tokenizer, question, c, adapters, system).value(mode) for c in item.choices]
    idx, tie = argmax_first(scores)
    return ItemResult(item.id, item.benchmark, idx, item.answer_index, idx == item.answer_index, tie, scores)


@dataclass
class EvalReport:
    mode: str
    accuracy: dict[str, float]
    counts: dict[str, tuple[int, int]]
    mmlu_topics: dict[str, float]
    mmlu_average: float | None
    usmle_average: float | None
    items: list[ItemResult]
    excluded: list[str]
    absent: list[str]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["counts"] = {k: {"correct": c, "scored": n} for k, (c, n) in self.counts.items()}
        return d


def aggregate(results: Sequence[ItemResult], mode: str, excluded: Sequence[str] = (), labels: Iterable[str] = ()) -> EvalReport:
    """Roll item results up into per-benchmark accuracies. Pure arithmetic over the item log."""
    counts: dict[str, list[int]] = {}
    for r in results:
        if r.skipped is not None:
            continue
        c = counts.setdefault(r.benchmark, [0, 0])
        c[0] += int(r.correct)
        c[1] += 1
    accuracy = {b: 100.0 * c / n for b, (c, n) in sorted(counts.items())}
    absent = sorted(set(labels) - set(accuracy))
    topics = {b.split(".", 1)[1]: acc for b, acc in accuracy.items() if b.startswith("mmlu.")}
    clinical = [topics[t] for t in MMLU_CLINICAL_TOPICS if t in topics]
    usmle = [accuracy[f"usmle.{s}"] for s in USMLE_SPLITS if f"usmle.{s}" in accuracy]
    return EvalReport(
        mode=mode,
        accuracy=accuracy,
        counts={b: (c, n) for b, (c, n) in sorted(counts.items())},
        mmlu_topics=topics,
        mmlu_average=float(np.mean(clinical)) if clinical else None,
        usmle_average=float(np.mean(usmle)) if usmle else None,
        items=list(results),
        excluded=sorted(excluded),
        absent=absent,
    )


def run_benchmark(
    weights: TransformerWeights,
    tokenizer,
    items: Sequence[BenchmarkItem],
    mode: str = "raw",
    exclusions: Iterable[str] | None = None,
    adapters=None,
    system: str = DEFAULT_SYSTEM,
    cache: dict | None = None,
) -> EvalReport:
    """Score every non-image, non-excluded item.

    ``cache`` maps item id to an :class:`ItemResult` and is filled as items are
    scored, so a second pass over a subset reuses the first pass.
    """
    exclusions = set(exclusions or ())
    labels = {it.benchmark for it in items}
    kept = [it for it in items if not it.has_image and it.id not in exclusions]
    if not kept:
        raise ValueError("no items left to score after exclusions")
    results = []
    for item in sorted(kept, key=lambda it: it.id):
        if cache is not None and item.id in cache:
            results.append(cache[item.id])
            continue
        try:
            res = evaluate_item(weights, tokenizer, item, mode, adapters, system)
        except ContextOverflow as exc:
            res = ItemResult(item.id, item.benchmark, None, item.answer_index, False, skipped=str(exc))
        if cache is not None:
            cache[item.id] = res
        results.append(res)
    excluded = sorted(it.id for it in items if it.id in exclusions)
    return aggregate(results, mode, excluded, labels)


def _fmt(v: float | None) -> str:
    return "-" if v is None else f"{v:.1f}"


def table_rows(report: EvalReport) -> list[tuple[str, float | None]]:
    """Rows in the usual results-table order; benchmarks not present are left out."""
    acc = report.accuracy
    rows: list[tuple[str, float | None]] = []
    for name in ("medqa", "headqa", "medmcqa", "pubmedqa"):
        if name in acc:
            rows.append((name, acc[name]))
    if report.mmlu_topics:
        rows.append(("MMLU (average)", report.mmlu_average))
        for topic, value in report.mmlu_topics.items():
            rows.append((f"  {topic}", value))
    if report.usmle_average is not None or any(k.startswith("usmle.") for k in acc):
        rows.append(("USMLE (average)", report.usmle_average))
        for k in sorted(acc):
            if k.startswith("usmle."):
                rows.append((f"  {k.split('.', 1)[1]}", acc[k]))
    listed = {"medqa", "headqa", "medmcqa", "pubmedqa"}
    for k in sorted(acc):
        if k not in listed and not k.startswith(("mmlu.", "usmle.")):
            rows.append((k, acc[k]))
    return rows


def format_table(report: EvalReport, label: str = "accuracy") -> str:
    rows = table_rows(report)
    width = max([len(r[0]) for r in rows] + [len(n) for n in report.absent] + [9])
    lines = [f"{'Dataset':<{width}}  {label}", "-" * (width + 2 + max(len(label), 5))]
    lines += [f"{name:<{width}}  {_fmt(v):>5}" for name, v in rows]
    for name in report.absent:
        lines.append(f"{name:<{width}}  absent")
    skipped = [r for r in report.items if r.skipped is not None]
    if skipped:
        lines.append(f"({len(skipped)} item(s) skipped, prompt + choice longer than the context)")
    lines.append(f"(scoring: {report.mode} log-likelihood)")
    return "\n".join(lines)
