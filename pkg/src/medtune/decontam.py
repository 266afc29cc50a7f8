"""Flag evaluation items that near-duplicate training samples.

The built-in embedding is a hashed character 3-5-gram TF-IDF vector (4096
buckets, L2-normalised). Any object with an ``embed(text) -> np.ndarray``
method can stand in for it, e.g. a sentence-transformer wrapper.
"""

from __future__ import annotations

import json
import zlib
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Iterable, Protocol, Sequence

import numpy as np

from .data import InstructionSample
from .evaluate import MMLU_CLINICAL_TOPICS, USMLE_SPLITS, BenchmarkItem, EvalReport, run_benchmark

DEFAULT_THRESHOLD = 0.8


class EmbeddingProvider(Protocol):
    def embed(self, text: str) -> np.ndarray: ...


def char_ngrams(text: str, n_min: int = 3, n_max: int = 5) -> Counter:
    grams: Counter = Counter()
    for n in range(n_min, n_max + 1):
        for i in range(len(text) - n + 1):
            grams[text[i : i + n]] += 1
    return grams


def bucket(gram: str, dim: int) -> int:
    return zlib.crc32(gram.encode("utf-8")) % dim


class NgramProvider:
    """Hashed char n-gram TF-IDF. IDF is fitted on the training corpus (smoothed, always > 0)."""

    def __init__(self, corpus: Sequence[str], dim: int = 4096, n_min: int = 3, n_max: int = 5):
        self.dim = dim
        self.n_min, self.n_max = n_min, n_max
        df = np.zeros(dim, dtype=np.int64)
        for text in corpus:
            df[sorted({bucket(g, dim) for g in char_ngrams(text, n_min, n_max)})] += 1
        self.n_docs = len(corpus)
        self.idf = np.log((1.0 + self.n_docs) / (1.0 + df)) + 1.0

    def raw_vector(self, text: str) -> np.ndarray:
        vec = np.zeros(self.dim, dtype=np.float64)
        for gram, count in char_ngrams(text, self.n_min, self.n_max).items():
            vec[bucket(gram, self.dim)] += count
        return vec * self.idf

    def embed(self, text: str) -> np.ndarray:
        if not text:
            raise ValueError("cannot embed empty text")
        vec = self.raw_vector(text)
        norm = np.linalg.norm(vec)
        if norm == 0:
            # shorter than the smallest n-gram: fall back to the whole string as one gram
            vec[bucket(text, self.dim)] = 1.0
            norm = 1.0
        return vec / norm


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b)))


def eval_text(item: BenchmarkItem) -> str:
    return item.question + "\n" + "\n".join(item.choices)


def train_text(sample: InstructionSample) -> str:
    return sample.prompter + "\n" + sample.assistant


@dataclass
class ContaminationRecord:
    eval_id: str
    benchmark: str
    best_train_id: str
    similarity: float
    contaminated: bool


@dataclass
class DecontamReport:
    threshold: float
    per_benchmark: dict[str, dict]
    total: int
    contaminated: int
    percent: float
    records: list[ContaminationRecord] = field(default_factory=list)

    @property
    def contaminated_ids(self) -> set[str]:
        return {r.eval_id for r in self.records if r.contaminated}

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DecontamReport":
        records = [ContaminationRecord(**r) for r in d["records"]]
        return cls(d["threshold"], d["per_benchmark"], d["total"], d["contaminated"], d["percent"], records)

    @classmethod
    def from_file(cls, path) -> "DecontamReport":
        with open(path, encoding="utf-8") as f:
            return cls.from_dict(json.load(f))


def _embed_all(provider, texts: Sequence[str]) -> np.ndarray:
    rows = []
    for t in texts:
        v = np.asarray(provider.embed(t), dtype=np.float64)
        n = np.linalg.norm(v)
        if n == 0:
            raise ValueError("provider returned a zero vector")
        if abs(n - 1.0) > 1e-12:
            v = v / n
        rows.append(v)
    return np.vstack(rows)


def summarize(records: Sequence[ContaminationRecord], threshold: float) -> DecontamReport:
    per: dict[str, dict] = {}
    for r in records:
        entry = per.setdefault(r.benchmark, {"total": 0, "contaminated": 0})
        entry["total"] += 1
        entry["contaminated"] += int(r.contaminated)
    for entry in per.values():
        entry["percent"] = 100.0 * entry["contaminated"] / entry["total"]
    total = len(records)
    flagged = sum(r.contaminated for r in records)
    return DecontamReport(threshold, dict(sorted(per.items())), total, flagged, 100.0 * flagged / total if total else 0.0, list(records))


def scan(
    train: Sequence[tuple[str, str]],
    eval_items: Sequence[BenchmarkItem],
    provider: EmbeddingProvider | None = None,
    threshold: float = DEFAULT_THRESHOLD,
    block: int = 1024,
) -> DecontamReport:
    """Exhaustive max-cosine search of each eval item against ``train`` (id, text) pairs.

    An item is contaminated iff its best similarity is strictly above ``threshold``.
    Ties for the best match go to the earliest training text.
    """
    if not train or not eval_items:
        raise ValueError("scan needs nonempty training and evaluation sets")
    train_ids = [t[0] for t in train]
    if provider is None:
        provider = NgramProvider([t[1] for t in train])
    train_mat = _embed_all(provider, [t[1] for t in train])
    records = []
    for start in range(0, len(eval_items), block):
        part = eval_items[start : start + block]
        sims = _embed_all(provider, [eval_text(it) for it in part]) @ train_mat.T
        best = sims.argmax(axis=1)
        for item, j, row in zip(part, best, sims):
            s = float(row[j])
            records.append(ContaminationRecord(item.id, item.benchmark, train_ids[j], s, s > threshold))
    return summarize(records, threshold)


def training_pairs(samples: Iterable[InstructionSample]) -> list[tuple[str, str]]:
    return [(f"train-{i}", train_text(s)) for i, s in enumerate(samples)]


@dataclass
class DecontamComparison:
    full: EvalReport
    clean: EvalReport
    delta: dict[str, float | None]


def accuracy_deltas(full: EvalReport, clean: EvalReport) -> dict[str, float | None]:
    """``clean - full`` per benchmark plus the MMLU/USMLE averages."""
    out: dict[str, float | None] = {}
    for b, acc in full.accuracy.items():
        out[b] = clean.accuracy[b] - acc if b in clean.accuracy else None
    for key in ("mmlu_average", "usmle_average"):
        a, c = getattr(full, key), getattr(clean, key)
        if a is not None:
            out[key] = None if c is None else c - a
    return out


def decontaminated_eval(weights, tokenizer, items: Sequence[BenchmarkItem], report: DecontamReport, mode: str = "raw", adapters=None) -> DecontamComparison:
    covered = {r.eval_id for r in report.records}
    missing = [it.id for it in items if not it.has_image and it.id not in covered]
    if missing:
        raise ValueError(f"contamination report does not cover {len(missing)} item(s), e.g. {missing[:3]}")
    cache: dict = {}
    full = run_benchmark(weights, tokenizer, items, mode, adapters=adapters, cache=cache)
    clean = run_benchmark(weights, tokenizer, items, mode, exclusions=report.contaminated_ids, adapters=adapters, cache=cache)
    return DecontamComparison(full, clean, accuracy_deltas(full, clean))


_GROUPS = (
    ("MMLU (total)", "mmlu.", MMLU_CLINICAL_TOPICS),
    ("USMLE (total)", "usmle.", USMLE_SPLITS),
)


def format_summary(report: DecontamReport) -> str:
    """Plain-text table: dataset, samples, contaminated (percent)."""
    per = report.per_benchmark
    rows: list[tuple[str, int, int]] = []
    done = set()
    for title, prefix, order in _GROUPS:
        keys = [k for k in per if k.startswith(prefix)]
        if not keys:
            continue
        keys.sort(key=lambda k: (order.index(k[len(prefix):]) if k[len(prefix):] in order else len(order), k))
        rows.append((title, sum(per[k]["total"] for k in keys), sum(per[k]["contaminated"] for k in keys)))
        rows += [("  " + k[len(prefix):], per[k]["total"], per[k]["contaminated"]) for k in keys]
        done.update(keys)
    rows += [(k, per[k]["total"], per[k]["contaminated"]) for k in per if k not in done]
    width = max([len(r[0]) for r in rows] + [len("Total")])
    lines = [f"{'Dataset':<{width}}  {'Samples':>7}  Contaminated (%)", "-" * (width + 29)]
    for name, total, flagged in rows:
        lines.append(f"{name:<{width}}  {total:>7}  {flagged} ({100.0 * flagged / total:.1f})")
    lines.append("-" * (width + 29))
    lines.append(f"{'Total':<{width}}  {report.total:>7}  {report.contaminated} ({report.percent:.1f})")
    lines.append(f"(threshold: cosine > {report.threshold})")
    return "\n".join(lines)

