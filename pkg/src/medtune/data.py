"""Instruction formatting, tokenization, mixture assembly and stream packing."""

from __future__ import annotations

import json
import logging
import math
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

SYSTEM, PROMPTER, ASSISTANT, END = "<|system|>", "<|prompter|>", "<|assistant|>", "<|end|>"
SPECIAL_TOKENS = (SYSTEM, PROMPTER, ASSISTANT, END)


class DataError(ValueError):
    """Malformed input data. ``line`` is 1-based when known."""

    def __init__(self, message: str, path=None, line: int | None = None):
        where = ""
        if path is not None:
            where = f"{path}:{line}: " if line is not None else f"{path}: "
        super().__init__(where + message)
        self.path = path
        self.line = line


class SampleTooLongError(DataError):
    pass


@dataclass(frozen=True)
class InstructionSample:
    system: str
    prompter: str
    assistant: str
    source: str = ""

    def __post_init__(self):
        if not self.assistant:
            raise DataError("assistant text must be nonempty")

    def to_dict(self) -> dict:
        return {"system": self.system, "prompter": self.prompter, "assistant": self.assistant, "source": self.source}


def render_template(sample: InstructionSample) -> tuple[str, tuple[int, int]]:
    """Render a sample; the span covers the response text plus the terminator."""
    head = SYSTEM + sample.system + PROMPTER + sample.prompter + ASSISTANT
    text = head + sample.assistant + END
    return text, (len(head), len(text))


# --- tokenizers -------------------------------------------------------------

_SPECIAL_RE = re.compile("(" + "|".join(re.escape(s) for s in SPECIAL_TOKENS) + ")")


class ByteTokenizer:
    """Bytes 0-255, then the four keywords, then pad."""

    mode = "byte_level"

    def __init__(self):
        self.special_ids = {s: 256 + i for i, s in enumerate(SPECIAL_TOKENS)}
        self.pad_id = 256 + len(SPECIAL_TOKENS)
        self._id_to_special = {v: k for k, v in self.special_ids.items()}

    @property
    def vocab_size(self) -> int:
        return self.pad_id + 1

    @property
    def end_id(self) -> int:
        return self.special_ids[END]

    def _encode_plain(self, text: str) -> list[int]:
        return list(text.encode("utf-8"))

    def encode(self, text: str) -> list[int]:
        ids: list[int] = []
        for part in _SPECIAL_RE.split(text):
            if not part:
                continue
            if part in self.special_ids:
                ids.append(self.special_ids[part])
            else:
                ids.extend(self._encode_plain(part))
        return ids

    def _piece_bytes(self, i: int) -> bytes:
        if 0 <= i < 256:
            return bytes([i])
        raise ValueError(f"unknown token id {i}")

    def decode(self, ids: Iterable[int]) -> str:
        out: list[str] = []
        buf = bytearray()
        for i in ids:
            i = int(i)
            if i in self._id_to_special or i == self.pad_id:
                out.append(buf.decode("utf-8", errors="replace"))
                buf.clear()
                if i != self.pad_id:
                    out.append(self._id_to_special[i])
            else:
                buf.extend(self._piece_bytes(i))
        out.append(buf.decode("utf-8", errors="replace"))
        return "".join(out)

    def describe(self) -> dict:
        return {"mode": self.mode, "vocab_size": self.vocab_size}


class VocabTokenizer(ByteTokenizer):
    """Greedy longest-match over an external piece list with byte fallback.

    Pieces get ids after pad, so byte and keyword ids are unchanged and the
    round trip stays lossless.
    """

    mode = "external_vocab"

    def __init__(self, pieces: Sequence[str], source: str | None = None):
        super().__init__()
        cleaned = []
        seen = set()
        for p in pieces:
            b = p.encode("utf-8")
            if len(b) > 1 and p not in seen and p not in SPECIAL_TOKENS:
                seen.add(p)
                cleaned.append(b)
        self.pieces = cleaned
        self.source = source
        self._piece_ids = {b: self.pad_id + 1 + i for i, b in enumerate(cleaned)}
        self._max_len = max((len(b) for b in cleaned), default=1)

    @classmethod
    def from_file(cls, path) -> "VocabTokenizer":
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        pieces = data["pieces"] if isinstance(data, dict) else data
        return cls(pieces, source=str(path))

    @property
    def vocab_size(self) -> int:
        return self.pad_id + 1 + len(self.pieces)

    def _encode_plain(self, text: str) -> list[int]:
        raw = text.encode("utf-8")
        ids = []
        i = 0
        while i < len(raw):
            for n in range(min(self._max_len, len(raw) - i), 1, -1):
                pid = self._piece_ids.get(raw[i : i + n])
                if pid is not None:
                    ids.append(pid)
                    i += n
                    break
            else:
                ids.append(raw[i])
                i += 1
        return ids

    def _piece_bytes(self, i: int) -> bytes:
        if i > self.pad_id:
            return self.pieces[i - self.pad_id - 1]
        return super()._piece_bytes(i)

    def describe(self) -> dict:
        return {"mode": self.mode, "vocab_size": self.vocab_size, "vocab_file": self.source}


def make_tokenizer(mode: str = "byte_level", vocab_file=None) -> ByteTokenizer:
    if mode == "byte_level":
        return ByteTokenizer()
    if mode == "external_vocab":
        if vocab_file is None:
            raise DataError("external_vocab mode needs a vocab file")
        return VocabTokenizer.from_file(vocab_file)
    raise DataError(f"unknown tokenizer mode {mode!r}")


def encode_sample(sample: InstructionSample, tokenizer: ByteTokenizer) -> tuple[list[int], list[int]]:
    """Token ids and a parallel 0/1 flag marking response tokens (incl. terminator)."""
    sp = tokenizer.special_ids
    prefix = [sp[SYSTEM], *tokenizer.encode(sample.system), sp[PROMPTER], *tokenizer.encode(sample.prompter), sp[ASSISTANT]]
    response = [*tokenizer.encode(sample.assistant), sp[END]]
    return prefix + response, [0] * len(prefix) + [1] * len(response)


# --- dataset files ----------------------------------------------------------

SAMPLE_FIELDS = ("system", "prompter", "assistant", "source")


def read_samples(path) -> list[InstructionSample]:
    samples = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"invalid JSON ({exc.msg})", path, lineno) from None
            if not isinstance(rec, dict):
                raise DataError("record must be an object", path, lineno)
            missing = [k for k in ("system", "prompter", "assistant") if not isinstance(rec.get(k), str)]
            if missing:
                raise DataError(f"missing or non-string field(s) {missing}", path, lineno)
            try:
                samples.append(InstructionSample(rec["system"], rec["prompter"], rec["assistant"], str(rec.get("source", ""))))
            except DataError as exc:
                raise DataError(str(exc), path, lineno) from None
    return samples


def write_samples(path, samples: Iterable[InstructionSample]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for s in samples:
            f.write(json.dumps(s.to_dict(), ensure_ascii=False) + "\n")


# --- mixtures ---------------------------------------------------------------


@dataclass
class MixtureEntry:
    path: str
    ratio: float


@dataclass
class MixtureSpec:
    entries: list[MixtureEntry]
    seed: int = 0

    def __post_init__(self):
        if not self.entries:
            raise DataError("mixture needs at least one entry")
        for e in self.entries:
            if not 0 < e.ratio <= 1:
                raise DataError(f"ratio for {e.path} must be in (0, 1], got {e.ratio}")
        total = math.fsum(e.ratio for e in self.entries)
        if abs(total - 1.0) > 1e-9:
            raise DataError(f"mixture ratios sum to {total!r}, expected 1.0")

    @classmethod
    def from_file(cls, path) -> "MixtureSpec":
        path = Path(path)
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
            entries = [
                MixtureEntry(str((path.parent / e["path"]).resolve()) if not Path(e["path"]).is_absolute() else e["path"], float(e["ratio"]))
                for e in raw["entries"]
            ]
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise DataError(f"malformed mixture file ({exc})", path) from None
        return cls(entries, int(raw.get("seed", 0)))


def mixture_counts(ratios: Sequence[float], total: int) -> list[int]:
    """``round(ratio * total)`` per entry; the residue goes to the largest ratio."""
    counts = [int(round(r * total)) for r in ratios]
    largest = max(range(len(ratios)), key=lambda i: (ratios[i], -i))
    counts[largest] += total - sum(counts)
    return counts


def assemble_mixture(spec: MixtureSpec, total: int, pools: dict[str, list[InstructionSample]] | None = None) -> list[InstructionSample]:
    """Sample ``total`` records across the entries under ``spec.seed``.

    ``pools`` may pre-supply the records per path (skipping file reads).
    """
    if total < len(spec.entries):
        raise DataError(f"total {total} smaller than number of entries {len(spec.entries)}")
    rng = np.random.default_rng(spec.seed)
    counts = mixture_counts([e.ratio for e in spec.entries], total)
    out: list[InstructionSample] = []
    for entry, n in zip(spec.entries, counts):
        if pools is not None and entry.path in pools:
            pool = pools[entry.path]
        else:
            pool = read_samples(entry.path)
        if not pool:
            raise DataError("mixture entry has no samples", entry.path)
        if n <= len(pool):
            idx = rng.choice(len(pool), size=n, replace=False)
        else:
            logger.warning("%s: %d requested from %d samples, drawing with replacement", entry.path, n, len(pool))
            idx = rng.choice(len(pool), size=n, replace=True)
        out.extend(pool[i] for i in idx)
    order = rng.permutation(len(out))
    return [out[i] for i in order]


# --- packing ----------------------------------------------------------------


@dataclass
class PackedChunk:
    """One training row.

    ``targets[i]`` is the token that follows ``tokens[i]`` in the stream (the
    first token of the next chunk at the last position, pad past the end).
    ``loss_mask[i]`` is 1 iff ``targets[i]`` is a response token or terminator.
    """

    tokens: np.ndarray
    targets: np.ndarray
    loss_mask: np.ndarray
    boundaries: list[tuple[int, int, int]] = field(default_factory=list)

    @property
    def n_content(self) -> int:
        return max((end for _, _, end in self.boundaries), default=0)


def pack(samples: Sequence[InstructionSample], tokenizer: ByteTokenizer, context_length: int = 4096) -> list[PackedChunk]:
    if context_length < 2:
        raise DataError(f"context_length must be >= 2, got {context_length}")
    stream: list[int] = []
    flags: list[int] = []
    owner: list[int] = []
    for sid, sample in enumerate(samples):
        ids, resp = encode_sample(sample, tokenizer)
        if len(ids) > 4 * context_length:
            raise SampleTooLongError(f"sample {sid} has {len(ids)} tokens, more than 4x context length {context_length}")
        stream.extend(ids)
        flags.extend(resp)
        owner.extend([sid] * len(ids))
    if not stream:
        return []
    n = len(stream)
    tokens = np.array(stream, dtype=np.int32)
    target_flags = np.array(flags[1:] + [0], dtype=np.uint8)
    next_tokens = np.array(stream[1:] + [tokenizer.pad_id], dtype=np.int32)
    owners = np.array(owner, dtype=np.int64)

    chunks = []
    for start in range(0, n, context_length):
        end = min(start + context_length, n)
        used = end - start
        tok = np.full(context_length, tokenizer.pad_id, dtype=np.int32)
        tgt = np.full(context_length, tokenizer.pad_id, dtype=np.int32)
        mask = np.zeros(context_length, dtype=np.uint8)
        tok[:used] = tokens[start:end]
        tgt[:used] = next_tokens[start:end]
        mask[:used] = target_flags[start:end]
        bounds = []
        seg = owners[start:end]
        cuts = np.flatnonzero(np.diff(seg)) + 1
        for a, b in zip(np.r_[0, cuts], np.r_[cuts, used]):
            bounds.append((int(seg[a]), int(a), int(b)))
        chunks.append(PackedChunk(tok, tgt, mask, bounds))
    return chunks


# --- packed file ------------------------------------------------------------

PACK_MAGIC = b"MEDTPACK"


def write_packed(path, chunks: Sequence[PackedChunk], context_length: int, tokenizer: ByteTokenizer) -> None:
    """Header (JSON) then per chunk: tokens i32, targets i32, mask u8, all little-endian."""
    header = {
        "format": "medtune-packed",
        "version": 1,
        "count": len(chunks),
        "context_length": context_length,
        "tokenizer": tokenizer.describe(),
        "pad_id": tokenizer.pad_id,
        "boundaries": [[list(b) for b in c.boundaries] for c in chunks],
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(PACK_MAGIC)
        f.write(struct.pack("<Q", len(head)))
        f.write(head)
        for c in chunks:
            f.write(c.tokens.astype("<i4").tobytes())
            f.write(c.targets.astype("<i4").tobytes())
            f.write(c.loss_mask.astype(np.uint8).tobytes())


def read_packed(path) -> tuple[dict, list[PackedChunk]]:
    raw = Path(path).read_bytes()
    if raw[:8] != PACK_MAGIC:
        raise DataError("not a packed chunk file", path)
    (hlen,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16 : 16 + hlen].decode("utf-8"))
    L = header["context_length"]
    row = 9 * L
    body = raw[16 + hlen :]
    if len(body) != row * header["count"]:
        raise DataError(f"payload size {len(body)} does not match {header['count']} chunks of {L}", path)
    chunks = []
    for i in range(header["count"]):
        blob = body[i * row : (i + 1) * row]
        tok = np.frombuffer(blob[: 4 * L], dtype="<i4").astype(np.int32)
        tgt = np.frombuffer(blob[4 * L : 8 * L], dtype="<i4").astype(np.int32)
        mask = np.frombuffer(blob[8 * L :], dtype=np.uint8).copy()
        bounds = [tuple(b) for b in header["boundaries"][i]]
        chunks.append(PackedChunk(tok, tgt, mask, bounds))
    return header, chunks
