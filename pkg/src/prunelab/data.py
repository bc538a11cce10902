"""Corpus ingestion, tokenization, calibration sampling, SFT and eval tasks."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tensor import seeded_rng

PAD, BOS, EOS = 0, 1, 2
SPECIALS = ("<pad>", "<bos>", "<eos>")


class DataError(ValueError):
    pass


@dataclass
class Tokenizer:
    kind: str  # "char" or "byte"
    entries: list[str]  # index -> symbol, specials first

    def __post_init__(self):
        self._to_id = {symbol: i for i, symbol in enumerate(self.entries)}

    @property
    def vocab_size(self) -> int:
        return len(self.entries)

    def encode(self, text: str, add_bos: bool = False, add_eos: bool = False) -> list[int]:
        if self.kind == "byte":
            body = [idx + len(SPECIALS) for idx in text.encode("utf-8")]
        else:
            try:
                body = [self._to_id[ch] for ch in text]
            except KeyError as exc:
                raise DataError(f"character {exc} not in tokenizer vocabulary") from exc
        return ([BOS] if add_bos else []) + body + ([EOS] if add_eos else [])

    def decode(self, ids: list[int]) -> str:
        symbols = []
        for i in ids:
            if not 0 <= i < self.vocab_size:
                raise DataError(f"token id {i} out of range")
            if i < len(SPECIALS):
                continue
            symbols.append(self.entries[i])
        if self.kind == "byte":
            return bytes(ord(s) for s in symbols).decode("utf-8", errors="replace")
        return "".join(symbols)

    def save_vocab(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        lines = [self.kind] + [json.dumps(entry) for entry in self.entries]
        path.write_text("\n".join(lines) + "\n")
        return path

    @classmethod
    def load_vocab(cls, path: str | Path) -> "Tokenizer":
        lines = Path(path).read_text().splitlines()
        if not lines or lines[0] not in ("char", "byte"):
            raise DataError(f"{path} is not a tokenizer vocabulary file")
        return cls(kind=lines[0], entries=[json.loads(line) for line in lines[1:]])


def build_tokenizer(corpus: str, kind: str = "char") -> Tokenizer:
    """Deterministic vocabulary over a corpus; byte-level ignores the corpus
    content and always covers all 256 byte values."""
    if not corpus:
        raise DataError("empty corpus")
    if kind == "byte":
        entries = list(SPECIALS) + [chr(b) for b in range(256)]
    elif kind == "char":
        entries = list(SPECIALS) + sorted(set(corpus))
    else:
        raise DataError(f"unknown tokenizer kind {kind!r}")
    return Tokenizer(kind=kind, entries=entries)


def load_corpus(path: str | Path) -> str:
    text = Path(path).read_text()
    if not text:
        raise DataError(f"corpus file {path} is empty")
    return text


def corpus_documents(text: str, tokenizer: Tokenizer) -> list[list[int]]:
    """Tokenize a corpus into per-line documents (boundary-safe units)."""
    return [tokenizer.encode(line) for line in text.splitlines() if line.strip()]


# ---------------------------------------------------------------------------
# calibration sampling
# ---------------------------------------------------------------------------


@dataclass
class CalibrationSet:
    sequences: list[list[int]]
    source: str
    sample_count: int
    seq_len: int
    seed: int

    def __post_init__(self):
        if len(self.sequences) != self.sample_count:
            raise DataError(
                f"{len(self.sequences)} sequences != requested {self.sample_count}"
            )
        for s in self.sequences:
            if len(s) > self.seq_len:
                raise DataError(f"sequence of length {len(s)} exceeds {self.seq_len}")

    def fingerprint(self) -> dict:
        return {
            "source": self.source,
            "sample_count": self.sample_count,
            "seq_len": self.seq_len,
            "seed": self.seed,
        }


def sample_calibration(
    docs: list[list[int]],
    count: int = 10,
    seq_len: int = 128,
    seed: int = 0,
    source: str = "corpus",
) -> CalibrationSet:
    """Seeded draw of `count` contiguous token spans, truncated to seq_len.

    Candidate windows are every in-document offset where a full window fits
    (short documents contribute themselves); drawn without replacement.
    """
    candidates: list[tuple[int, int]] = []
    for d, doc in enumerate(docs):
        if len(doc) < 2:
            continue
        if len(doc) <= seq_len:
            candidates.append((d, 0))
        else:
            candidates.extend((d, off) for off in range(len(doc) - seq_len + 1))
    if len(candidates) < count:
        raise DataError(
            f"corpus has {len(candidates)} candidate windows, need {count}"
        )
    rng = seeded_rng(seed)
    picks = rng.choice(len(candidates), size=count, replace=False)
    sequences = []
    for pick in picks:
        d, off = candidates[int(pick)]
        sequences.append(docs[d][off : off + seq_len])
    return CalibrationSet(sequences, source, count, seq_len, seed)


# ---------------------------------------------------------------------------
# SFT datasets
# ---------------------------------------------------------------------------

PROMPT_WITH_INPUT = "### Instruction:\n{instruction}\n### Input:\n{input}\n### Response:\n"
PROMPT_NO_INPUT = "### Instruction:\n{instruction}\n### Response:\n"

SFT_FIELD_MAPS = {
    "alpaca": {"instruction": "instruction", "input": "input", "response": "output"},
    "dolly": {"instruction": "instruction", "input": "context", "response": "response"},
}


@dataclass
class SftRecord:
    instruction: str
    input: str
    response: str
    token_ids: list[int]
    loss_mask: list[float]  # 1.0 on response (and eos) positions only


@dataclass
class SftDataset:
    records: list[SftRecord]
    max_seq_len: int
    name: str

    def __len__(self) -> int:
        return len(self.records)


def render_prompt(instruction: str, input_text: str) -> str:
    if input_text:
        return PROMPT_WITH_INPUT.format(instruction=instruction, input=input_text)
    return PROMPT_NO_INPUT.format(instruction=instruction)


def load_sft(
    path: str | Path,
    tokenizer: Tokenizer,
    format: str = "alpaca",
    max_seq_len: int = 512,
    name: str | None = None,
) -> SftDataset:
    """Parse JSONL instruction records into masked prompt+response token pairs.

    Malformed lines, missing fields and empty responses are rejected with
    their line numbers.
    """
    if format not in SFT_FIELD_MAPS:
        raise DataError(f"unknown SFT format {format!r}; expected one of {sorted(SFT_FIELD_MAPS)}")
    fields = SFT_FIELD_MAPS[format]
    path = Path(path)
    records = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            raw = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}:{lineno}: malformed JSON ({exc})") from exc
        if fields["instruction"] not in raw or fields["response"] not in raw:
            missing = [k for k in (fields["instruction"], fields["response"]) if k not in raw]
            raise DataError(f"{path}:{lineno}: missing required field(s) {missing}")
        instruction = raw[fields["instruction"]]
        input_text = raw.get(fields["input"], "") or ""
        response = raw[fields["response"]]
        if not response:
            raise DataError(f"{path}:{lineno}: empty response")
        prompt_ids = tokenizer.encode(render_prompt(instruction, input_text), add_bos=True)
        response_ids = tokenizer.encode(response, add_eos=True)
        token_ids = (prompt_ids + response_ids)[:max_seq_len]
        mask = ([0.0] * len(prompt_ids) + [1.0] * len(response_ids))[:max_seq_len]
        records.append(SftRecord(instruction, input_text, response, token_ids, mask))
    return SftDataset(records, max_seq_len, name or path.stem)


def batch_records(
    records: list[SftRecord], pad_id: int = PAD
) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad a record batch into (token matrix, loss-mask matrix)."""
    width = max(len(r.token_ids) for r in records)
    tokens = np.full((len(records), width), pad_id, dtype=np.int64)
    mask = np.zeros((len(records), width), dtype=np.float64)
    for i, record in enumerate(records):
        tokens[i, : len(record.token_ids)] = record.token_ids
        mask[i, : len(record.loss_mask)] = record.loss_mask
    return tokens, mask


# ---------------------------------------------------------------------------
# evaluation tasks
# ---------------------------------------------------------------------------


@dataclass
class EvalItem:
    context: str
    choices: list[str]
    answer: int


@dataclass
class EvalTask:
    name: str
    items: list[EvalItem]


def load_eval_task(path: str | Path, name: str | None = None) -> EvalTask:
    """JSONL items {"context", "choices", "answer"}; every item needs at
    least two choices and an in-range correct index."""
    path = Path(path)
    items = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            raw = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}:{lineno}: malformed JSON ({exc})") from exc
        for key in ("context", "choices", "answer"):
            if key not in raw:
                raise DataError(f"{path}:{lineno}: missing field {key!r}")
        choices = raw["choices"]
        if not isinstance(choices, list) or len(choices) < 2:
            raise DataError(f"{path}:{lineno}: need at least 2 choices")
        answer = raw["answer"]
        if not isinstance(answer, int) or not 0 <= answer < len(choices):
            raise DataError(
                f"{path}:{lineno}: answer {answer} out of range for {len(choices)} choices"
            )
        items.append(EvalItem(raw["context"], list(choices), answer))
    if not items:
        raise DataError(f"{path}: no items")
    return EvalTask(name or path.stem, items)
