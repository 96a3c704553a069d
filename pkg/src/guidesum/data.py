"""Corpus IO, splitting, dataset statistics and the synthetic template task."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, IntegrityError, InputError, ParseError
from .metrics import novel_ngram_ratio
from .text import split_sentences, tokenize

CORPUS_FIELDS = ("id", "source", "summary")


@dataclass(frozen=True)
class Example:
    id: str
    source: str
    summary: str


@dataclass(frozen=True)
class CorpusStats:
    n_examples: int
    avg_source_words: float
    avg_source_sents: float
    avg_summary_words: float
    avg_summary_sents: float
    novel_bigram_pct: float

    def to_dict(self) -> dict:
        return asdict(self)


def read_records(path, fields: Sequence[str]) -> list[dict]:
    """Read one JSON object per line, requiring string values for ``fields``."""
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"invalid record: {exc.msg}", lineno) from None
            if not isinstance(rec, dict):
                raise ParseError("record is not an object", lineno)
            for name in fields:
                if name not in rec:
                    raise ParseError(f"missing field {name!r}", lineno)
                if not isinstance(rec[name], str):
                    raise ParseError(f"field {name!r} must be a string", lineno)
            rec["_line"] = lineno
            records.append(rec)
    return records


def write_records(records: Iterable[dict], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(json.dumps(rec, ensure_ascii=False, sort_keys=False) + "\n")


def load_corpus(path) -> list[Example]:
    examples: list[Example] = []
    seen: set[str] = set()
    for rec in read_records(path, CORPUS_FIELDS):
        if rec["id"] in seen:
            raise IntegrityError(f"line {rec['_line']}: duplicate id {rec['id']!r}")
        if not rec["source"].strip() or not rec["summary"].strip():
            raise ParseError("source and summary must be non-empty", rec["_line"])
        seen.add(rec["id"])
        examples.append(Example(rec["id"], rec["source"], rec["summary"]))
    return examples


def save_corpus(examples: Iterable[Example], path) -> None:
    write_records(({"id": e.id, "source": e.source, "summary": e.summary} for e in examples), path)


def split_corpus(
    corpus: Sequence[Example],
    ratios: tuple[float, float, float] = (0.8, 0.1, 0.1),
    seed: int = 0,
) -> tuple[list[Example], list[Example], list[Example]]:
    """Shuffle under ``seed`` and cut into train/eval/test; eval and test sizes are floored."""
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) < 0:
        raise ConfigError(f"split ratios must be three non-negative values summing to 1, got {ratios}")
    n = len(corpus)
    if n < 10:
        raise InputError(f"corpus has {n} examples; at least 10 are needed to split")
    order = np.random.default_rng(seed).permutation(n)
    # small epsilon keeps 0.1 * 10 from flooring to 0 through float error
    n_eval = int(np.floor(ratios[1] * n + 1e-9))
    n_test = int(np.floor(ratios[2] * n + 1e-9))
    n_train = n - n_eval - n_test
    shuffled = [corpus[i] for i in order]
    return shuffled[:n_train], shuffled[n_train : n_train + n_eval], shuffled[n_train + n_eval :]


def novel_bigram_ratio(source: str, summary: str) -> float:
    """Fraction of distinct summary bigrams that never occur in the source."""
    return novel_ngram_ratio(summary, source, 2)


def corpus_stats(corpus: Sequence[Example]) -> CorpusStats:
    if not corpus:
        raise InputError("corpus is empty")
    n = len(corpus)
    src_words = sum(len(tokenize(e.source)) for e in corpus)
    src_sents = sum(len(split_sentences(e.source)) for e in corpus)
    sum_words = sum(len(tokenize(e.summary)) for e in corpus)
    sum_sents = sum(len(split_sentences(e.summary)) for e in corpus)
    novel = sum(novel_bigram_ratio(e.source, e.summary) for e in corpus)
    return CorpusStats(
        n_examples=n,
        avg_source_words=src_words / n,
        avg_source_sents=src_sents / n,
        avg_summary_words=sum_words / n,
        avg_summary_sents=sum_sents / n,
        novel_bigram_pct=100.0 * novel / n,
    )


# ------------------------------------------------------------ synthetic task

DEFAULT_TEMPLATE = ("final", "impression", "patient", "shows", "findings")
KEY_MARKER = "key"


@dataclass(frozen=True)
class SyntheticTaskConfig:
    vocab_size: int = 60
    n_examples: int = 32
    source_len: int = 24
    n_key_sents: int = 2
    template: tuple[str, ...] = DEFAULT_TEMPLATE
    seed: int = 0
    key_sent_len: int = 2
    noise_sent_len: tuple[int, int] = (3, 6)

    def __post_init__(self):
        if self.vocab_size <= len(self.template) + 10:
            raise ConfigError("vocab_size must exceed template length + 10")
        if self.n_key_sents < 1 or self.key_sent_len < 1:
            raise ConfigError("n_key_sents and key_sent_len must be at least 1")
        if self.n_examples < 1:
            raise ConfigError("n_examples must be positive")
        lo, hi = self.noise_sent_len
        if not 1 <= lo <= hi:
            raise ConfigError("noise_sent_len must be an increasing pair of positive counts")
        if set(self.template) & {KEY_MARKER, "."} or any(t.startswith("w") and t[1:].isdigit() for t in self.template):
            raise ConfigError("template tokens collide with generated tokens")

    @property
    def content_words(self) -> list[str]:
        # template, the key marker and "." take the remaining vocabulary slots
        return [f"w{i}" for i in range(self.vocab_size - len(self.template) - 2)]


def generate_synthetic(cfg: SyntheticTaskConfig) -> list[Example]:
    """Build the template task.

    Each source mixes noise sentences with ``n_key_sents`` sentences that start
    with the marker token ``key``. The summary is the shared template followed
    by the content tokens of the key sentences in source order.
    """
    rng = np.random.default_rng(cfg.seed)
    words = cfg.content_words
    lo, hi = cfg.noise_sent_len
    examples = []
    for i in range(cfg.n_examples):
        keys = [[words[j] for j in rng.integers(0, len(words), cfg.key_sent_len)] for _ in range(cfg.n_key_sents)]
        noise = []
        n_tokens = sum(len(k) + 2 for k in keys)
        while n_tokens < cfg.source_len or not noise:
            length = int(rng.integers(lo, hi + 1))
            noise.append([words[j] for j in rng.integers(0, len(words), length)])
            n_tokens += length + 1
        slots = sorted(rng.choice(len(noise) + len(keys), size=len(keys), replace=False).tolist())
        sentences, key_iter, noise_iter = [], iter(keys), iter(noise)
        for pos in range(len(noise) + len(keys)):
            if pos in slots:
                sentences.append(" ".join([KEY_MARKER, *next(key_iter), "."]))
            else:
                sentences.append(" ".join([*next(noise_iter), "."]))
        content = [tok for k in keys for tok in k]
        examples.append(Example(f"syn-{i:05d}", " ".join(sentences), " ".join([*cfg.template, *content])))
    return examples
