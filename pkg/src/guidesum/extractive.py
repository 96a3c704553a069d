"""Guidance sampling plus the Lead-3 and greedy ROUGE oracle baselines."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .data import Example, read_records, write_records
from .errors import InputError
from .metrics import ngram_counts
from .text import split_sentences, tokenize

GUIDANCE_MODES = ("reference", "oracle")


@dataclass(frozen=True)
class GuidanceEntry:
    example_id: str
    summary: str
    oracle: str | None = None


class GuidancePool:
    """Train-split summaries that can be drawn as guidance."""

    def __init__(self, entries: Sequence[GuidanceEntry]):
        if not entries:
            raise InputError("guidance pool is empty")
        self.entries = tuple(entries)
        self._index = {e.example_id: i for i, e in enumerate(self.entries)}

    @classmethod
    def from_examples(cls, train: Sequence[Example], oracles: Mapping[str, str] | None = None) -> "GuidancePool":
        oracles = oracles or {}
        return cls([GuidanceEntry(e.id, e.summary, oracles.get(e.id)) for e in train])

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, example_id: str) -> bool:
        return example_id in self._index


def sample_index(pool: GuidancePool, current_id: str | None, rng: np.random.Generator) -> int:
    """Uniform pool index, skipping the current example's own entry when another exists."""
    n = len(pool)
    own = pool._index.get(current_id) if current_id is not None else None
    if own is None or n == 1:
        return int(rng.integers(n))
    j = int(rng.integers(n - 1))
    return j + 1 if j >= own else j


def sample_guidance(
    pool: GuidancePool,
    current_id: str | None,
    mode: str,
    rng: np.random.Generator,
) -> str:
    """Draw one entry uniformly, never the current example's own when another exists."""
    if mode not in GUIDANCE_MODES:
        raise InputError(f"guidance mode must be one of {GUIDANCE_MODES}, got {mode!r}")
    entry = pool.entries[sample_index(pool, current_id, rng)]
    if mode == "reference":
        return entry.summary
    if entry.oracle is None:
        raise InputError(f"no oracle summary for {entry.example_id!r}; run oracle extraction first")
    return entry.oracle


def lead3(source: str) -> str:
    return " ".join(split_sentences(source)[:3])


def _objective(cand: Sequence[str], ref1: Counter, ref2: Counter) -> float:
    """Mean of ROUGE-1 and ROUGE-2 F1 against pre-counted reference n-grams."""
    total = 0.0
    for n, ref in ((1, ref1), (2, ref2)):
        c = ngram_counts(cand, n)
        overlap = sum((c & ref).values())
        n_c, n_r = sum(c.values()), sum(ref.values())
        if overlap and n_c and n_r:
            p, r = overlap / n_c, overlap / n_r
            total += 2 * p * r / (p + r)
    return total / 2


def oracle_objective(source_sents: Sequence[str], indices: Iterable[int], reference: str) -> float:
    ref = tokenize(reference)
    toks = [t for i in sorted(indices) for t in tokenize(source_sents[i])]
    return _objective(toks, ngram_counts(ref, 1), ngram_counts(ref, 2))


def oracle_extract(source_sents: Sequence[str], reference: str, max_sents: int = 5) -> tuple[list[int], str]:
    """Greedy sentence selection maximizing mean(ROUGE-1 F1, ROUGE-2 F1).

    Adds the sentence with the largest objective each round (ties go to the
    earliest sentence) and stops when nothing improves it or ``max_sents``
    sentences are chosen. Indices come back in source order.
    """
    if not source_sents:
        raise InputError("source has no sentences")
    ref = tokenize(reference)
    if not ref:
        raise InputError("reference is empty")
    ref1, ref2 = ngram_counts(ref, 1), ngram_counts(ref, 2)
    sent_toks = [tokenize(s) for s in source_sents]
    selected: list[int] = []
    best = 0.0
    while len(selected) < max_sents:
        pick, pick_score = None, best
        for i in range(len(sent_toks)):
            if i in selected:
                continue
            trial = sorted(selected + [i])
            score = _objective([t for j in trial for t in sent_toks[j]], ref1, ref2)
            if score > pick_score:
                pick, pick_score = i, score
        if pick is None:
            break
        selected = sorted(selected + [pick])
        best = pick_score
    return selected, " ".join(source_sents[i] for i in selected)


def oracle_summary(source: str, reference: str, max_sents: int = 5) -> str:
    return oracle_extract(split_sentences(source), reference, max_sents)[1]


def write_oracle_file(examples: Iterable[Example], path, max_sents: int = 5) -> dict[str, str]:
    """Write oracle summaries in corpus format (``summary`` holds the oracle text)."""
    out = {}
    records = []
    for e in examples:
        text = oracle_summary(e.source, e.summary, max_sents)
        out[e.id] = text
        records.append({"id": e.id, "source": e.source, "summary": text})
    write_records(records, path)
    return out


def load_oracle_file(path) -> dict[str, str]:
    return {rec["id"]: rec["summary"] for rec in read_records(path, ("id", "summary"))}
