"""ROUGE-1/2/L F1 and novel n-gram ratios over word tokens."""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Sequence

from .errors import InputError
from .text import tokenize

LCS_CELL_LIMIT = 10**8


@dataclass(frozen=True)
class RougeScore:
    precision: float
    recall: float
    f1: float


def _tokens(x) -> list:
    return tokenize(x) if isinstance(x, str) else list(x)


def _score(overlap: float, n_cand: int, n_ref: int) -> RougeScore:
    p = overlap / n_cand if n_cand else 0.0
    r = overlap / n_ref if n_ref else 0.0
    f = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return RougeScore(p, r, f)


def ngram_counts(tokens: Sequence, n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def rouge_n(candidate, reference, n: int = 1) -> RougeScore:
    """Clipped n-gram overlap; accepts token lists or raw text."""
    if n < 1:
        raise InputError("n must be at least 1")
    cand = ngram_counts(_tokens(candidate), n)
    ref = ngram_counts(_tokens(reference), n)
    overlap = sum((cand & ref).values())
    return _score(overlap, sum(cand.values()), sum(ref.values()))


def lcs_length(a: Sequence, b: Sequence) -> int:
    if len(a) * len(b) > LCS_CELL_LIMIT:
        raise InputError(f"LCS table of {len(a)}x{len(b)} exceeds {LCS_CELL_LIMIT} cells")
    if len(a) < len(b):
        a, b = b, a
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(candidate, reference) -> RougeScore:
    cand, ref = _tokens(candidate), _tokens(reference)
    return _score(lcs_length(cand, ref), len(cand), len(ref))


def score_pair(candidate, reference) -> dict[str, float]:
    cand, ref = _tokens(candidate), _tokens(reference)
    return {
        "rouge1": rouge_n(cand, ref, 1).f1,
        "rouge2": rouge_n(cand, ref, 2).f1,
        "rougeL": rouge_l(cand, ref).f1,
    }


def evaluate_corpus(pairs: Iterable[tuple]) -> dict:
    """Mean per-pair F1 scaled to 0-100 and rounded to two decimals."""
    totals = {"rouge1": 0.0, "rouge2": 0.0, "rougeL": 0.0}
    n = 0
    for cand, ref in pairs:
        for key, value in score_pair(cand, ref).items():
            totals[key] += value
        n += 1
    if n == 0:
        raise InputError("no candidate/reference pairs to evaluate")
    report = {key: round(100.0 * value / n, 2) for key, value in totals.items()}
    report["n_pairs"] = n
    return report


def novel_ngram_ratio(text, source, n: int = 2) -> float:
    """Fraction of distinct n-grams of ``text`` that never occur in ``source``."""
    grams = set(ngram_counts(_tokens(text), n))
    if not grams:
        return 0.0
    return len(grams - set(ngram_counts(_tokens(source), n))) / len(grams)


def write_report(report: dict, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
