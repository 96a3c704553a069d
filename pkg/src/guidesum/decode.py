"""Greedy and beam-search generation for the guided transformer."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .model import GuidedTransformer, pad_ids
from .text import BOS, EOS, GUIDE_SEP, PAD

BANNED = (PAD, BOS, GUIDE_SEP)


@dataclass(frozen=True)
class Hypothesis:
    ids: tuple[int, ...]
    log_prob: float
    finished: bool


def _log_probs(logits: np.ndarray) -> np.ndarray:
    """Log-softmax over the generatable tokens only; banned ids get -inf."""
    z = logits.astype(np.float64)
    z[..., list(BANNED)] = -np.inf
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _clamp(model: GuidedTransformer, max_len: int) -> int:
    if max_len < 1:
        raise ValueError("max_len must be at least 1")
    return min(max_len, model.cfg.max_tgt_len)


def _memory(model: GuidedTransformer, sources: Sequence[Sequence[int]], guides: Sequence[Sequence[int]] | None):
    src, src_mask = pad_ids(sources)
    h_src = model.encode(src, src_mask)
    h_g = g_mask = None
    if model.cfg.guidance_enabled:
        if guides is None:
            raise ValueError("model has guidance enabled; pass guidance ids")
        g, g_mask = pad_ids(guides)
        h_g = model.encode_guidance(g, g_mask)
    return h_src, src_mask, h_g, g_mask


def _take(t: T.Tensor | None, rows) -> T.Tensor | None:
    return None if t is None else T.Tensor(t.data[rows])


def greedy_decode_batch(
    model: GuidedTransformer,
    sources: Sequence[Sequence[int]],
    guides: Sequence[Sequence[int]] | None = None,
    max_len: int = 128,
) -> list[list[int]]:
    """Argmax decoding for several examples at once; ties go to the smallest id."""
    max_len = _clamp(model, max_len)
    was_training = model.training
    model.eval()
    try:
        with T.no_grad():
            h_src, src_mask, h_g, g_mask = _memory(model, sources, guides)
            n = len(sources)
            seqs = np.full((n, 1), BOS, dtype=np.int64)
            done = np.zeros(n, dtype=bool)
            for _ in range(max_len):
                live = np.flatnonzero(~done)
                logits = model.decode(
                    seqs[live], _take(h_src, live), src_mask[live], _take(h_g, live), None if g_mask is None else g_mask[live]
                ).data[:, -1, :]
                nxt = np.full(n, PAD, dtype=np.int64)
                nxt[live] = _log_probs(logits).argmax(axis=-1)
                seqs = np.concatenate([seqs, nxt[:, None]], axis=1)
                done |= nxt == EOS
                if done.all():
                    break
    finally:
        model.train(was_training)
    out = []
    for row in seqs:
        ids = [int(t) for t in row]
        # finished rows were padded after their EOS
        if EOS in ids:
            ids = ids[: ids.index(EOS) + 1]
        out.append(ids)
    return out


def greedy_decode(model: GuidedTransformer, source: Sequence[int], guidance: Sequence[int] | None = None, max_len: int = 128) -> list[int]:
    return greedy_decode_batch(model, [source], None if guidance is None else [guidance], max_len)[0]


def beam_search(
    model: GuidedTransformer,
    source: Sequence[int],
    guidance: Sequence[int] | None = None,
    width: int = 6,
    max_len: int = 128,
    return_pool: bool = False,
):
    """Beam search scored by raw cumulative log-probability.

    Each round expands every live hypothesis over the whole vocabulary and
    keeps the ``width`` best candidates (ties: lexicographically smaller ids
    first). Candidates ending in EOS move to the completed pool. Hypotheses
    still live after ``max_len`` tokens compete with the completed pool for
    the final answer.
    """
    if width < 1:
        raise ValueError("beam width must be at least 1")
    max_len = _clamp(model, max_len)
    was_training = model.training
    model.eval()
    try:
        with T.no_grad():
            h_src, src_mask, h_g, g_mask = _memory(model, [source], None if guidance is None else [guidance])
            live: list[Hypothesis] = [Hypothesis((BOS,), 0.0, False)]
            completed: list[Hypothesis] = []
            for _ in range(max_len):
                rows = np.zeros(len(live), dtype=np.int64)
                ids = np.array([h.ids for h in live], dtype=np.int64)
                logits = model.decode(ids, _take(h_src, rows), src_mask[rows], _take(h_g, rows), None if g_mask is None else g_mask[rows]).data[:, -1, :]
                lp = _log_probs(logits)
                cands = []
                for h, row in zip(live, lp):
                    for tok in np.flatnonzero(np.isfinite(row)):
                        cands.append((h.log_prob + float(row[tok]), h.ids + (int(tok),)))
                cands.sort(key=lambda c: (-c[0], c[1]))
                live = []
                for score, seq in cands[:width]:
                    if seq[-1] == EOS:
                        completed.append(Hypothesis(seq, score, True))
                    else:
                        live.append(Hypothesis(seq, score, False))
                if not live:
                    break
                # scores only fall as hypotheses grow
                if completed and max(c.log_prob for c in completed) >= live[0].log_prob:
                    break
    finally:
        model.train(was_training)
    pool = completed + live
    best = min(pool, key=lambda h: (-h.log_prob, h.ids))
    if return_pool:
        return best, completed
    return list(best.ids)


def sequence_log_prob(model: GuidedTransformer, source: Sequence[int], guidance: Sequence[int] | None, ids: Sequence[int]) -> float:
    """Teacher-forced log-probability of ``ids`` (starting with BOS) under the same token bans as decoding."""
    was_training = model.training
    model.eval()
    try:
        with T.no_grad():
            h_src, src_mask, h_g, g_mask = _memory(model, [source], None if guidance is None else [guidance])
            logits = model.decode(np.asarray([ids[:-1]]), h_src, src_mask, h_g, g_mask).data[0]
    finally:
        model.train(was_training)
    lp = _log_probs(logits)
    return float(sum(lp[i, t] for i, t in enumerate(ids[1:])))
