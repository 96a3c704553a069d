"""Summary-embedding cluster analysis: K-means, silhouette, gap statistic, PCA export."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DegenerateDataError, InputError


@dataclass
class EmbeddingSet:
    vectors: np.ndarray
    ids: list[str]

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2:
            raise InputError("embedding matrix must be 2-D")
        if len(self.ids) != self.vectors.shape[0]:
            raise InputError("one id per embedding row is required")
        if not np.isfinite(self.vectors).all():
            raise InputError("embeddings contain non-finite values")

    def __len__(self) -> int:
        return self.vectors.shape[0]


@dataclass
class ClusterReport:
    k: int
    assignments: np.ndarray
    centers: np.ndarray
    inertia: float
    silhouette: float | None = None
    n_iter: int = 0
    inertia_history: list[float] = field(default_factory=list)


@dataclass
class GapReport:
    k_values: list[int]
    gaps: list[float]
    s_k: list[float]
    log_w: list[float]
    chosen_k: int

    def to_dict(self) -> dict:
        return {
            "chosen_k": self.chosen_k,
            "by_k": {
                str(k): {"gap": g, "s_k": s, "log_w": w}
                for k, g, s, w in zip(self.k_values, self.gaps, self.s_k, self.log_w)
            },
        }


def _matrix(E) -> np.ndarray:
    return E.vectors if isinstance(E, EmbeddingSet) else np.asarray(E, dtype=np.float64)


def _sqdist(X: np.ndarray, C: np.ndarray) -> np.ndarray:
    d = ((X[:, None, :] - C[None, :, :]) ** 2).sum(axis=2)
    return d


def _kmeanspp(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = X.shape[0]
    chosen = [int(rng.integers(n))]
    d2 = ((X - X[chosen[0]]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total > 0:
            nxt = int(rng.choice(n, p=d2 / total))
        else:
            # all remaining points coincide with a center
            rest = np.setdiff1d(np.arange(n), chosen)
            nxt = int(rng.choice(rest))
        chosen.append(nxt)
        d2 = np.minimum(d2, ((X - X[nxt]) ** 2).sum(axis=1))
    return X[chosen].copy()


def kmeans(E, k: int, seed: int = 0, max_iter: int = 300) -> ClusterReport:
    """Lloyd iterations from k-means++ seeds until the assignment stops changing."""
    X = _matrix(E)
    n = X.shape[0]
    if not 1 <= k <= n:
        raise InputError(f"k={k} must lie in [1, {n}]")
    rng = np.random.default_rng(seed)
    centers = _kmeanspp(X, k, rng)
    labels = None
    history: list[float] = []
    it = 0
    for it in range(1, max_iter + 1):
        d2 = _sqdist(X, centers)
        new = d2.argmin(axis=1)
        point_cost = d2[np.arange(n), new]
        for c in range(k):
            if not (new == c).any():
                # move the worst-served point into the empty cluster
                far = int(np.argmax(np.where(np.bincount(new, minlength=k)[new] > 1, point_cost, -1.0)))
                new[far] = c
                point_cost[far] = 0.0
        centers = np.stack([X[new == c].mean(axis=0) for c in range(k)])
        inertia = float(((X - centers[new]) ** 2).sum())
        if history and inertia > history[-1] * (1 + 1e-12) + 1e-12:
            raise AssertionError(f"k-means inertia increased: {history[-1]} -> {inertia}")
        history.append(inertia)
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
    labels = new
    return ClusterReport(k, labels, centers, history[-1], n_iter=it, inertia_history=history)


def kmeans_best(E, k: int, seed: int = 0, n_init: int = 10, max_iter: int = 300) -> ClusterReport:
    """Lowest-inertia result over ``n_init`` independently seeded restarts."""
    seeds = np.random.SeedSequence(seed).generate_state(n_init)
    best = None
    for s in seeds:
        rep = kmeans(E, k, int(s), max_iter)
        if best is None or rep.inertia < best.inertia:
            best = rep
    return best


def pairwise_distances(X: np.ndarray) -> np.ndarray:
    return np.sqrt(np.maximum(_sqdist(X, X), 0.0))


def silhouette(E, assignments) -> float:
    """Mean silhouette with Euclidean distance; points in singleton clusters score 0."""
    X = _matrix(E)
    labels = np.asarray(assignments)
    clusters = np.unique(labels)
    if clusters.size < 2:
        raise InputError("silhouette needs at least two clusters")
    D = pairwise_distances(X)
    scores = np.zeros(X.shape[0])
    for i in range(X.shape[0]):
        own = labels == labels[i]
        if own.sum() == 1:
            continue
        a = D[i, own].sum() / (own.sum() - 1)
        b = min(D[i, labels == c].mean() for c in clusters if c != labels[i])
        denom = max(a, b)
        scores[i] = (b - a) / denom if denom > 0 else 0.0
    return float(scores.mean())


def gap_statistic(E, k_values: Sequence[int], B: int = 10, seed: int = 0, n_init: int = 5) -> GapReport:
    """Gap statistic against uniform reference sets drawn in the data's bounding box.

    Returns Gap(k), s_k and the smallest k with Gap(k) >= Gap(k') - s_k',
    where k' is the next evaluated value; if no k qualifies, the largest.
    """
    X = _matrix(E)
    n = X.shape[0]
    ks = [int(k) for k in k_values]
    if B < 2:
        raise InputError("B must be at least 2")
    if not ks or any(k < 1 or k > n for k in ks):
        raise InputError(f"k values must lie in [1, {n}]")
    if any(b <= a for a, b in zip(ks, ks[1:])):
        raise InputError("k values must be strictly increasing")
    rng = np.random.default_rng(seed)
    lo, hi = X.min(axis=0), X.max(axis=0)
    refs = [rng.uniform(lo, hi, size=X.shape) for _ in range(B)]
    km_seeds = np.random.SeedSequence(seed).generate_state(len(ks) * (B + 1)).reshape(len(ks), B + 1)

    gaps, sks, logws = [], [], []
    for ki, k in enumerate(ks):
        w = kmeans_best(X, k, int(km_seeds[ki, 0]), n_init).inertia
        if w <= 0:
            raise DegenerateDataError(f"within-cluster dispersion is zero at k={k}")
        ref_logs = np.array(
            [np.log(max(kmeans_best(R, k, int(km_seeds[ki, b + 1]), n_init).inertia, 1e-300)) for b, R in enumerate(refs)]
        )
        gaps.append(float(ref_logs.mean() - np.log(w)))
        sks.append(float(ref_logs.std() * np.sqrt(1.0 + 1.0 / B)))
        logws.append(float(np.log(w)))
    chosen = ks[-1]
    for i in range(len(ks) - 1):
        if gaps[i] >= gaps[i + 1] - sks[i + 1]:
            chosen = ks[i]
            break
    return GapReport(ks, gaps, sks, logws, chosen)


def project_2d(E) -> np.ndarray:
    """Coordinates on the top two principal directions of the centered data."""
    X = _matrix(E)
    if X.shape[0] < 2:
        raise InputError("projection needs at least two points")
    Xc = X - X.mean(axis=0)
    cov = Xc.T @ Xc / X.shape[0]
    if not np.any(cov):
        raise DegenerateDataError("all points are identical")
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals)[::-1][:2]
    axes = vecs[:, order]
    if axes.shape[1] < 2:
        axes = np.hstack([axes, np.zeros((X.shape[1], 2 - axes.shape[1]))])
    for j in range(axes.shape[1]):
        pivot = np.argmax(np.abs(axes[:, j]))
        if axes[pivot, j] < 0:
            axes[:, j] = -axes[:, j]
    return Xc @ axes


def pool_summary_embeddings(model, vocab, summaries: Sequence[str], ids: Sequence[str] | None = None, batch_size: int = 32) -> EmbeddingSet:
    """Encode each summary as [BOS ... EOS] and keep the position-0 encoder output."""
    from . import tensor as T
    from .model import pad_ids
    from .text import encode_text

    if not summaries:
        raise InputError("no summaries to embed")
    ids = list(ids) if ids is not None else [str(i) for i in range(len(summaries))]
    limit = model.cfg.max_guid_len
    rows = []
    was_training = model.training
    model.eval()
    try:
        with T.no_grad():
            for start in range(0, len(summaries), batch_size):
                chunk = [encode_text(vocab, s, limit, add_bos=True, add_eos=True) for s in summaries[start : start + batch_size]]
                tok, mask = pad_ids(chunk)
                rows.append(np.asarray(model.encode_guidance(tok, mask).data[:, 0, :], dtype=np.float64))
    finally:
        model.train(was_training)
    return EmbeddingSet(np.concatenate(rows, axis=0), ids)


def write_cluster_csv(path, ids: Sequence[str], labels, coords: np.ndarray) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "label", "x", "y"])
        for i, lab, (x, y) in zip(ids, labels, coords):
            w.writerow([i, int(lab), repr(float(x)), repr(float(y))])


def write_gap_report(path, report: GapReport, extra: dict | None = None) -> None:
    payload = report.to_dict()
    if extra:
        payload.update(extra)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
