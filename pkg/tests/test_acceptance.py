"""End-to-end acceptance checks, one test per criterion.

Each test records a ``PASS``/``FAIL`` line with the measured quantity; the
lines are printed in the pytest terminal summary (and directly when the
module is run as a script).
"""

import itertools
import json
import random
import time
from collections import Counter

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES, tiny_config
from guidesum import tensor as T
from guidesum.cli import main
from guidesum.cluster import gap_statistic, kmeans_best, silhouette
from guidesum.data import SyntheticTaskConfig, generate_synthetic
from guidesum.decode import BANNED, beam_search, greedy_decode, greedy_decode_batch
from guidesum.extractive import oracle_extract, oracle_objective
from guidesum.metrics import evaluate_corpus, lcs_length, rouge_l, rouge_n
from guidesum.model import Batch, GuidedTransformer, ModelConfig, make_batch
from guidesum.text import BOS, EOS, build_vocab, decode, encode_text
from guidesum.train import AdamState, TrainConfig, adamw_step, lr_at, train


def record(number, name, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] {number:>2}. {name}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def exhaustive_two_partition(X):
    best = np.inf
    for bits in range(1, 2 ** (len(X) - 1)):
        labels = np.array([(bits >> i) & 1 for i in range(len(X))])
        best = min(best, sum(((X[labels == c] - X[labels == c].mean(axis=0)) ** 2).sum() for c in (0, 1)))
    return best


def template_model(vocab_size, guided, seed, dropout=0.0):
    cfg = ModelConfig(
        vocab_size=vocab_size, d_model=64, n_heads=4, n_enc_layers=2, n_dec_layers=2, d_ffn=128,
        max_src_len=64, max_tgt_len=16, max_guid_len=16, guidance_enabled=guided, dropout_rate=dropout,
    )
    return GuidedTransformer(cfg, seed=seed)


# ------------------------------------------------------------------ model


def test_01_gradient_fidelity():
    cfg = ModelConfig(vocab_size=50, d_model=16, n_heads=2, n_enc_layers=2, n_dec_layers=2, d_ffn=16,
                      max_src_len=6, max_tgt_len=4, max_guid_len=5, dropout_rate=0.0)
    model = GuidedTransformer(cfg, seed=0, dtype=np.float64)
    batch = make_batch([[1, 10, 11, 12, 13, 2]], [[1, 20, 21, 2]], [[1, 30, 31, 2]])
    params = model.parameters()
    start = time.perf_counter()
    rep = T.grad_check(lambda: model.forward_train(batch)[1], params, h=1e-5, refine_above=1e-5)
    elapsed = time.perf_counter() - start
    ok = rep.max_rel_error < 1e-4 and elapsed < 60 and len(rep.per_param) == len(params)
    record(1, "gradient fidelity", ok,
           f"max rel err {rep.max_rel_error:.2e} over {rep.n_checked} elements ({rep.n_refined} refined), {elapsed:.1f}s")
    assert ok


def test_02_ablation_identity():
    rng = np.random.default_rng(0)
    guided = GuidedTransformer(tiny_config(), seed=5, dtype=np.float64)
    plain = GuidedTransformer(tiny_config(guidance_enabled=False), seed=5, dtype=np.float64)
    for layer in guided.decoder:
        layer.guide_attn.out.weight.data[...] = 0.0
        layer.guide_attn.out.bias.data[...] = 0.0
    worst = 0.0
    for _ in range(10):
        seqs = [[BOS, *rng.integers(5, 50, int(rng.integers(1, n))).tolist(), EOS] for n in (10, 6, 6)]
        b = make_batch([seqs[0]], [seqs[1]], [seqs[2]])
        plain_b = Batch(**{**b.__dict__, "guide_ids": None, "guide_mask": None})
        worst = max(worst, float(np.abs(guided.forward(b).data - plain.forward(plain_b).data).max()))
    ok = worst <= 1e-9
    record(2, "ablation identity", ok, f"max |logit diff| {worst:.1e} over 10 random inputs")
    assert ok


# ------------------------------------------------------------------ training


def test_03_memorization():
    examples = generate_synthetic(SyntheticTaskConfig(n_examples=32, seed=0))
    vocab = build_vocab([t for e in examples for t in (e.source, e.summary)])
    model = template_model(len(vocab), guided=False, seed=0)
    cfg = TrainConfig(batch_size=8, lr_peak=1e-3, warmup_steps=100, epochs=250, eval_interval_epochs=1000,
                      weight_decay=0.0, seed=0)
    losses = []
    start = time.perf_counter()
    train(model, vocab, examples, examples, cfg, on_step=lambda step, loss: losses.append(loss))
    # one epoch is four batches; judge the loss per epoch, not per batch
    epoch_loss = np.convolve(losses, np.ones(4) / 4, mode="valid")
    below = np.flatnonzero(epoch_loss < 0.05)
    outs = greedy_decode_batch(model, [encode_text(vocab, e.source, 64, True, True) for e in examples], None, 16)
    refs = [encode_text(vocab, e.summary, 16, True, True) for e in examples]
    exact = sum(o == r for o, r in zip(outs, refs))
    r1 = evaluate_corpus((" ".join(decode(vocab, o)), e.summary) for o, e in zip(outs, examples))["rouge1"]
    elapsed = time.perf_counter() - start
    ok = below.size > 0 and exact == 32 and r1 >= 99.0 and elapsed < 600
    first = int(below[0]) + 4 if below.size else None
    record(3, "memorization", ok,
           f"epoch loss < 0.05 first at step {first}, final {epoch_loss[-1]:.4f}; exact {exact}/32; ROUGE-1 {r1:.2f}; {elapsed:.0f}s")
    assert ok


GUIDANCE_SEEDS = (0, 1, 2)
GUIDANCE_STEPS = 2000


def test_04_guidance_benefit():
    scores = {}
    for seed in GUIDANCE_SEEDS:
        examples = generate_synthetic(SyntheticTaskConfig(n_examples=2200, seed=seed))
        tr, ev = examples[:2000], examples[2000:]
        vocab = build_vocab([t for e in tr for t in (e.source, e.summary)])
        for mode in ("none", "reference"):
            model = template_model(len(vocab), guided=mode != "none", seed=seed, dropout=0.1)
            cfg = TrainConfig(batch_size=8, lr_peak=1e-3, warmup_steps=100, epochs=GUIDANCE_STEPS // 250,
                              eval_interval_epochs=1000, guidance_mode=mode, seed=seed)
            res = train(model, vocab, tr, ev, cfg)
            scores[seed, mode] = [r for r in res.log if r["event"] == "eval"][-1]["rouge1"]
    deltas = [scores[s, "reference"] - scores[s, "none"] for s in GUIDANCE_SEEDS]
    ok = all(d >= 2.0 for d in deltas)
    detail = "; ".join(f"seed {s}: none {scores[s, 'none']:.2f} reference {scores[s, 'reference']:.2f}" for s in GUIDANCE_SEEDS)
    record(4, "guidance benefit", ok, f"{detail}; deltas {[round(d, 2) for d in deltas]} (need all >= 2.0)")
    assert ok


# ------------------------------------------------------------------ metrics and extraction


def brute_ngram_overlap(cand, ref, n):
    grams_c = [tuple(cand[i : i + n]) for i in range(len(cand) - n + 1)]
    grams_r = [tuple(ref[i : i + n]) for i in range(len(ref) - n + 1)]
    remaining = list(grams_r)
    hit = 0
    for g in grams_c:
        if g in remaining:
            remaining.remove(g)
            hit += 1
    return hit, len(grams_c), len(grams_r)


def quadratic_lcs(a, b):
    table = [[0] * (len(b) + 1) for _ in range(len(a) + 1)]
    for i in range(1, len(a) + 1):
        for j in range(1, len(b) + 1):
            table[i][j] = table[i - 1][j - 1] + 1 if a[i - 1] == b[j - 1] else max(table[i - 1][j], table[i][j - 1])
    return table[-1][-1]


def f1_from(hit, n_c, n_r):
    p = hit / n_c if n_c else 0.0
    r = hit / n_r if n_r else 0.0
    return 2 * p * r / (p + r) if p + r > 0 else 0.0


def test_05_metric_oracles():
    r = random.Random(0)
    mismatches = 0
    for _ in range(100):
        cand = [r.choice("abcde") for _ in range(r.randint(0, 12))]
        ref = [r.choice("abcde") for _ in range(r.randint(1, 12))]
        for n in (1, 2):
            mismatches += rouge_n(cand, ref, n).f1 != f1_from(*brute_ngram_overlap(cand, ref, n))
        mismatches += lcs_length(cand, ref) != quadratic_lcs(cand, ref)
        mismatches += rouge_l(cand, ref).f1 != f1_from(quadratic_lcs(cand, ref), len(cand), len(ref))
    hand_n = rouge_n("the cat sat", "the cat", 1)
    hand_l = rouge_l("a b c d", "a c d")
    hands = (
        abs(hand_n.precision - 2 / 3) <= 1e-12 and hand_n.recall == 1.0 and abs(hand_n.f1 - 0.8) <= 1e-12
        and abs(hand_l.f1 - 6 / 7) <= 1e-12
    )
    ok = mismatches == 0 and hands
    record(5, "metric oracle equivalence", ok, f"{mismatches} mismatches on 100 pairs; hand cases {'ok' if hands else 'wrong'}")
    assert ok


def test_06_oracle_quality():
    r = random.Random(0)
    words = "abcdefghij"
    ratios = []
    for _ in range(200):
        sents = [" ".join(r.choice(words) for _ in range(r.randint(2, 7))) + " ." for _ in range(6)]
        ref = " ".join(r.choice(words) for _ in range(r.randint(3, 12)))
        greedy = oracle_objective(sents, oracle_extract(sents, ref)[0], ref)
        best = max(oracle_objective(sents, s, ref) for k in range(1, 7) for s in itertools.combinations(range(6), k))
        ratios.append(greedy / best if best > 0 else 1.0)
    mean = float(np.mean(ratios))
    ok = mean >= 0.9
    record(6, "extractive oracle quality", ok, f"mean greedy/exhaustive objective {mean:.4f} on 200 docs (min {min(ratios):.3f})")
    assert ok


# ------------------------------------------------------------------ decoding


def test_07_decoding_equivalences():
    rng = np.random.default_rng(0)
    greedy_mismatch = 0
    for i in range(50):
        model = GuidedTransformer(tiny_config(), seed=i % 5, dtype=np.float64)
        model.embed.data *= 40.0
        src = [BOS, *rng.integers(5, 50, int(rng.integers(2, 10))).tolist(), EOS]
        guide = [BOS, *rng.integers(5, 50, int(rng.integers(1, 6))).tolist(), EOS]
        greedy_mismatch += beam_search(model, src, guide, width=1, max_len=8) != greedy_decode(model, src, guide, 8)

    # 5 special ids + 2 words; PAD, BOS and the separator are never generated, leaving 4 choices
    vocab_size, max_len = 7, 3
    allowed = [t for t in range(vocab_size) if t not in BANNED]
    exhaustive_mismatch = 0
    for seed in range(20):
        model = GuidedTransformer(tiny_config(vocab_size=vocab_size), seed=seed, dtype=np.float64)
        model.embed.data /= 8.0
        model.out_bias.data[:] = np.random.default_rng(100 + seed).normal(0.0, 1.0, vocab_size)
        src = [BOS, *rng.integers(5, vocab_size, 4).tolist(), EOS]
        guide = [BOS, int(rng.integers(5, vocab_size)), EOS]
        best = None
        for length in range(1, max_len + 1):
            for body in itertools.product(allowed, repeat=length):
                if EOS in body[:-1] or (length < max_len and body[-1] != EOS):
                    continue
                ids = (BOS, *body)
                lp = _score(model, src, guide, ids)
                if best is None or (-lp, ids) < (-best[0], best[1]):
                    best = (lp, ids)
        exhaustive_mismatch += tuple(beam_search(model, src, guide, width=len(allowed) ** max_len, max_len=max_len)) != best[1]
    ok = greedy_mismatch == 0 and exhaustive_mismatch == 0
    record(7, "decoding equivalences", ok,
           f"width-1 vs greedy mismatches {greedy_mismatch}/50; beam vs exhaustive mismatches {exhaustive_mismatch}/20")
    assert ok


def _score(model, src, guide, ids):
    """Teacher-forced log-probability recomputed prefix by prefix."""
    model.eval()
    total = 0.0
    with T.no_grad():
        h_src = model.encode(np.array([src]))
        h_g = model.encode_guidance(np.array([guide]))
        for t in range(1, len(ids)):
            z = model.decode(np.array([ids[:t]]), h_src, np.ones((1, len(src)), bool), h_g, np.ones((1, len(guide)), bool)).data[0, -1]
            z = z.astype(np.float64)
            z[list(BANNED)] = -np.inf
            total += z[ids[t]] - (np.log(np.exp(z - z.max()).sum()) + z.max())
    return float(total)


# ------------------------------------------------------------------ clustering and optimization


def test_08_clustering():
    ks = [1, 2, 3, 4, 5]
    one, three = [], []
    for seed in range(5):
        r = np.random.default_rng(seed)
        one.append(gap_statistic(r.normal(size=(120, 2)), ks, B=10, seed=seed).chosen_k)
        X = np.concatenate([r.normal(c, 0.5, size=(40, 2)) for c in ((0, 0), (10, 0), (0, 10))])
        three.append(gap_statistic(X, ks, B=10, seed=seed).chosen_k)
    kmeans_mismatch = 0
    for seed in range(40):
        X = np.random.default_rng(seed).normal(size=(3 + seed % 6, 2))
        kmeans_mismatch += not np.isclose(kmeans_best(X, 2, seed=seed, n_init=16).inertia, exhaustive_two_partition(X), rtol=1e-9, atol=1e-12)
    sil = (
        silhouette(np.array([[0.0], [0.0], [1.0], [1.0]]), [0, 0, 1, 1]) == 1.0
        and silhouette(np.array([[0.0], [0.1], [5.0]]), [0, 0, 1]) == ((5.0 - 0.1) / 5.0 + (4.9 - 0.1) / 4.9) / 3
    )
    ok = one == [1] * 5 and three == [3] * 5 and kmeans_mismatch == 0 and sil
    record(8, "clustering", ok,
           f"gap k on one blob {one}, on three blobs {three}; kmeans vs exhaustive mismatches {kmeans_mismatch}/40; silhouette {'ok' if sil else 'wrong'}")
    assert ok


def hand_adam(theta, grads, lr, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        theta -= lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)
    return theta


def test_09_schedule_and_optimizer():
    cfg = TrainConfig()
    total = 10_000
    sched = (lr_at(0, total, cfg), lr_at(1000, total, cfg), lr_at(total, total, cfg))
    sched_ok = sched == (0.0, 5e-5, 0.0)
    r = np.random.default_rng(0)
    worst = 0.0
    for _ in range(20):
        theta0, grads = float(r.normal()), r.normal(size=15).tolist()
        params = {"w": np.array([theta0])}
        state = AdamState()
        for g in grads:
            adamw_step(params, {"w": np.array([g])}, state, lr=1e-2, weight_decay=0.0)
        worst = max(worst, abs(params["w"][0] - hand_adam(theta0, grads, 1e-2)))
    ok = sched_ok and worst <= 1e-12
    record(9, "schedule and optimizer", ok, f"lr_at(0, 1000, total) = {sched}; AdamW vs hand Adam max diff {worst:.1e}")
    assert ok


def test_10_reproducibility(tmp_path):
    assert main(["synth", "--out", str(tmp_path / "data"), "--seed", "2", "--n-examples", "60"]) == 0
    flags = ["--corpus", str(tmp_path / "data" / "corpus.jsonl"), "--guidance", "reference", "--seed", "9",
             "--epochs", "2", "--batch-size", "8", "--lr", "1e-3", "--warmup", "3", "--precision", "64",
             "--d-model", "16", "--heads", "2", "--d-ffn", "32", "--max-len", "16", "--max-src-len", "64"]
    for run in ("a", "b"):
        assert main(["train", *flags, "--out", str(tmp_path / run)]) == 0
    same = {name: (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
            for name in ("best.ckpt", "train_log.jsonl", "vocab.txt")}
    n_records = len((tmp_path / "a" / "train_log.jsonl").read_text().splitlines())
    ok = all(same.values()) and n_records > 0
    record(10, "reproducibility", ok, f"byte-identical {same} ({n_records} log records)")
    assert ok


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-q"]))
