import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import tiny_config
from guidesum import tensor as T
from guidesum.decode import BANNED, beam_search, greedy_decode, greedy_decode_batch, sequence_log_prob
from guidesum.model import GuidedTransformer, make_batch
from guidesum.text import BOS, EOS, GUIDE_SEP, PAD
from guidesum.train import AdamState, adamw_step


def random_model(seed, vocab_size=50, **kw):
    model = GuidedTransformer(tiny_config(vocab_size=vocab_size, **kw), seed=seed, dtype=np.float64)
    # sharpen the output distribution so decoding is not a near-uniform coin toss
    model.embed.data *= 40.0
    return model


def random_input(rng, vocab_size=50, n=None):
    n = n or int(rng.integers(2, 10))
    src = [BOS, *rng.integers(5, vocab_size, n).tolist(), EOS]
    guide = [BOS, *rng.integers(5, vocab_size, int(rng.integers(1, 6))).tolist(), EOS]
    return src, guide


class TestGreedy:
    def test_single_token(self, rng):
        model = random_model(0)
        src, guide = random_input(rng)
        out = greedy_decode(model, src, guide, max_len=1)
        assert len(out) == 2 and out[0] == BOS

    def test_deterministic(self, rng):
        model = random_model(1)
        src, guide = random_input(rng)
        assert greedy_decode(model, src, guide, 8) == greedy_decode(model, src, guide, 8)

    def test_batch_matches_single(self, rng):
        model = random_model(2)
        pairs = [random_input(rng) for _ in range(5)]
        batched = greedy_decode_batch(model, [p[0] for p in pairs], [p[1] for p in pairs], 8)
        assert batched == [greedy_decode(model, s, g, 8) for s, g in pairs]

    def test_needs_guidance(self, rng):
        with pytest.raises(ValueError):
            greedy_decode(random_model(0), [BOS, 7, EOS], None, 4)

    def test_clamps_to_model_limit(self, rng):
        model = random_model(3)
        model.out_bias.data[...] = 0.0
        model.out_bias.data[7] = 1e6  # never emits EOS
        out = greedy_decode(model, [BOS, 9, EOS], [BOS, 9, EOS], max_len=500)
        assert len(out) == model.cfg.max_tgt_len + 1

    def test_overfit_pair_is_reproduced(self):
        cfg = tiny_config(vocab_size=20, guidance_enabled=False)
        model = GuidedTransformer(cfg, seed=0, dtype=np.float64)
        src, tgt = [BOS, 5, 6, 7, EOS], [BOS, 9, 8, 12, 11, EOS]
        batch = make_batch([src], [tgt])
        params = model.parameters()
        state = AdamState()
        for _ in range(150):
            model.zero_grad()
            _, loss = model.forward_train(batch)
            T.backward(loss)
            adamw_step({k: p.data for k, p in params.items()}, {k: p.grad for k, p in params.items()}, state, lr=1e-2)
        assert loss.item() < 0.01
        assert greedy_decode(model, src, None, 10) == tgt


class TestBeam:
    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10**6))
    def test_width_one_is_greedy(self, seed):
        rng = np.random.default_rng(seed)
        model = random_model(seed % 7)
        src, guide = random_input(rng)
        assert beam_search(model, src, guide, width=1, max_len=7) == greedy_decode(model, src, guide, 7)

    @pytest.mark.parametrize("seed", range(8))
    def test_exhaustive_small_vocab(self, seed):
        # 5 specials + 4 content tokens; PAD/BOS/SEP are never generated
        model = small_vocab_model(seed)
        rng = np.random.default_rng(seed)
        src, guide = random_input(rng, vocab_size=9)
        max_len = 3
        allowed = [t for t in range(9) if t not in BANNED]
        best = None
        for length in range(1, max_len + 1):
            for body in itertools.product(allowed, repeat=length):
                if EOS in body[:-1] or (length < max_len and body[-1] != EOS):
                    continue
                ids = (BOS, *body)
                lp = brute_log_prob(model, src, guide, ids)
                if best is None or (-lp, ids) < (-best[0], best[1]):
                    best = (lp, ids)
        got = beam_search(model, src, guide, width=64, max_len=max_len)
        assert tuple(got) == best[1]

    def test_best_beats_completed_pool(self, rng):
        model = random_model(5)
        src, guide = random_input(rng)
        best, completed = beam_search(model, src, guide, width=4, max_len=6, return_pool=True)
        assert all(best.log_prob >= h.log_prob for h in completed)
        assert best.log_prob <= 0
        assert all(h.finished and h.ids[-1] == EOS for h in completed)
        assert best.log_prob == pytest.approx(sequence_log_prob(model, src, guide, best.ids), abs=1e-9)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10**6), st.integers(1, 6), st.integers(1, 6))
    def test_output_shape_invariants(self, seed, width, max_len):
        rng = np.random.default_rng(seed)
        model = random_model(seed % 5)
        src, guide = random_input(rng)
        out = beam_search(model, src, guide, width=width, max_len=max_len)
        assert out[0] == BOS
        assert out.count(EOS) <= 1 and (EOS not in out or out[-1] == EOS)
        assert len(out) <= max_len + 1
        assert not set(out[1:]) & {PAD, BOS, GUIDE_SEP}

    def test_bad_width(self):
        with pytest.raises(ValueError):
            beam_search(random_model(0), [BOS, 6, EOS], [BOS, 6, EOS], width=0)


def small_vocab_model(seed):
    """Vocabulary of 9 with a mild random output bias, so both short and long answers occur."""
    model = random_model(seed, vocab_size=9)
    model.embed.data /= 8.0
    model.out_bias.data[:] = np.random.default_rng(100 + seed).normal(0.0, 1.0, 9)
    model.out_bias.data[EOS] -= 1.0
    return model


def brute_log_prob(model, src, guide, ids):
    """Teacher-forced score of ``ids`` computed from scratch, one prefix at a time."""
    model.eval()
    total = 0.0
    with T.no_grad():
        h_src = model.encode(np.array([src]))
        h_g = model.encode_guidance(np.array([guide]))
        for t in range(1, len(ids)):
            logits = model.decode(np.array([ids[:t]]), h_src, np.ones((1, len(src)), bool), h_g, np.ones((1, len(guide)), bool)).data[0, -1]
            z = logits.astype(np.float64)
            z[[PAD, BOS, GUIDE_SEP]] = -np.inf
            total += z[ids[t]] - (np.log(np.exp(z - z.max()).sum()) + z.max())
    return float(total)
