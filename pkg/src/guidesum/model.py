"""Post-norm transformer encoder-decoder with a summary-guidance branch.

The encoder is shared: it encodes both the source document and the sampled
guidance summary. Every decoder layer gets one extra cross-attention block
that attends to the encoded guidance before the usual source cross-attention.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, fields
from typing import Iterator, Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, InputError, LengthError
from .tensor import Tensor
from .text import PAD


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int = 64
    n_heads: int = 4
    n_enc_layers: int = 2
    n_dec_layers: int = 2
    d_ffn: int = 256
    max_src_len: int = 1024
    max_tgt_len: int = 128
    max_guid_len: int = 128
    guidance_enabled: bool = True
    dropout_rate: float = 0.1
    ln_eps: float = 1e-5
    guidance_zero_init: bool = False

    def __post_init__(self):
        for name in ("vocab_size", "d_model", "n_heads", "n_enc_layers", "n_dec_layers", "d_ffn"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if min(self.max_src_len, self.max_tgt_len, self.max_guid_len) < 2:
            raise ConfigError("maximum lengths must be at least 2")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError("dropout_rate must lie in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})

    def replace(self, **changes) -> "ModelConfig":
        return ModelConfig(**{**self.to_dict(), **changes})


# ------------------------------------------------------------------ modules


class Module:
    training = True

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def parameters(self) -> "OrderedDict[str, Tensor]":
        return OrderedDict(self.named_parameters())

    def modules(self) -> Iterator["Module"]:
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.grad = None


def _param(data: np.ndarray, dtype) -> Tensor:
    return Tensor(np.ascontiguousarray(data, dtype=dtype), requires_grad=True)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, dtype, bias: bool = True):
        bound = math.sqrt(6.0 / (d_in + d_out))
        self.weight = _param(rng.uniform(-bound, bound, (d_in, d_out)), dtype)
        self.bias = _param(np.zeros(d_out), dtype) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, d: int, dtype, eps: float = 1e-5):
        self.gain = _param(np.ones(d), dtype)
        self.bias = _param(np.zeros(d), dtype)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.bias, self.eps)


def attention(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Scaled dot-product attention over the last two axes.

    Scores are divided by the square root of the query/key width. ``mask`` is
    boolean and broadcastable to the score shape, with True marking
    attendable keys.
    """
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise InputError(f"attention shapes disagree: q{q.shape} k{k.shape} v{v.shape}")
    if q.ndim == 2:
        q, k, v = (t.reshape(1, *t.shape) for t in (q, k, v))
        return attention(q, k, v, mask).reshape(q.shape[1], v.shape[-1])
    weights = T.softmax(T.matmul_nt(q, k), axis=-1, mask=mask, scale=1.0 / math.sqrt(q.shape[-1]))
    return weights @ v


class MultiHeadAttention(Module):
    """Heads are folded into single d_model x d_model projections."""

    def __init__(self, d_model: int, n_heads: int, rng: np.random.Generator, dtype):
        self.n_heads = n_heads
        self.q = Linear(d_model, d_model, rng, dtype)
        # a key bias only shifts every score in a row by the same amount
        self.k = Linear(d_model, d_model, rng, dtype, bias=False)
        self.v = Linear(d_model, d_model, rng, dtype)
        self.out = Linear(d_model, d_model, rng, dtype)

    def __call__(self, x_q: Tensor, x_kv: Tensor, mask: np.ndarray | None) -> Tensor:
        h = self.n_heads
        ctx = attention(T.split_heads(self.q(x_q), h), T.split_heads(self.k(x_kv), h), T.split_heads(self.v(x_kv), h), mask)
        return self.out(T.merge_heads(ctx))


class FeedForward(Module):
    def __init__(self, d_model: int, d_ffn: int, rng: np.random.Generator, dtype):
        self.fc1 = Linear(d_model, d_ffn, rng, dtype)
        self.fc2 = Linear(d_ffn, d_model, rng, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(T.gelu(self.fc1(x)))


class EncoderLayer(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, dtype):
        self.self_attn = MultiHeadAttention(cfg.d_model, cfg.n_heads, rng, dtype)
        self.ln_self = LayerNorm(cfg.d_model, dtype, cfg.ln_eps)
        self.ffn = FeedForward(cfg.d_model, cfg.d_ffn, rng, dtype)
        self.ln_ffn = LayerNorm(cfg.d_model, dtype, cfg.ln_eps)
        self.dropout_rate = cfg.dropout_rate

    def __call__(self, x: Tensor, key_mask: np.ndarray, rng=None) -> Tensor:
        drop = lambda t: T.dropout(t, self.dropout_rate, rng, self.training)
        x = self.ln_self(x + drop(self.self_attn(x, x, key_mask)))
        return self.ln_ffn(x + drop(self.ffn(x)))


class GuidedDecoderLayer(Module):
    """Self-attention, guidance cross-attention, source cross-attention, FFN.

    The guidance branch reads a normalized copy of the self-attention residual
    stream and adds its output back before the shared post-norm, so a zero
    guidance output projection reproduces the guidance-free layer exactly.
    """

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, guide_rng: np.random.Generator, dtype):
        self.self_attn = MultiHeadAttention(cfg.d_model, cfg.n_heads, rng, dtype)
        self.ln_self = LayerNorm(cfg.d_model, dtype, cfg.ln_eps)
        self.src_attn = MultiHeadAttention(cfg.d_model, cfg.n_heads, rng, dtype)
        self.ln_src = LayerNorm(cfg.d_model, dtype, cfg.ln_eps)
        self.ffn = FeedForward(cfg.d_model, cfg.d_ffn, rng, dtype)
        self.ln_ffn = LayerNorm(cfg.d_model, dtype, cfg.ln_eps)
        self.guide_attn = None
        self.ln_guide = None
        if cfg.guidance_enabled:
            self.guide_attn = MultiHeadAttention(cfg.d_model, cfg.n_heads, guide_rng, dtype)
            self.ln_guide = LayerNorm(cfg.d_model, dtype, cfg.ln_eps)
            if cfg.guidance_zero_init:
                self.guide_attn.out.weight.data[...] = 0.0
                self.guide_attn.out.bias.data[...] = 0.0
        self.dropout_rate = cfg.dropout_rate

    def __call__(
        self,
        x: Tensor,
        self_mask: np.ndarray,
        h_src: Tensor,
        src_mask: np.ndarray,
        h_guide: Tensor | None = None,
        guide_mask: np.ndarray | None = None,
        rng=None,
    ) -> Tensor:
        drop = lambda t: T.dropout(t, self.dropout_rate, rng, self.training)
        h = x + drop(self.self_attn(x, x, self_mask))
        if self.guide_attn is not None:
            if h_guide is None:
                raise InputError("guided decoder layer needs encoded guidance")
            h = h + drop(self.guide_attn(self.ln_guide(h), h_guide, guide_mask))
        h = self.ln_self(h)
        h = self.ln_src(h + drop(self.src_attn(h, h_src, src_mask)))
        return self.ln_ffn(h + drop(self.ffn(h)))


# -------------------------------------------------------------------- batch


@dataclass
class Batch:
    src_ids: np.ndarray
    src_mask: np.ndarray
    tgt_in: np.ndarray
    tgt_mask: np.ndarray
    labels: np.ndarray
    guide_ids: np.ndarray | None = None
    guide_mask: np.ndarray | None = None

    def __len__(self) -> int:
        return self.src_ids.shape[0]


def pad_ids(seqs: Sequence[Sequence[int]]) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad id lists with PAD; returns (ids, mask) where mask marks real tokens."""
    if not seqs:
        raise InputError("cannot pad an empty list of sequences")
    width = max(len(s) for s in seqs)
    if width == 0:
        raise InputError("cannot pad empty sequences")
    ids = np.full((len(seqs), width), PAD, dtype=np.int64)
    mask = np.zeros((len(seqs), width), dtype=bool)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s
        mask[i, : len(s)] = True
    return ids, mask


def make_batch(
    src: Sequence[Sequence[int]],
    tgt: Sequence[Sequence[int]],
    guide: Sequence[Sequence[int]] | None = None,
) -> Batch:
    """Collate encoded examples; each target is [BOS ... EOS] and is shifted for teacher forcing."""
    if not src:
        raise InputError("empty batch")
    src_ids, src_mask = pad_ids(src)
    tgt_in, tgt_mask = pad_ids([t[:-1] for t in tgt])
    labels, _ = pad_ids([t[1:] for t in tgt])
    g_ids = g_mask = None
    if guide is not None:
        g_ids, g_mask = pad_ids(guide)
    return Batch(src_ids, src_mask, tgt_in, tgt_mask, labels, g_ids, g_mask)


# -------------------------------------------------------------------- model


class GuidedTransformer(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0, dtype=np.float32):
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        main_ss, guide_ss = np.random.SeedSequence(seed).spawn(2)
        rng = np.random.default_rng(main_ss)
        guide_rng = np.random.default_rng(guide_ss)
        d = cfg.d_model
        self.embed = _param(rng.normal(0.0, 0.02, (cfg.vocab_size, d)), dtype)
        self.enc_pos = _param(rng.normal(0.0, 0.02, (max(cfg.max_src_len, cfg.max_guid_len), d)), dtype)
        self.dec_pos = _param(rng.normal(0.0, 0.02, (cfg.max_tgt_len, d)), dtype)
        self.encoder = [EncoderLayer(cfg, rng, dtype) for _ in range(cfg.n_enc_layers)]
        self.decoder = [GuidedDecoderLayer(cfg, rng, guide_rng, dtype) for _ in range(cfg.n_dec_layers)]
        self.out_bias = _param(np.zeros(cfg.vocab_size), dtype)

    # -- encoder

    def _encode(self, ids: np.ndarray, mask: np.ndarray | None, limit: int, rng=None) -> Tensor:
        ids = np.atleast_2d(np.asarray(ids, dtype=np.int64))
        mask = np.ones(ids.shape, dtype=bool) if mask is None else np.atleast_2d(np.asarray(mask, dtype=bool))
        if ids.shape[1] > limit:
            raise LengthError(f"sequence length {ids.shape[1]} exceeds maximum {limit}")
        if mask.shape != ids.shape:
            raise InputError("pad mask shape does not match ids")
        n = ids.shape[1]
        x = T.embedding(self.embed, ids) + T.embedding(self.enc_pos, np.arange(n))
        x = T.dropout(x, self.cfg.dropout_rate, rng, self.training)
        key_mask = mask[:, None, None, :]
        for layer in self.encoder:
            x = layer(x, key_mask, rng)
        return x

    def encode(self, ids, pad_mask=None, rng=None) -> Tensor:
        """Encode source ids of shape (batch, len) into (batch, len, d_model)."""
        return self._encode(ids, pad_mask, self.cfg.max_src_len, rng)

    def encode_guidance(self, ids, pad_mask=None, rng=None) -> Tensor:
        """Same encoder, same weights; only the length limit differs."""
        return self._encode(ids, pad_mask, self.cfg.max_guid_len, rng)

    # -- decoder

    def decode(
        self,
        tgt_in,
        h_src: Tensor,
        src_mask,
        h_guide: Tensor | None = None,
        guide_mask=None,
        tgt_mask=None,
        rng=None,
    ) -> Tensor:
        tgt_in = np.atleast_2d(np.asarray(tgt_in, dtype=np.int64))
        b, m = tgt_in.shape
        if m > self.cfg.max_tgt_len:
            raise LengthError(f"target length {m} exceeds maximum {self.cfg.max_tgt_len}")
        tgt_mask = np.ones((b, m), dtype=bool) if tgt_mask is None else np.asarray(tgt_mask, dtype=bool)
        causal = np.tril(np.ones((m, m), dtype=bool))
        self_mask = causal[None, None] & tgt_mask[:, None, None, :]
        src_key = np.asarray(src_mask, dtype=bool)[:, None, None, :]
        guide_key = None
        if self.cfg.guidance_enabled:
            if h_guide is None:
                raise InputError("model has guidance enabled but no guidance was given")
            guide_key = np.asarray(guide_mask, dtype=bool)[:, None, None, :]
        x = T.embedding(self.embed, tgt_in) + T.embedding(self.dec_pos, np.arange(m))
        x = T.dropout(x, self.cfg.dropout_rate, rng, self.training)
        for layer in self.decoder:
            x = layer(x, self_mask, h_src, src_key, h_guide, guide_key, rng)
        return x @ T.transpose(self.embed) + self.out_bias

    def memory(self, batch: Batch, rng=None) -> tuple[Tensor, Tensor | None]:
        h_src = self.encode(batch.src_ids, batch.src_mask, rng)
        h_guide = None
        if self.cfg.guidance_enabled:
            if batch.guide_ids is None:
                raise InputError("model has guidance enabled but the batch carries no guidance")
            h_guide = self.encode_guidance(batch.guide_ids, batch.guide_mask, rng)
        return h_src, h_guide

    def forward(self, batch: Batch, rng=None) -> Tensor:
        if len(batch) == 0:
            raise InputError("empty batch")
        h_src, h_guide = self.memory(batch, rng)
        return self.decode(batch.tgt_in, h_src, batch.src_mask, h_guide, batch.guide_mask, batch.tgt_mask, rng)

    def forward_train(self, batch: Batch, rng=None) -> tuple[Tensor, Tensor]:
        """Teacher-forced logits (batch, m, vocab) and mean cross-entropy over non-PAD labels."""
        logits = self.forward(batch, rng)
        return logits, T.cross_entropy(logits, batch.labels, ignore_id=PAD)

    # -- state

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((name, p.data.copy()) for name, p in self.named_parameters())

    def load_state_dict(self, state: dict) -> None:
        params = self.parameters()
        missing = set(params) - set(state)
        if missing:
            raise InputError(f"state is missing tensors: {sorted(missing)[:3]}")
        for name, p in params.items():
            value = np.asarray(state[name])
            if value.shape != p.shape:
                raise InputError(f"tensor {name!r}: expected shape {p.shape}, found {value.shape}")
            p.data[...] = value
