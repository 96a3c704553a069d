"""AdamW training loop with warmup/linear decay, periodic evaluation and checkpoint IO."""

from __future__ import annotations

import json
import math
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import tensor as T
from .data import Example
from .decode import greedy_decode_batch
from .errors import (
    CheckpointError,
    ConfigError,
    DivergenceError,
    InputError,
    NumericError,
    ShapeMismatchError,
    TruncationError,
    VersionError,
)
from .extractive import GuidancePool, sample_index
from .metrics import evaluate_corpus
from .model import GuidedTransformer, ModelConfig, make_batch
from .text import Vocabulary, decode, encode_text

GUIDANCE_CHOICES = ("none", "reference", "oracle")
CHECKPOINT_MAGIC = b"GSLAB1"
CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    batch_size: int = 8
    lr_peak: float = 5e-5
    weight_decay: float = 0.01
    warmup_steps: int = 1000
    epochs: int = 10
    eval_interval_epochs: float = 0.3
    guidance_mode: str = "none"
    seed: int = 0
    precision: int = 32
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    clip_norm: float | None = 1.0
    max_steps: int | None = None  # stop early; the schedule still spans the full run
    eval_max_len: int | None = None
    eval_batch_size: int = 64

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be positive")
        if self.warmup_steps < 1:
            raise ConfigError("warmup_steps must be at least 1")
        if not self.eval_interval_epochs > 0:
            raise ConfigError("eval_interval_epochs must be positive")
        if self.epochs < 1:
            raise ConfigError("epochs must be positive")
        if self.guidance_mode not in GUIDANCE_CHOICES:
            raise ConfigError(f"guidance_mode must be one of {GUIDANCE_CHOICES}")
        if self.precision not in (32, 64):
            raise ConfigError("precision must be 32 or 64")
        if self.lr_peak <= 0 or self.weight_decay < 0:
            raise ConfigError("lr_peak must be positive and weight_decay non-negative")
        self.betas = tuple(float(b) for b in self.betas)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


def lr_at(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Linear warmup from 0 to the peak, then linear decay to 0 at ``total_steps``."""
    if total_steps <= cfg.warmup_steps:
        raise ConfigError(f"total_steps ({total_steps}) must exceed warmup_steps ({cfg.warmup_steps})")
    if not 0 <= step <= total_steps:
        raise InputError(f"step {step} outside [0, {total_steps}]")
    if step <= cfg.warmup_steps:
        return cfg.lr_peak * step / cfg.warmup_steps
    return cfg.lr_peak * (total_steps - step) / (total_steps - cfg.warmup_steps)


# ---------------------------------------------------------------- optimizer


@dataclass
class AdamState:
    step: int = 0
    m: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)
    v: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)


def adamw_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    moments: AdamState,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    weight_decay: float | Mapping[str, float] = 0.0,
) -> AdamState:
    """One in-place AdamW update with bias correction and decoupled decay.

    ``weight_decay`` may be a per-name mapping. Missing moment buffers are
    created as zeros.
    """
    b1, b2 = betas
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient in {name!r}")
    moments.step += 1
    t = moments.step
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, w in params.items():
        g = grads[name]
        if g.shape != w.shape:
            raise InputError(f"gradient for {name!r} has shape {g.shape}, weight has {w.shape}")
        m = moments.m.get(name)
        if m is None:
            m = moments.m[name] = np.zeros_like(w)
            moments.v[name] = np.zeros_like(w)
        v = moments.v[name]
        wd = weight_decay.get(name, 0.0) if isinstance(weight_decay, Mapping) else weight_decay
        if wd:
            w *= 1.0 - lr * wd
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        w -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return moments


def decays(name: str) -> bool:
    """Biases and layer-norm parameters are exempt from weight decay."""
    leaf = name.rsplit(".", 1)[-1]
    return leaf not in ("bias", "gain") and name != "out_bias"


def clip_global_norm(grads: Mapping[str, np.ndarray], max_norm: float) -> float:
    norm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))
    if norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for g in grads.values():
            g *= scale
    return norm


# --------------------------------------------------------------- checkpoint


@dataclass
class Checkpoint:
    model_config: ModelConfig
    weights: "OrderedDict[str, np.ndarray]"
    moments: AdamState
    step: int
    best_rouge1: float
    version: int = CHECKPOINT_VERSION
    extra: dict = field(default_factory=dict)

    def build_model(self, cfg: ModelConfig | None = None) -> GuidedTransformer:
        cfg = cfg or self.model_config
        dtype = next(iter(self.weights.values())).dtype if self.weights else np.float32
        model = GuidedTransformer(cfg, seed=0, dtype=dtype)
        load_weights(model, self)
        return model


def snapshot(model: GuidedTransformer, opt: AdamState, step: int, best: float, extra: dict | None = None) -> Checkpoint:
    return Checkpoint(
        model.cfg,
        model.state_dict(),
        AdamState(opt.step, OrderedDict((k, v.copy()) for k, v in opt.m.items()), OrderedDict((k, v.copy()) for k, v in opt.v.items())),
        step,
        best,
        extra=dict(extra or {}),
    )


def load_weights(model: GuidedTransformer, ckpt: Checkpoint) -> None:
    """Copy checkpoint weights into ``model``; the first mismatching tensor is reported."""
    params = model.parameters()
    for name, p in params.items():
        if name not in ckpt.weights:
            raise ShapeMismatchError(name, p.shape, None)
        found = ckpt.weights[name].shape
        if found != p.shape:
            raise ShapeMismatchError(name, p.shape, found)
    extra = [n for n in ckpt.weights if n not in params]
    if extra:
        raise ShapeMismatchError(extra[0], None, ckpt.weights[extra[0]].shape)
    for name, p in params.items():
        p.data[...] = ckpt.weights[name]


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Magic, 8-byte little-endian header length, JSON header, raw little-endian payload."""
    blobs = [(name, arr) for name, arr in ckpt.weights.items()]
    blobs += [(f"adam.m/{k}", v) for k, v in ckpt.moments.m.items()]
    blobs += [(f"adam.v/{k}", v) for k, v in ckpt.moments.v.items()]
    directory = []
    offset = 0
    chunks = []
    seen = set()
    for name, arr in blobs:
        if name in seen:
            raise CheckpointError(f"duplicate tensor name {name!r}")
        seen.add(name)
        arr = np.ascontiguousarray(arr)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = le.tobytes()
        directory.append({"name": name, "shape": list(arr.shape), "dtype": le.dtype.str, "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = {
        "version": ckpt.version,
        "model_config": ckpt.model_config.to_dict(),
        "step": int(ckpt.step),
        "optimizer_step": int(ckpt.moments.step),
        "best_rouge1": float(ckpt.best_rouge1),
        "tensors": directory,
        "payload_bytes": offset,
        "extra": ckpt.extra,
    }
    hdr = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(hdr)))
        fh.write(hdr)
        for raw in chunks:
            fh.write(raw)


def load_checkpoint(path) -> Checkpoint:
    try:
        blob = Path(path).read_bytes()
    except FileNotFoundError:
        raise
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if blob[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        if CHECKPOINT_MAGIC.startswith(blob):
            raise TruncationError("checkpoint ends inside the magic string")
        if blob[:5] == CHECKPOINT_MAGIC[:5]:
            raise VersionError(f"unsupported checkpoint format {blob[:6]!r}")
        raise CheckpointError("not a checkpoint file")
    pos = len(CHECKPOINT_MAGIC)
    if len(blob) < pos + 8:
        raise TruncationError("checkpoint ends inside the header length")
    (hlen,) = struct.unpack("<Q", blob[pos : pos + 8])
    pos += 8
    if len(blob) < pos + hlen:
        raise TruncationError("checkpoint ends inside the header")
    try:
        header = json.loads(blob[pos : pos + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from exc
    pos += hlen
    if header.get("version") != CHECKPOINT_VERSION:
        raise VersionError(f"checkpoint version {header.get('version')!r}, expected {CHECKPOINT_VERSION}")
    payload = blob[pos:]
    if len(payload) != header["payload_bytes"]:
        raise TruncationError(f"payload has {len(payload)} bytes, header declares {header['payload_bytes']}")
    weights: OrderedDict[str, np.ndarray] = OrderedDict()
    m: OrderedDict[str, np.ndarray] = OrderedDict()
    v: OrderedDict[str, np.ndarray] = OrderedDict()
    for entry in header["tensors"]:
        dt = np.dtype(entry["dtype"])
        shape = tuple(entry["shape"])
        expected = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        if expected != entry["nbytes"]:
            raise CheckpointError(f"tensor {entry['name']!r}: {entry['nbytes']} bytes do not fit shape {shape}")
        start = entry["offset"]
        arr = np.frombuffer(payload, dtype=dt, count=int(np.prod(shape, dtype=np.int64)), offset=start).reshape(shape)
        arr = arr.astype(dt.newbyteorder("="), copy=True)
        name = entry["name"]
        if name.startswith("adam.m/"):
            m[name[7:]] = arr
        elif name.startswith("adam.v/"):
            v[name[7:]] = arr
        else:
            weights[name] = arr
    return Checkpoint(
        ModelConfig.from_dict(header["model_config"]),
        weights,
        AdamState(int(header["optimizer_step"]), m, v),
        int(header["step"]),
        float(header["best_rouge1"]),
        int(header["version"]),
        header.get("extra", {}),
    )


# --------------------------------------------------------------------- loop


@dataclass
class TrainResult:
    best: Checkpoint
    final: Checkpoint
    log: list[dict]


class TrainLog:
    """Event records kept in memory and optionally appended to a JSON-lines file."""

    def __init__(self, path=None):
        self.records: list[dict] = []
        self._fh = open(path, "w", encoding="utf-8") if path else None

    def write(self, record: dict) -> None:
        self.records.append(record)
        if self._fh:
            self._fh.write(json.dumps(record, sort_keys=True) + "\n")
            self._fh.flush()

    def close(self) -> None:
        if self._fh:
            self._fh.close()
            self._fh = None


def evaluate_model(
    model: GuidedTransformer,
    vocab: Vocabulary,
    sources: Sequence[list[int]],
    references: Sequence[str],
    guides: Sequence[list[int]] | None,
    max_len: int,
    batch_size: int = 64,
) -> dict:
    """Greedy-decode every source and score the candidates with corpus ROUGE."""
    pairs = []
    for start in range(0, len(sources), batch_size):
        stop = start + batch_size
        outs = greedy_decode_batch(model, sources[start:stop], None if guides is None else guides[start:stop], max_len)
        for ids, ref in zip(outs, references[start:stop]):
            pairs.append((" ".join(decode(vocab, ids)), ref))
    return evaluate_corpus(pairs)


def train(
    model: GuidedTransformer,
    vocab: Vocabulary,
    train_set: Sequence[Example],
    eval_set: Sequence[Example],
    cfg: TrainConfig,
    oracles: Mapping[str, str] | None = None,
    log_path=None,
    checkpoint_path=None,
    extra: dict | None = None,
    on_step: Callable[[int, float], None] | None = None,
) -> TrainResult:
    """Train ``model`` in place and return the best-by-eval-ROUGE-1 checkpoint.

    Data order, guidance draws and dropout come from separate child streams
    of ``cfg.seed``. Evaluation runs every ``floor(eval_interval_epochs *
    steps_per_epoch)`` steps and at the end of training.
    """
    if not train_set or not eval_set:
        raise InputError("train and eval splits must be non-empty")
    mc = model.cfg
    guided = cfg.guidance_mode != "none"
    if guided != mc.guidance_enabled:
        raise ConfigError(f"guidance_mode={cfg.guidance_mode!r} does not match model guidance_enabled={mc.guidance_enabled}")
    if cfg.guidance_mode == "oracle":
        if not oracles:
            raise ConfigError("oracle guidance needs an oracle file; run the `oracle` command first")
        missing = [e.id for e in train_set if e.id not in oracles]
        if missing:
            raise ConfigError(f"oracle file has no entry for {missing[0]!r}")

    order_ss, guide_ss, drop_ss, eval_ss = np.random.SeedSequence(cfg.seed).spawn(4)
    order_rng = np.random.default_rng(order_ss)
    guide_rng = np.random.default_rng(guide_ss)
    drop_rng = np.random.default_rng(drop_ss)

    src = [encode_text(vocab, e.source, mc.max_src_len, True, True) for e in train_set]
    tgt = [encode_text(vocab, e.summary, mc.max_tgt_len, True, True) for e in train_set]
    ev_src = [encode_text(vocab, e.source, mc.max_src_len, True, True) for e in eval_set]
    ev_ref = [e.summary for e in eval_set]
    pool = guide_ids = ev_guides = None
    if guided:
        pool = GuidancePool.from_examples(train_set, oracles)
        text_of = (lambda en: en.summary) if cfg.guidance_mode == "reference" else (lambda en: en.oracle)
        guide_ids = [encode_text(vocab, text_of(en), mc.max_guid_len, True, True) for en in pool.entries]
        eval_rng = np.random.default_rng(eval_ss)
        ev_guides = [guide_ids[sample_index(pool, e.id, eval_rng)] for e in eval_set]

    n = len(train_set)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    lr_at(0, total_steps, cfg)  # validates the schedule before any work
    stop_at = min(total_steps, cfg.max_steps) if cfg.max_steps else total_steps
    eval_every = max(1, math.floor(cfg.eval_interval_epochs * steps_per_epoch))
    eval_len = min(cfg.eval_max_len or mc.max_tgt_len, mc.max_tgt_len)

    params = model.parameters()
    wd = {name: (cfg.weight_decay if decays(name) else 0.0) for name in params}
    opt = AdamState()
    meta = {"train_config": cfg.to_dict(), "vocab": list(vocab.id_to_token), **(extra or {})}
    log = TrainLog(log_path)
    best: Checkpoint | None = None
    best_r1 = -math.inf
    step = 0
    model.train()
    try:
        for epoch in range(cfg.epochs):
            perm = order_rng.permutation(n)
            for start in range(0, n, cfg.batch_size):
                if step >= stop_at:
                    break
                idx = perm[start : start + cfg.batch_size]
                guide = None
                if guided:
                    guide = [guide_ids[sample_index(pool, train_set[i].id, guide_rng)] for i in idx]
                batch = make_batch([src[i] for i in idx], [tgt[i] for i in idx], guide)
                model.zero_grad()
                _, loss = model.forward_train(batch, drop_rng)
                value = float(loss.data)
                step += 1
                if not math.isfinite(value):
                    log.write({"event": "diverged", "step": step, "loss": value})
                    raise DivergenceError(f"loss became {value} at step {step}", best, log.records)
                T.backward(loss)
                grads = OrderedDict((k, p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items())
                gnorm = clip_global_norm(grads, cfg.clip_norm) if cfg.clip_norm else None
                lr = lr_at(step, total_steps, cfg)
                try:
                    adamw_step(OrderedDict((k, p.data) for k, p in params.items()), grads, opt, lr, cfg.betas, cfg.eps, wd)
                except NumericError as exc:
                    raise DivergenceError(str(exc), best, log.records) from exc
                rec = {"event": "train", "split": "train", "step": step, "epoch": epoch, "loss": value, "lr": lr}
                if gnorm is not None:
                    rec["grad_norm"] = gnorm
                log.write(rec)
                if on_step:
                    on_step(step, value)
                if step % eval_every == 0 or step == stop_at:
                    scores = evaluate_model(model, vocab, ev_src, ev_ref, ev_guides, eval_len, cfg.eval_batch_size)
                    model.train()
                    log.write({"event": "eval", "split": "eval", "step": step, "epoch": epoch, **scores})
                    if scores["rouge1"] > best_r1:
                        best_r1 = scores["rouge1"]
                        best = snapshot(model, opt, step, best_r1, meta)
                        if checkpoint_path:
                            save_checkpoint(best, checkpoint_path)
            if step >= stop_at:
                break
    finally:
        log.close()
    final = snapshot(model, opt, step, best_r1, meta)
    return TrainResult(best if best is not None else final, final, log.records)
