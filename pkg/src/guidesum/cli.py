"""Command-line entry point: synth, stats, oracle, train, generate, evaluate, cluster."""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from . import tensor as T
from .cluster import (
    gap_statistic,
    kmeans_best,
    pool_summary_embeddings,
    project_2d,
    silhouette,
    write_cluster_csv,
    write_gap_report,
)
from .data import (
    Example,
    SyntheticTaskConfig,
    corpus_stats,
    generate_synthetic,
    load_corpus,
    read_records,
    save_corpus,
    split_corpus,
    write_records,
)
from .decode import beam_search
from .errors import ConfigError, GuidesumError, IntegrityError
from .extractive import GuidancePool, load_oracle_file, sample_index, write_oracle_file
from .metrics import evaluate_corpus, write_report
from .model import GuidedTransformer, ModelConfig
from .text import SPECIAL_TOKENS, Vocabulary, build_vocab, decode, encode_text
from .train import TrainConfig, load_checkpoint, save_checkpoint, train

SPLITS = ("train", "eval", "test")


class UsageError(Exception):
    """Bad flags or missing inputs; reported with exit code 2."""


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int | None
    inputs: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)
    version: str = __version__

    def write(self, path) -> None:
        payload = {
            "command": self.command,
            "config": self.config,
            "seed": self.seed,
            "inputs": self.inputs,
            "outputs": self.outputs,
            "version": self.version,
        }
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")


def _existing(args, flag: str, hint: str = "") -> Path:
    value = getattr(args, flag.lstrip("-").replace("-", "_"))
    if value is None:
        raise UsageError(f"{flag} is required{hint}")
    p = Path(value)
    if not p.exists():
        raise UsageError(f"{flag}: {value} does not exist{hint}")
    return p


def _out_dir(args) -> Path:
    if not args.out:
        raise UsageError("--out is required")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _manifest(args, out: Path, inputs: dict, outputs: dict) -> None:
    cfg = {k: v for k, v in sorted(vars(args).items()) if k != "func"}
    RunManifest(args.command, cfg, getattr(args, "seed", None), inputs, outputs).write(out / f"{args.command}_manifest.json")


def _splits(args):
    corpus = load_corpus(_existing(args, "--corpus"))
    return dict(zip(SPLITS, split_corpus(corpus, seed=args.split_seed)))


def _oracles(args, required: bool):
    if args.oracle_file is None:
        if required:
            raise UsageError("--guidance oracle needs --oracle-file; run the `oracle` command first to create it")
        return None
    return load_oracle_file(_existing(args, "--oracle-file"))


# ----------------------------------------------------------------- commands


def cmd_synth(args) -> int:
    out = _out_dir(args)
    cfg = SyntheticTaskConfig(vocab_size=args.vocab_size, n_examples=args.n_examples, seed=args.seed)
    path = out / "corpus.jsonl"
    _manifest(args, out, {}, {"corpus": str(path)})
    save_corpus(generate_synthetic(cfg), path)
    return 0


def cmd_stats(args) -> int:
    out = _out_dir(args)
    src = _existing(args, "--corpus")
    _manifest(args, out, {"corpus": str(src)}, {"stats": str(out / "stats.json")})
    write_report(corpus_stats(load_corpus(src)).to_dict(), out / "stats.json")
    return 0


def cmd_oracle(args) -> int:
    out = _out_dir(args)
    src = _existing(args, "--corpus")
    path = out / "oracle.jsonl"
    _manifest(args, out, {"corpus": str(src)}, {"oracle": str(path)})
    write_oracle_file(load_corpus(src), path, args.max_sents)
    return 0


def cmd_train(args) -> int:
    out = _out_dir(args)
    splits = _splits(args)
    oracles = _oracles(args, required=args.guidance == "oracle")
    cfg = TrainConfig(
        batch_size=args.batch_size,
        lr_peak=args.lr,
        warmup_steps=args.warmup,
        epochs=args.epochs,
        guidance_mode=args.guidance,
        seed=args.seed,
        precision=args.precision,
        max_steps=args.max_steps,
        eval_max_len=args.max_len,
    )
    texts = [t for e in splits["train"] for t in (e.source, e.summary)]
    vocab = build_vocab(texts, max_size=args.vocab_size)
    mc = ModelConfig(
        vocab_size=len(vocab),
        d_model=args.d_model,
        n_heads=args.heads,
        n_enc_layers=args.layers,
        n_dec_layers=args.layers,
        d_ffn=args.d_ffn,
        max_src_len=args.max_src_len,
        max_tgt_len=args.max_len,
        max_guid_len=args.max_len,
        guidance_enabled=args.guidance != "none",
        dropout_rate=args.dropout,
    )
    paths = {"checkpoint": str(out / "best.ckpt"), "log": str(out / "train_log.jsonl"), "vocab": str(out / "vocab.txt")}
    _manifest(args, out, {"corpus": args.corpus, "oracle_file": args.oracle_file}, paths)
    vocab.save(paths["vocab"])
    with T.precision(args.precision):
        model = GuidedTransformer(mc, seed=args.seed, dtype=T.dtype_for(args.precision))
        res = train(
            model,
            vocab,
            splits["train"],
            splits["eval"],
            cfg,
            oracles=oracles,
            log_path=paths["log"],
            checkpoint_path=paths["checkpoint"],
            extra={"split_seed": args.split_seed},
        )
    save_checkpoint(res.best, paths["checkpoint"])
    return 0


def _load_model(args):
    ckpt = load_checkpoint(_existing(args, "--checkpoint"))
    vocab = Vocabulary.from_tokens(ckpt.extra["vocab"][len(SPECIAL_TOKENS):])
    return ckpt, ckpt.build_model(), vocab


def cmd_generate(args) -> int:
    out = _out_dir(args)
    ckpt, model, vocab = _load_model(args)
    splits = _splits(args)
    mode = ckpt.extra.get("train_config", {}).get("guidance_mode", "none")
    oracles = _oracles(args, required=mode == "oracle")
    examples = splits[args.split]
    mc = model.cfg
    sources = [encode_text(vocab, e.source, mc.max_src_len, True, True) for e in examples]
    guides = None
    if mc.guidance_enabled:
        pool = GuidancePool.from_examples(splits["train"], oracles)
        rng = np.random.default_rng(args.seed)
        picks = [pool.entries[sample_index(pool, e.id, rng)] for e in examples]
        guides = [encode_text(vocab, p.summary if mode != "oracle" else p.oracle, mc.max_guid_len, True, True) for p in picks]
    path = out / "candidates.jsonl"
    _manifest(args, out, {"checkpoint": args.checkpoint, "corpus": args.corpus}, {"candidates": str(path)})
    with T.precision(32 if model.embed.data.dtype == np.float32 else 64):
        outs = [
            beam_search(model, s, None if guides is None else guides[i], args.beam_width, args.max_len)
            for i, s in enumerate(sources)
        ]
    write_records(({"id": e.id, "candidate": " ".join(decode(vocab, ids))} for e, ids in zip(examples, outs)), path)
    return 0


def cmd_evaluate(args) -> int:
    out = _out_dir(args)
    cand_path = _existing(args, "--candidates")
    refs = _splits(args)[args.split] if args.split else load_corpus(_existing(args, "--corpus"))
    cands = read_records(cand_path, ("id", "candidate"))
    by_id = {}
    for rec in cands:
        if rec["id"] in by_id:
            raise IntegrityError(f"duplicate candidate id {rec['id']!r}")
        by_id[rec["id"]] = rec["candidate"]
    ref_ids = {e.id for e in refs}
    if set(by_id) != ref_ids:
        missing = sorted(ref_ids - set(by_id))
        unknown = sorted(set(by_id) - ref_ids)
        raise IntegrityError(f"candidate ids do not match references (missing {missing[:3]}, unknown {unknown[:3]})")
    path = out / "rouge.json"
    _manifest(args, out, {"candidates": str(cand_path), "corpus": args.corpus}, {"report": str(path)})
    write_report(evaluate_corpus((by_id[e.id], e.summary) for e in refs), path)
    return 0


def cmd_cluster(args) -> int:
    out = _out_dir(args)
    _, model, vocab = _load_model(args)
    train_set = _splits(args)["train"]
    try:
        ks = [int(k) for k in args.k_list.split(",")]
    except ValueError:
        raise UsageError(f"--k-list must be comma-separated integers, got {args.k_list!r}")
    paths = {"gap": str(out / "gap.json"), "clusters": str(out / "clusters.csv")}
    _manifest(args, out, {"checkpoint": args.checkpoint, "corpus": args.corpus}, paths)
    emb = pool_summary_embeddings(model, vocab, [e.summary for e in train_set], [e.id for e in train_set])
    gap = gap_statistic(emb, ks, B=args.gap_b, seed=args.seed)
    best = kmeans_best(emb, gap.chosen_k, seed=args.seed)
    extra = {"silhouette": silhouette(emb, best.assignments) if gap.chosen_k > 1 else None, "n_points": len(emb)}
    write_gap_report(paths["gap"], gap, extra)
    write_cluster_csv(paths["clusters"], emb.ids, best.assignments, project_2d(emb))
    return 0


# ------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="guidesum", description="Guided abstractive summarization toolkit.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, corpus=True, split=True):
        if corpus:
            sp.add_argument("--corpus", help="corpus file, one JSON record per line")
        if split:
            sp.add_argument("--split-seed", type=int, default=0, help="seed of the 80/10/10 train/eval/test split")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--seed", type=int, default=0, help="seed for every random stream of the command")

    sp = sub.add_parser("synth", help="generate the synthetic template corpus")
    common(sp, corpus=False, split=False)
    sp.add_argument("--n-examples", type=int, default=2200, help="number of pairs")
    sp.add_argument("--vocab-size", type=int, default=60, help="word types in the synthetic language")
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("stats", help="corpus statistics")
    common(sp, split=False)
    sp.set_defaults(func=cmd_stats)

    sp = sub.add_parser("oracle", help="greedy ROUGE oracle summaries")
    common(sp, split=False)
    sp.add_argument("--max-sents", type=int, default=5, help="most sentences the oracle may pick")
    sp.set_defaults(func=cmd_oracle)

    sp = sub.add_parser("train", help="train a model")
    common(sp)
    sp.add_argument("--guidance", choices=("none", "reference", "oracle"), default="none", help="what to feed the guidance encoder")
    sp.add_argument("--oracle-file", help="output of the oracle command; needed for --guidance oracle")
    sp.add_argument("--epochs", type=int, default=10)
    sp.add_argument("--batch-size", type=int, default=8)
    sp.add_argument("--lr", type=float, default=5e-5, help="peak learning rate")
    sp.add_argument("--warmup", type=int, default=1000, help="linear warmup steps")
    sp.add_argument("--max-steps", type=int, default=None, help="stop early after this many steps")
    sp.add_argument("--precision", type=int, choices=(32, 64), default=32, help="float width; 64 gives byte-identical reruns")
    sp.add_argument("--max-len", type=int, default=128, help="maximum target and guidance length")
    sp.add_argument("--max-src-len", type=int, default=1024, help="maximum source length")
    sp.add_argument("--vocab-size", type=int, default=32000, help="vocabulary cap, specials included")
    sp.add_argument("--d-model", type=int, default=64)
    sp.add_argument("--heads", type=int, default=4)
    sp.add_argument("--layers", type=int, default=2, help="encoder and decoder layers each")
    sp.add_argument("--d-ffn", type=int, default=256)
    sp.add_argument("--dropout", type=float, default=0.1)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("generate", help="decode a split with a trained checkpoint")
    common(sp)
    sp.add_argument("--checkpoint", help="checkpoint written by train")
    sp.add_argument("--oracle-file", help="oracle summaries; needed for oracle-guided checkpoints")
    sp.add_argument("--split", choices=SPLITS, default="test")
    sp.add_argument("--beam-width", type=int, default=6)
    sp.add_argument("--max-len", type=int, default=128, help="longest summary to generate")
    sp.set_defaults(func=cmd_generate)

    sp = sub.add_parser("evaluate", help="score candidates against references")
    common(sp, split=False)
    sp.add_argument("--candidates", help="generate output: one {id, candidate} record per line")
    sp.add_argument("--split-seed", type=int, default=0, help="split seed used with --split")
    sp.add_argument("--split", choices=SPLITS, default=None, help="score against one split of --corpus")
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("cluster", help="gap statistic and clusters of train summaries")
    common(sp)
    sp.add_argument("--checkpoint", help="checkpoint whose encoder embeds the summaries")
    sp.add_argument("--k-list", default="1,2,4,8,16", help="increasing cluster counts to try")
    sp.add_argument("--gap-b", type=int, default=10, help="reference sets for the gap statistic")
    sp.set_defaults(func=cmd_cluster)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    for flag in ("beam_width", "max_len", "epochs", "batch_size", "warmup", "gap_b"):
        value = getattr(args, flag, None)
        if value is not None and value < 1:
            parser.error(f"--{flag.replace('_', '-')} must be positive")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        parser.error(str(exc))
    except (GuidesumError, OSError, KeyError) as exc:
        print(f"guidesum {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
