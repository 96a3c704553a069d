"""Word-level tokenization, vocabularies and sentence splitting."""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

from .errors import InputError, ParseError

PAD, BOS, EOS, UNK, GUIDE_SEP = 0, 1, 2, 3, 4
SPECIAL_TOKENS = ("<pad>", "<s>", "</s>", "<unk>", "<sep>")

VOCAB_HEADER = "vocab-v1"

_TOKEN_RE = re.compile(r"\w+|[^\w\s]")
_SENT_BOUNDARY_RE = re.compile(r"(?<=[.!?])\s+")

TokenSequence = list  # list[int]


def tokenize(text: str) -> list[str]:
    """Lowercase, split on whitespace, and emit each punctuation mark as its own token."""
    return _TOKEN_RE.findall(text.lower())


def split_sentences(text: str) -> list[str]:
    """Split after '.', '!' or '?' when followed by whitespace; the terminator stays attached."""
    return [s for s in (part.strip() for part in _SENT_BOUNDARY_RE.split(text.strip())) if s]


def detokenize(tokens: Sequence[str]) -> str:
    return " ".join(tokens)


@dataclass(frozen=True)
class Vocabulary:
    id_to_token: tuple[str, ...]
    token_to_id: dict

    def __post_init__(self):
        if tuple(self.id_to_token[: len(SPECIAL_TOKENS)]) != SPECIAL_TOKENS:
            raise InputError("vocabulary must start with the special tokens")
        if len(self.token_to_id) != len(self.id_to_token):
            raise InputError("vocabulary has duplicate tokens")

    @classmethod
    def from_tokens(cls, tokens: Sequence[str]) -> "Vocabulary":
        itos = tuple(SPECIAL_TOKENS) + tuple(tokens)
        return cls(itos, {t: i for i, t in enumerate(itos)})

    def __len__(self) -> int:
        return len(self.id_to_token)

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_id

    def id(self, token: str) -> int:
        return self.token_to_id.get(token, UNK)

    def save(self, path) -> None:
        lines = [f"{VOCAB_HEADER} {len(self)}"]
        lines += [f"{tok}\t{i}" for i, tok in enumerate(self.id_to_token)]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if not lines:
            raise ParseError("empty vocabulary file", 1)
        head = lines[0].split()
        if len(head) != 2 or head[0] != VOCAB_HEADER:
            raise ParseError(f"expected header '{VOCAB_HEADER} <size>'", 1)
        size = int(head[1])
        tokens = []
        for lineno, line in enumerate(lines[1:], start=2):
            tok, sep, idx = line.rpartition("\t")
            if not sep or not idx.isdigit() or int(idx) != len(tokens):
                raise ParseError("expected 'token<TAB>id' with consecutive ids", lineno)
            tokens.append(tok)
        if len(tokens) != size:
            raise ParseError(f"header declares {size} tokens, found {len(tokens)}", 1)
        return cls(tuple(tokens), {t: i for i, t in enumerate(tokens)})


def build_vocab(corpus: Iterable[str], max_size: int = 32000, min_freq: int = 1) -> Vocabulary:
    """Rank tokens by frequency (ties lexicographic) and keep at most ``max_size`` entries, specials included."""
    if max_size < len(SPECIAL_TOKENS):
        raise InputError(f"max_size must be at least {len(SPECIAL_TOKENS)}")
    counts: Counter = Counter()
    n_docs = 0
    for text in corpus:
        n_docs += 1
        counts.update(tokenize(text))
    if n_docs == 0:
        raise InputError("cannot build a vocabulary from an empty corpus")
    ranked = sorted((t for t, c in counts.items() if c >= min_freq and t not in SPECIAL_TOKENS), key=lambda t: (-counts[t], t))
    return Vocabulary.from_tokens(ranked[: max_size - len(SPECIAL_TOKENS)])


def encode(
    vocab: Vocabulary,
    tokens: Sequence[str],
    max_len: int,
    add_bos: bool = False,
    add_eos: bool = False,
) -> TokenSequence:
    """Map tokens to ids, truncating content so that BOS/EOS still fit in ``max_len``."""
    room = max_len - int(add_bos) - int(add_eos)
    if room < 1:
        raise InputError(f"max_len={max_len} leaves no room for content")
    ids = [vocab.id(t) for t in tokens[:room]]
    if add_bos:
        ids.insert(0, BOS)
    if add_eos:
        ids.append(EOS)
    return ids


def encode_text(vocab: Vocabulary, text: str, max_len: int, add_bos: bool = False, add_eos: bool = False) -> TokenSequence:
    return encode(vocab, tokenize(text), max_len, add_bos, add_eos)


def decode(vocab: Vocabulary, ids: Iterable[int], strip_special: bool = True) -> list[str]:
    out = []
    for i in ids:
        i = int(i)
        if strip_special:
            if i == EOS:
                break
            if i in (PAD, BOS, GUIDE_SEP):
                continue
        out.append(vocab.id_to_token[i])
    return out
