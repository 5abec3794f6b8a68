"""Word-level tokenizer with SQL-aware punctuation splitting."""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .numerics import IGNORE_INDEX

PAD, BOS, EOS, UNK = "<pad>", "<bos>", "<eos>", "<unk>"
SPECIALS = (PAD, BOS, EOS, UNK)
PAD_ID, BOS_ID, EOS_ID, UNK_ID = 0, 1, 2, 3

DEFAULT_MAX_LEN = 256

_PUNCT = r"(),;*=<>?:'\"!"
TOKEN_RE = re.compile(r"<=|>=|!=|<>|[" + re.escape(_PUNCT) + r"]|[^\s" + re.escape(_PUNCT) + r"]+")


def tokenize(text: str) -> list[str]:
    """Split on whitespace; punctuation and comparison operators become single tokens."""
    return TOKEN_RE.findall(text)


def normalize_text(text: str) -> str:
    return " ".join(tokenize(text))


@dataclass(frozen=True)
class Vocabulary:
    tokens: tuple[str, ...]
    max_context: int = DEFAULT_MAX_LEN
    index: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if tuple(self.tokens[:4]) != SPECIALS:
            raise ValueError(f"vocabulary must start with {SPECIALS}")
        if len(self.tokens) < 5:
            raise ValueError("vocabulary needs at least one non-special token")
        index = {t: i for i, t in enumerate(self.tokens)}
        if len(index) != len(self.tokens):
            raise ValueError("vocabulary contains duplicate tokens")
        object.__setattr__(self, "index", index)

    pad_id = PAD_ID
    bos_id = BOS_ID
    eos_id = EOS_ID
    unk_id = UNK_ID

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.index

    def id_of(self, token: str) -> int:
        return self.index.get(token, UNK_ID)

    def token_of(self, i: int) -> str:
        return self.tokens[i]

    def save(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path, max_context: int = DEFAULT_MAX_LEN) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        return cls(tuple(lines), max_context)


def build_vocab(corpus: Iterable[str], max_size: int, max_context: int = DEFAULT_MAX_LEN) -> Vocabulary:
    """Keep the ``max_size - 4`` most frequent tokens; ties go to the lexicographically smaller token."""
    if max_size < 5:
        raise ValueError(f"max_size must be >= 5, got {max_size}")
    counts: Counter[str] = Counter()
    n_texts = 0
    for text in corpus:
        n_texts += 1
        counts.update(tokenize(text))
    if n_texts == 0:
        raise ValueError("build_vocab: empty corpus")
    for s in SPECIALS:
        counts.pop(s, None)
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    kept = [tok for tok, _ in ranked[: max_size - len(SPECIALS)]]
    if not kept:
        raise ValueError("build_vocab: corpus has no tokens")
    return Vocabulary(SPECIALS + tuple(kept), max_context)


def encode(
    text: str,
    vocab: Vocabulary,
    max_len: int,
    pad_to_max: bool = False,
    add_bos: bool = False,
    add_eos: bool = False,
) -> list[int]:
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    ids = [vocab.id_of(t) for t in tokenize(text)]
    if add_bos:
        ids.insert(0, BOS_ID)
    if add_eos:
        ids.append(EOS_ID)
    ids = ids[:max_len]
    if pad_to_max:
        ids += [PAD_ID] * (max_len - len(ids))
    return ids


def decode(ids: Sequence[int], vocab: Vocabulary, skip_special: bool = True) -> str:
    toks = []
    for i in ids:
        i = int(i)
        if skip_special and i in (PAD_ID, BOS_ID, EOS_ID):
            continue
        toks.append(vocab.token_of(i))
    return " ".join(toks)


def labels_for_training(
    target_ids: Sequence[int],
    ignore_index: int = IGNORE_INDEX,
    prompt_len: int = 0,
    pad_id: int = PAD_ID,
    vocab_size: int | None = None,
) -> list[int]:
    """Copy of ``target_ids`` with padding (and any prompt prefix) set to ``ignore_index``."""
    if vocab_size is not None and 0 <= ignore_index < vocab_size:
        raise ValueError(f"ignore_index {ignore_index} collides with vocabulary ids")
    if prompt_len < 0 or prompt_len > len(target_ids):
        raise ValueError(f"prompt_len {prompt_len} exceeds sequence length {len(target_ids)}")
    out = [ignore_index if t == pad_id else int(t) for t in target_ids]
    for i in range(prompt_len):
        out[i] = ignore_index
    return out
