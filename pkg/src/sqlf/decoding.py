"""Greedy and beam-search generation for both paradigms."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import numerics as nx
from .model import TransformerModel, decode_target, encode_source, forward_dec_only
from .tokenizer import BOS_ID, EOS_ID, PAD_ID, Vocabulary

DEFAULT_BEAM = 4
DEFAULT_MAX_LEN = 128
SQL_MARKER = ("SQL", ":")


@dataclass(frozen=True)
class BeamHypothesis:
    tokens: tuple[int, ...]
    log_prob: float
    finished: bool = False

    def extend(self, token: int, lp: float, eos_id: int) -> "BeamHypothesis":
        if self.finished:
            raise ValueError("cannot extend a finished hypothesis")
        return BeamHypothesis(self.tokens + (token,), self.log_prob + lp, token == eos_id)


class _Stepper:
    """Next-token log-probabilities for a batch of equal-length prefixes."""

    def __init__(self, model: TransformerModel, input_ids: Sequence[int], bos_id: int):
        self.model = model
        self.bos_id = bos_id
        ids = np.asarray(input_ids, dtype=np.int64).reshape(-1)
        if model.config.paradigm == "enc_dec":
            with nx.no_grad():
                self.memory, self.src_mask = encode_source(model, ids)
            self.prefix = np.array([bos_id], dtype=np.int64)
        else:
            if ids.size == 0:
                raise ValueError("decoder-only generation needs a non-empty prompt")
            self.prefix = ids

    def room(self) -> int:
        """Tokens that can still be appended before the context is full."""
        return self.model.config.max_positions - len(self.prefix)

    def __call__(self, prefixes: list[tuple[int, ...]]) -> np.ndarray:
        n = len(prefixes)
        body = np.array([self.prefix.tolist() + list(p) for p in prefixes], dtype=np.int64)
        with nx.no_grad():
            if self.model.config.paradigm == "enc_dec":
                mem = nx.Tensor._wrap(np.repeat(self.memory.data, n, axis=0))
                mask = np.repeat(self.src_mask, n, axis=0)
                logits = decode_target(self.model, mem, mask, body)
            else:
                logits = forward_dec_only(self.model, body)
        return nx.log_softmax(logits.data[:, -1, :])


def _length_norm(h: BeamHypothesis, alpha: float | None) -> float:
    if alpha is None:
        return h.log_prob
    return h.log_prob / (((5.0 + len(h.tokens)) ** alpha) / (6.0**alpha))


def beam_search(
    model: TransformerModel,
    input_ids: Sequence[int],
    beam_size: int = DEFAULT_BEAM,
    max_len: int = DEFAULT_MAX_LEN,
    bos_id: int = BOS_ID,
    eos_id: int = EOS_ID,
    length_penalty: float | None = None,
) -> list[BeamHypothesis]:
    """All completed hypotheses, best first.

    Each step expands every live beam over the vocabulary and ranks the
    candidates by cumulative log-prob (ties: lower token id, then earlier
    beam).  Walking down the ranking, candidates ending in ``eos_id`` are
    completed; the others fill the ``beam_size`` live slots.  Live beams that
    reach ``max_len`` generated tokens (or a full context window) are
    completed as they are.  Without length normalisation the search stops as
    soon as the best completed score is at least the best live score, since
    extending a beam can only lower its score.
    """
    if beam_size < 1:
        raise ValueError("beam_size must be >= 1")
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    step = _Stepper(model, input_ids, bos_id)
    limit = min(max_len, step.room())
    if limit < 1:
        raise ValueError("prompt fills the whole context window; nothing can be generated")
    live = [BeamHypothesis((), 0.0)]
    done: list[BeamHypothesis] = []
    for t in range(limit):
        lp = step([h.tokens for h in live])
        scores = np.array([h.log_prob for h in live])[:, None] + lp
        n_beams, vocab = scores.shape
        beam_idx = np.repeat(np.arange(n_beams), vocab)
        tok_idx = np.tile(np.arange(vocab), n_beams)
        flat = scores.reshape(-1)
        order = np.lexsort((beam_idx, tok_idx, -flat))
        nxt: list[BeamHypothesis] = []
        for j in order:
            h = live[beam_idx[j]].extend(int(tok_idx[j]), float(lp[beam_idx[j], tok_idx[j]]), eos_id)
            if h.finished:
                done.append(h)
            else:
                nxt.append(h)
                if len(nxt) == beam_size:
                    break
        live = nxt
        if t == limit - 1 or not live:
            done.extend(live)
            break
        if length_penalty is None:
            if done and max(h.log_prob for h in done) >= live[0].log_prob:
                break
        elif len(done) >= beam_size:
            break
    return sorted(done, key=lambda h: (-_length_norm(h, length_penalty), h.tokens))


def generate(
    model: TransformerModel,
    input_ids: Sequence[int],
    beam_size: int = DEFAULT_BEAM,
    max_len: int = DEFAULT_MAX_LEN,
    bos_id: int = BOS_ID,
    eos_id: int = EOS_ID,
    length_penalty: float | None = None,
) -> list[int]:
    """Best generated token ids (the prompt / start token excluded, final eos kept)."""
    best = beam_search(model, input_ids, beam_size, max_len, bos_id, eos_id, length_penalty)[0]
    return list(best.tokens)


def greedy(
    model: TransformerModel,
    input_ids: Sequence[int],
    max_len: int = DEFAULT_MAX_LEN,
    bos_id: int = BOS_ID,
    eos_id: int = EOS_ID,
) -> BeamHypothesis:
    step = _Stepper(model, input_ids, bos_id)
    h = BeamHypothesis((), 0.0)
    for _ in range(min(max_len, step.room())):
        lp = step([h.tokens])[0]
        tok = int(np.argmax(lp))
        h = h.extend(tok, float(lp[tok]), eos_id)
        if h.finished:
            break
    return h


def ids_to_sql(ids: Sequence[int], vocab: Vocabulary, paradigm: str | None = None) -> str:
    """Detokenize generated ids: stop at eos, drop bos/pad, join with single spaces.

    For decoder-only output that still carries its prompt, everything up to
    and including the ``SQL:`` marker is removed.
    """
    toks: list[str] = []
    for i in ids:
        i = int(i)
        if i == EOS_ID:
            break
        if i in (BOS_ID, PAD_ID):
            continue
        toks.append(vocab.token_of(i))
    if paradigm != "enc_dec":
        for k in range(len(toks) - 1):
            if (toks[k], toks[k + 1]) == SQL_MARKER:
                toks = toks[k + 2 :]
                break
    return " ".join(toks)
