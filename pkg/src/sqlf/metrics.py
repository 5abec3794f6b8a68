"""LFAcc, smoothed sentence BLEU and exact match."""

from __future__ import annotations

import json
import math
import re
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

BLEU_EPSILON = 1e-9
MAX_ORDER = 4

# multi-character operators first so they stay atomic
_SQL_PUNCT_RE = re.compile(r"(<=|>=|!=|[(),;=<>*])")


def normalize_sql(s: str) -> str:
    """Lowercase, space out SQL punctuation, collapse whitespace, drop trailing ';'."""
    s = _SQL_PUNCT_RE.sub(r" \1 ", s.lower())
    s = " ".join(s.split())
    while s.endswith(";"):
        s = s[:-1].rstrip()
    return s


def lfacc(pred: str, gold: str) -> bool:
    return normalize_sql(pred) == normalize_sql(gold)


def exact_match(pred: str, gold: str) -> bool:
    return pred == gold


def corpus_lfacc(pairs: Sequence[tuple[str, str]]) -> float:
    if not pairs:
        raise ValueError("corpus_lfacc: no pairs")
    return sum(lfacc(p, g) for p, g in pairs) / len(pairs)


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu_sentence(pred_tokens: Sequence[str], gold_tokens: Sequence[str]) -> float:
    """Smoothed sentence BLEU with uniform weights over orders 1..4.

    Orders longer than the prediction carry no n-grams and are left out
    (weights renormalised over the remaining orders).  A present order with
    zero clipped matches gets a 1e-9 numerator.
    """
    if not gold_tokens:
        raise ValueError("bleu_sentence: empty reference")
    c, r = len(pred_tokens), len(gold_tokens)
    if c == 0:
        return 0.0
    orders = min(MAX_ORDER, c)
    log_sum = 0.0
    for n in range(1, orders + 1):
        pred_ngrams = _ngrams(pred_tokens, n)
        gold_ngrams = _ngrams(gold_tokens, n)
        matched = sum(min(k, gold_ngrams[g]) for g, k in pred_ngrams.items())
        total = c - n + 1
        log_sum += math.log((matched or BLEU_EPSILON) / total)
    bp = min(1.0, math.exp(1.0 - r / c))
    return bp * math.exp(log_sum / orders)


def sentence_bleu(pred: str, gold: str) -> float:
    return bleu_sentence(normalize_sql(pred).split(), normalize_sql(gold).split())


@dataclass
class SampleScore:
    prediction: str
    gold: str
    normalized_prediction: str
    normalized_gold: str
    lfacc: bool
    em: bool
    bleu: float


@dataclass
class MetricReport:
    n_samples: int
    lfacc: float
    bleu: float
    em: float
    per_sample: list[SampleScore] = field(default_factory=list)
    provenance: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "MetricReport":
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
        raw["per_sample"] = [SampleScore(**s) for s in raw.get("per_sample", [])]
        return cls(**raw)

    def table(self, name: str = "model") -> str:
        return format_table([(name, self)])


def evaluate(predictions: Sequence[str], golds: Sequence[str], provenance: dict | None = None) -> MetricReport:
    if len(predictions) != len(golds):
        raise ValueError(f"evaluate: {len(predictions)} predictions vs {len(golds)} golds")
    if not golds:
        raise ValueError("evaluate: nothing to score")
    samples = []
    for p, g in zip(predictions, golds):
        np_, ng = normalize_sql(p), normalize_sql(g)
        samples.append(SampleScore(
            prediction=p,
            gold=g,
            normalized_prediction=np_,
            normalized_gold=ng,
            lfacc=np_ == ng,
            em=p == g,
            bleu=bleu_sentence(np_.split(), ng.split()),
        ))
    n = len(samples)
    return MetricReport(
        n_samples=n,
        lfacc=sum(s.lfacc for s in samples) / n,
        bleu=math.fsum(s.bleu for s in samples) / n,
        em=sum(s.em for s in samples) / n,
        per_sample=samples,
        provenance=dict(provenance or {}),
    )


def format_table(rows: Sequence[tuple[str, MetricReport]], zero_shot: Sequence[MetricReport | None] | None = None) -> str:
    """Plain-text table with LFAcc / BLEU / EM percentages per row.

    With ``zero_shot`` the table gets two column groups, untrained model and
    fine-tuned model.
    """
    def pct(x: float) -> str:
        return f"{100 * x:.2f}"

    width = max([len("Model")] + [len(name) for name, _ in rows])
    if zero_shot is None:
        header = f"{'Model':<{width}} | LFAcc (%) | BLEU (%) | EM (%)"
        lines = [header, "-" * len(header)]
        for name, r in rows:
            lines.append(f"{name:<{width}} | {pct(r.lfacc):>9} | {pct(r.bleu):>8} | {pct(r.em):>6}")
        return "\n".join(lines) + "\n"
    group = "LFAcc (%) | BLEU (%) | EM (%)"
    header = f"{'':<{width}} | {'Zero-Shot':^{len(group)}} | {'Fine-Tuned':^{len(group)}}"
    sub = f"{'Model':<{width}} | {group} | {group}"
    lines = [header, sub, "-" * len(sub)]
    for (name, ft), zs in zip(rows, zero_shot):
        left = (
            f"{pct(zs.lfacc):>9} | {pct(zs.bleu):>8} | {pct(zs.em):>6}"
            if zs is not None
            else f"{'-':>9} | {'-':>8} | {'-':>6}"
        )
        right = f"{pct(ft.lfacc):>9} | {pct(ft.bleu):>8} | {pct(ft.em):>6}"
        lines.append(f"{name:<{width}} | {left} | {right}")
    return "\n".join(lines) + "\n"
