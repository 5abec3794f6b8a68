"""Fine-tuning loop, Adam, validation-based selection and checkpoint I/O."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import numerics as nx
from .data import Example, InputStyle
from .decoding import DEFAULT_BEAM, DEFAULT_MAX_LEN, generate, ids_to_sql
from .metrics import MetricReport, evaluate
from .model import ModelConfig, TransformerModel, collate, init_parameters, loss
from .tokenizer import Vocabulary, encode

log = logging.getLogger(__name__)

MAGIC = b"SQLF"
FORMAT_VERSION = 1
BASE_BUDGETS = (1000, 2000, 3000, 4000, 5000)


class DivergenceError(RuntimeError):
    def __init__(self, step: int, detail: str = ""):
        super().__init__(f"training diverged at step {step}" + (f": {detail}" if detail else ""))
        self.step = step


class CheckpointError(ValueError):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 1000
    batch_size: int = 16
    learning_rate: float = 3e-4
    seed: int = 0
    eval_every: int = 100
    max_len: int = 256
    style: str = "t5"
    paradigm: str = ""
    grad_clip: float = 1.0
    schedule: str = "constant"
    eval_beam_size: int = 1
    eval_max_len: int = DEFAULT_MAX_LEN
    eval_samples: int | None = None

    def __post_init__(self):
        style = InputStyle.parse(self.style)
        object.__setattr__(self, "style", style.value)
        if not self.paradigm:
            object.__setattr__(self, "paradigm", style.paradigm)
        if self.paradigm != style.paradigm:
            raise ValueError(f"style {style.value!r} needs paradigm {style.paradigm!r}, got {self.paradigm!r}")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if not 1 <= self.eval_every <= self.iterations:
            raise ValueError("eval_every must be in [1, iterations]")
        if self.batch_size < 1 or self.learning_rate <= 0:
            raise ValueError("batch_size and learning_rate must be positive")
        if self.schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown schedule {self.schedule!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class Checkpoint:
    config: ModelConfig
    tensors: dict[str, np.ndarray]
    step: int
    val_lfacc: float
    meta: dict = field(default_factory=dict)
    format_version: int = FORMAT_VERSION


@dataclass(frozen=True)
class HistoryEntry:
    step: int
    train_loss: float
    val_lfacc: float


@dataclass
class TrainingData:
    vocab: Vocabulary
    train: list[Example]
    valid: list[Example]


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: Sequence[nx.Tensor]) -> "AdamState":
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params])


def optimizer_step(params: Sequence[nx.Tensor], grads: Sequence[np.ndarray | None], state: AdamState, lr: float) -> None:
    """Bias-corrected Adam update, in place."""
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            g = np.zeros_like(p.data)
        m = state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        v = state.v[i] = b2 * state.v[i] + (1.0 - b2) * (g * g)
        p.data = (p.data - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)


def clip_grad_norm(grads: list[np.ndarray | None], max_norm: float) -> float:
    total = math.sqrt(sum(float(np.dot(g.ravel().astype(np.float64), g.ravel())) for g in grads if g is not None))
    if max_norm > 0 and total > max_norm:
        s = max_norm / (total + 1e-6)
        for i, g in enumerate(grads):
            if g is not None:
                grads[i] = g * s
    return total


def learning_rate_at(cfg: TrainConfig, step: int) -> float:
    if cfg.schedule == "constant":
        return cfg.learning_rate
    return cfg.learning_rate * 0.5 * (1.0 + math.cos(math.pi * (step - 1) / cfg.iterations))


# ---------------------------------------------------------------------------
# prediction
# ---------------------------------------------------------------------------


def source_ids(text: str, vocab: Vocabulary, paradigm: str, max_len: int) -> list[int]:
    if paradigm == "enc_dec":
        return encode(text, vocab, max_len)
    return encode(text, vocab, max_len - 1)


def predict(
    model: TransformerModel,
    inputs: Sequence[str],
    vocab: Vocabulary,
    beam_size: int = DEFAULT_BEAM,
    max_len: int = DEFAULT_MAX_LEN,
    input_max_len: int = 256,
) -> list[str]:
    paradigm = model.config.paradigm
    out = []
    for text in inputs:
        ids = source_ids(text, vocab, paradigm, min(input_max_len, model.config.max_positions))
        out.append(ids_to_sql(generate(model, ids, beam_size, max_len), vocab, paradigm))
    return out


def evaluate_model(
    model: TransformerModel,
    examples: Sequence[Example],
    vocab: Vocabulary,
    beam_size: int = DEFAULT_BEAM,
    max_len: int = DEFAULT_MAX_LEN,
    input_max_len: int = 256,
    provenance: dict | None = None,
) -> MetricReport:
    preds = predict(model, [e.formatted_input for e in examples], vocab, beam_size, max_len, input_max_len)
    return evaluate(preds, [e.gold_sql for e in examples], provenance)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


class Trainer:
    """Resumable loop: ``run(n)`` advances to step ``n`` and keeps the best checkpoint so far."""

    def __init__(
        self,
        model: TransformerModel,
        data: TrainingData,
        config: TrainConfig,
        meta: dict | None = None,
        on_eval: Callable[[HistoryEntry], None] | None = None,
    ):
        if not data.train:
            raise ValueError("train: empty training set")
        if not data.valid:
            raise ValueError("train: empty validation set")
        if model.config.paradigm != config.paradigm:
            raise ValueError(f"model is {model.config.paradigm}, config expects {config.paradigm}")
        if len(data.vocab) != model.config.vocab_size:
            raise ValueError(f"vocab has {len(data.vocab)} tokens, model expects {model.config.vocab_size}")
        for ex in data.train:
            if not ex.input_ids or not ex.label_ids:
                raise ValueError("train: examples need input_ids/label_ids (see data.attach_ids)")
        self.model = model
        self.data = data
        self.config = config
        self.meta = dict(meta or {})
        self.on_eval = on_eval
        self.params = [p for _, p in model.named_parameters()]
        self.adam = AdamState.for_params(self.params)
        self.order_rng = np.random.default_rng([config.seed, 0])
        self.dropout_rng = np.random.default_rng([config.seed, 1])
        self.step = 0
        self.history: list[HistoryEntry] = []
        self.best: Checkpoint | None = None
        self._order: list[int] = []
        self._losses: list[float] = []

    def _next_batch(self) -> list[Example]:
        batch = []
        while len(batch) < self.config.batch_size:
            if not self._order:
                self._order = self.order_rng.permutation(len(self.data.train)).tolist()
            batch.append(self.data.train[self._order.pop(0)])
        return batch

    def train_step(self) -> float:
        step = self.step + 1
        batch = self._next_batch()
        arrays = collate([e.input_ids for e in batch], [e.label_ids for e in batch])
        self.model.zero_grad()
        try:
            # overflow surfaces as NonFiniteError below; numpy's own warnings would only duplicate it
            with np.errstate(over="ignore", invalid="ignore"):
                value = loss(self.model, arrays, training=True, rng=self.dropout_rng)
                nx.backward(value)
        except nx.NonFiniteError as exc:
            raise DivergenceError(step, str(exc)) from exc
        grads = [p.grad for p in self.params]
        norm = clip_grad_norm(grads, self.config.grad_clip)
        if not math.isfinite(norm):
            raise DivergenceError(step, "non-finite gradient norm")
        optimizer_step(self.params, grads, self.adam, learning_rate_at(self.config, step))
        self.model.zero_grad()
        self.step = step
        return value.item()

    def validate(self) -> float:
        examples = self.data.valid
        if self.config.eval_samples is not None:
            examples = examples[: self.config.eval_samples]
        report = evaluate_model(
            self.model,
            examples,
            self.data.vocab,
            self.config.eval_beam_size,
            self.config.eval_max_len,
            self.config.max_len,
        )
        return report.lfacc

    def snapshot(self, val_lfacc: float) -> Checkpoint:
        meta = dict(self.meta)
        meta.setdefault("train_config", self.config.to_dict())
        meta.setdefault("vocab", list(self.data.vocab.tokens))
        return Checkpoint(self.model.config, self.model.state_dict(), self.step, val_lfacc, meta)

    def run(self, until: int | None = None) -> tuple[Checkpoint, list[HistoryEntry]]:
        until = self.config.iterations if until is None else min(until, self.config.iterations)
        while self.step < until:
            self._losses.append(self.train_step())
            if self.step % self.config.eval_every == 0 or self.step == self.config.iterations:
                val = self.validate()
                entry = HistoryEntry(self.step, float(np.mean(self._losses)), val)
                self._losses = []
                self.history.append(entry)
                log.info("step %d  loss %.4f  val_lfacc %.4f", entry.step, entry.train_loss, val)
                # strict improvement only: ties keep the earlier checkpoint
                if self.best is None or val > self.best.val_lfacc:
                    self.best = self.snapshot(val)
                if self.on_eval is not None:
                    self.on_eval(entry)
        if self.best is None:
            self.best = self.snapshot(self.validate())
        return self.best, list(self.history)


def train(
    model: TransformerModel,
    data: TrainingData,
    config: TrainConfig,
    meta: dict | None = None,
) -> tuple[Checkpoint, list[HistoryEntry]]:
    """Run exactly ``config.iterations`` Adam steps; return the best-by-validation-LFAcc checkpoint and history."""
    return Trainer(model, data, config, meta).run()


def write_history(path, history: Sequence[HistoryEntry]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step", "loss", "val_lfacc"])
    for h in history:
        w.writerow([h.step, f"{h.train_loss:.6f}", f"{h.val_lfacc:.6f}"])
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def read_history(path) -> list[HistoryEntry]:
    with open(path, newline="", encoding="utf-8") as fh:
        return [HistoryEntry(int(r["step"]), float(r["loss"]), float(r["val_lfacc"])) for r in csv.DictReader(fh)]


# ---------------------------------------------------------------------------
# iteration sweep
# ---------------------------------------------------------------------------


@dataclass
class BudgetResult:
    budget: int
    best_step: int
    val_report: MetricReport
    checkpoint: Checkpoint


@dataclass
class SweepReport:
    budgets: list[BudgetResult]
    history: list[HistoryEntry]

    def rows(self) -> list[dict]:
        return [
            {
                "budget": b.budget,
                "best_step": b.best_step,
                "val_lfacc": b.val_report.lfacc,
                "val_bleu": b.val_report.bleu,
                "val_em": b.val_report.em,
            }
            for b in self.budgets
        ]


def scaled_budgets(divisor: int = 10, budgets: Sequence[int] = BASE_BUDGETS) -> list[int]:
    if divisor < 1:
        raise ValueError("divisor must be >= 1")
    return [max(1, b // divisor) for b in budgets]


def iteration_sweep(
    data: TrainingData,
    base_config: TrainConfig,
    model_config: ModelConfig,
    divisor: int = 10,
    budgets: Sequence[int] = BASE_BUDGETS,
    meta: dict | None = None,
) -> SweepReport:
    """Train at each (scaled) step budget and score the validation-selected checkpoint.

    With a constant learning rate a run to a small budget is a prefix of a
    run to a larger one, so one run is advanced budget by budget.  Schedules
    that depend on the total length get one run per budget.
    """
    steps = sorted(set(scaled_budgets(divisor, budgets)))
    results: list[BudgetResult] = []
    history: list[HistoryEntry] = []

    def score(ckpt: Checkpoint) -> MetricReport:
        m = model_from_checkpoint(ckpt)
        return evaluate_model(
            m, data.valid[: base_config.eval_samples] if base_config.eval_samples else data.valid,
            data.vocab, base_config.eval_beam_size, base_config.eval_max_len, base_config.max_len,
        )

    if base_config.schedule == "constant":
        cfg = replace(base_config, iterations=steps[-1], eval_every=min(base_config.eval_every, steps[0]))
        trainer = Trainer(init_parameters(model_config, cfg.seed), data, cfg, meta)
        for b in steps:
            trainer.run(b)
            ckpt = trainer.best
            results.append(BudgetResult(b, ckpt.step, score(ckpt), ckpt))
        history = trainer.history
    else:
        for b in steps:
            cfg = replace(base_config, iterations=b, eval_every=min(base_config.eval_every, b))
            ckpt, hist = train(init_parameters(model_config, cfg.seed), data, cfg, meta)
            results.append(BudgetResult(b, ckpt.step, score(ckpt), ckpt))
            history.extend(hist)
    return SweepReport(results, history)


# ---------------------------------------------------------------------------
# checkpoint I/O
# ---------------------------------------------------------------------------


def model_from_checkpoint(ckpt: Checkpoint) -> TransformerModel:
    model = init_parameters(ckpt.config, 0)
    model.load_state_dict(ckpt.tensors)
    return model


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    blob = json.dumps(
        {"model": ckpt.config.to_dict(), "step": ckpt.step, "val_lfacc": ckpt.val_lfacc, "meta": ckpt.meta},
        sort_keys=True,
    ).encode("utf-8")
    out = bytearray(MAGIC)
    out += struct.pack("<II", ckpt.format_version, len(blob))
    out += blob
    out += struct.pack("<I", len(ckpt.tensors))
    for name, arr in ckpt.tensors.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        out += struct.pack("<I", len(raw)) + raw
        out += struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    return bytes(out)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(checkpoint_bytes(ckpt))
    tmp.replace(path)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CorruptCheckpointError("corrupt checkpoint: unexpected end of file")
        chunk = self.buf[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def dims(self, rank: int) -> tuple[int, ...]:
        return struct.unpack(f"<{rank}I", self.take(4 * rank))


def checkpoint_from_bytes(buf: bytes) -> Checkpoint:
    r = _Reader(buf)
    if r.take(4) != MAGIC:
        raise CorruptCheckpointError("corrupt checkpoint: bad magic bytes")
    version = r.u32()
    if version != FORMAT_VERSION:
        raise CheckpointError(f"checkpoint format version {version} not supported (expected {FORMAT_VERSION})")
    try:
        head = json.loads(r.take(r.u32()).decode("utf-8"))
        config = ModelConfig.from_dict(head["model"])
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, CorruptCheckpointError):
            raise
        raise CorruptCheckpointError(f"corrupt checkpoint: bad config blob ({exc})") from exc
    tensors = {}
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode("utf-8", errors="strict")
        dims = r.dims(r.u32())
        n = math.prod(dims)
        tensors[name] = np.frombuffer(r.take(4 * n), dtype="<f4").reshape(dims).astype(np.float32)
    if r.pos != len(buf):
        raise CorruptCheckpointError("corrupt checkpoint: trailing bytes")
    return Checkpoint(config, tensors, int(head["step"]), float(head["val_lfacc"]), head.get("meta", {}), version)


def load_checkpoint(path) -> Checkpoint:
    return checkpoint_from_bytes(Path(path).read_bytes())
