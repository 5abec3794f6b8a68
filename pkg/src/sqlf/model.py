"""Pre-LN transformers: encoder-decoder (T5/BART-like) and decoder-only (GPT-2-like)."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import Sequence

import numpy as np

from . import numerics as nx
from .numerics import IGNORE_INDEX, MASK_VALUE, Tensor
from .tokenizer import PAD_ID

PARADIGMS = ("enc_dec", "dec_only")
ACTIVATIONS = ("relu", "gelu")
INIT_STD = 0.02


@dataclass(frozen=True)
class ModelConfig:
    paradigm: str = "enc_dec"
    n_layers: int = 2
    n_heads: int = 4
    d_model: int = 128
    d_ff: int = 256
    vocab_size: int = 1000
    max_positions: int = 256
    dropout_rate: float = 0.0
    activation: str = "relu"
    tie_embeddings: bool = False

    def __post_init__(self):
        if self.paradigm not in PARADIGMS:
            raise ValueError(f"paradigm must be one of {PARADIGMS}, got {self.paradigm!r}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}, got {self.activation!r}")
        if min(self.n_layers, self.n_heads, self.d_model, self.d_ff, self.vocab_size, self.max_positions) < 1:
            raise ValueError("sizes must be positive")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def desk_config(paradigm: str, vocab_size: int, max_positions: int = 256, **overrides) -> ModelConfig:
    """Default CPU-sized configs: 2+2 layers enc-dec, 4 layers dec-only, d_model 128, 4 heads, d_ff 256."""
    base = dict(
        paradigm=paradigm,
        n_layers=2 if paradigm == "enc_dec" else 4,
        n_heads=4,
        d_model=128,
        d_ff=256,
        vocab_size=vocab_size,
        max_positions=max_positions,
    )
    base.update(overrides)
    return ModelConfig(**base)


def parameter_count(config: ModelConfig) -> int:
    """Closed-form parameter count.

    attention block  4 d^2 + 4 d           (q, k, v, out projections + biases)
    feed-forward     2 d f + f + d
    layer norm       2 d
    encoder / decoder-only layer = attn + ffn + 2 ln
    enc-dec decoder layer        = 2 attn + ffn + 3 ln
    embeddings: V d tokens, P d positions per stack, final ln per stack,
    output head d V + V (just V when tied to the token embedding).
    """
    d, f, V, P, L = config.d_model, config.d_ff, config.vocab_size, config.max_positions, config.n_layers
    attn = 4 * d * d + 4 * d
    ffn = 2 * d * f + f + d
    ln = 2 * d
    head = V if config.tie_embeddings else d * V + V
    self_layer = attn + ffn + 2 * ln
    if config.paradigm == "dec_only":
        return V * d + P * d + L * self_layer + ln + head
    cross_layer = 2 * attn + ffn + 3 * ln
    return V * d + 2 * P * d + L * self_layer + ln + L * cross_layer + ln + head


class TransformerModel:
    def __init__(self, config: ModelConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return list(self.params.items())

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) ^ set(state)
        if missing:
            raise KeyError(f"state mismatch on {sorted(missing)}")
        for k, p in self.params.items():
            arr = np.asarray(state[k])
            if arr.shape != p.shape:
                raise ValueError(f"{k}: shape {arr.shape} != {p.shape}")
            p.data = arr.astype(p.dtype, copy=True)

    def astype(self, dtype) -> "TransformerModel":
        return TransformerModel(
            self.config, {k: Tensor(v.data.astype(dtype), requires_grad=True, dtype=dtype) for k, v in self.params.items()}
        )

    def __repr__(self) -> str:
        return f"TransformerModel({self.config}, params={self.num_parameters()})"


# ---------------------------------------------------------------------------
# initialisation
# ---------------------------------------------------------------------------


def _trunc_normal(rng: np.random.Generator, shape: tuple[int, ...], std: float) -> np.ndarray:
    x = rng.standard_normal(shape)
    bad = np.abs(x) > 2.0
    while bad.any():
        x[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(x) > 2.0
    return x * std


def _param_shapes(config: ModelConfig) -> list[tuple[str, tuple[int, ...], str]]:
    d, f, V, P = config.d_model, config.d_ff, config.vocab_size, config.max_positions
    specs: list[tuple[str, tuple[int, ...], str]] = []

    def attn(prefix):
        for n in ("q", "k", "v", "o"):
            specs.append((f"{prefix}.w{n}", (d, d), "normal"))
            specs.append((f"{prefix}.b{n}", (d,), "zeros"))

    def ln(prefix):
        specs.append((f"{prefix}.g", (d,), "ones"))
        specs.append((f"{prefix}.b", (d,), "zeros"))

    def ffn(prefix):
        specs.extend([
            (f"{prefix}.w1", (d, f), "normal"),
            (f"{prefix}.b1", (f,), "zeros"),
            (f"{prefix}.w2", (f, d), "normal"),
            (f"{prefix}.b2", (d,), "zeros"),
        ])

    specs.append(("tok_emb", (V, d), "normal"))
    if config.paradigm == "dec_only":
        specs.append(("pos_emb", (P, d), "normal"))
        for i in range(config.n_layers):
            ln(f"layers.{i}.ln1")
            attn(f"layers.{i}.attn")
            ln(f"layers.{i}.ln2")
            ffn(f"layers.{i}.ffn")
        ln("ln_f")
    else:
        specs.append(("enc.pos_emb", (P, d), "normal"))
        for i in range(config.n_layers):
            ln(f"enc.{i}.ln1")
            attn(f"enc.{i}.attn")
            ln(f"enc.{i}.ln2")
            ffn(f"enc.{i}.ffn")
        ln("enc.ln_f")
        specs.append(("dec.pos_emb", (P, d), "normal"))
        for i in range(config.n_layers):
            ln(f"dec.{i}.ln1")
            attn(f"dec.{i}.self_attn")
            ln(f"dec.{i}.ln2")
            attn(f"dec.{i}.cross_attn")
            ln(f"dec.{i}.ln3")
            ffn(f"dec.{i}.ffn")
        ln("dec.ln_f")
    if not config.tie_embeddings:
        specs.append(("lm_head.w", (d, V), "normal"))
    specs.append(("lm_head.b", (V,), "zeros"))
    return specs


def init_parameters(config: ModelConfig, seed: int = 0) -> TransformerModel:
    """Truncated-normal (std 0.02, cut at 2 std) weights; LN gains 1; biases 0."""
    rng = np.random.default_rng(seed)
    dtype = nx.get_default_dtype()
    params = {}
    for name, shape, kind in _param_shapes(config):
        if kind == "normal":
            arr = _trunc_normal(rng, shape, INIT_STD)
        elif kind == "ones":
            arr = np.ones(shape)
        else:
            arr = np.zeros(shape)
        params[name] = Tensor(arr.astype(dtype), requires_grad=True, dtype=dtype)
    return TransformerModel(config, params)


# ---------------------------------------------------------------------------
# masks
# ---------------------------------------------------------------------------


def causal_mask(n: int, dtype=np.float32) -> np.ndarray:
    """(n, n) additive mask hiding keys after the query position."""
    return np.triu(np.full((n, n), MASK_VALUE, dtype=dtype), k=1)


def padding_mask(ids: np.ndarray, dtype=np.float32) -> np.ndarray:
    """(B, 1, 1, S) additive mask hiding padding keys."""
    return np.where(ids == PAD_ID, MASK_VALUE, 0.0).astype(dtype)[:, None, None, :]


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------


def _attn_weights(model: TransformerModel, prefix: str) -> dict[str, Tensor]:
    return {k: model.params[f"{prefix}.{k}"] for k in ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")}


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    b, t, d = x.shape
    return nx.transpose(nx.reshape(x, (b, t, n_heads, d // n_heads)), (0, 2, 1, 3))


def multi_head_attention(
    q_in: Tensor,
    k_in: Tensor,
    v_in: Tensor,
    mask: np.ndarray | None,
    weights: dict[str, Tensor],
    n_heads: int,
    trace: list | None = None,
) -> Tensor:
    """Scaled dot-product attention per head, heads concatenated then projected by ``wo``.

    Inputs are (B, T, d) / (B, S, d); ``mask`` is additive and broadcasts to
    (B, heads, T, S).
    """
    if q_in.ndim != 3 or k_in.ndim != 3 or v_in.ndim != 3:
        raise nx.ShapeError("multi_head_attention: inputs must be (batch, length, d_model)")
    b, t, d = q_in.shape
    if k_in.shape != v_in.shape or k_in.shape[0] != b or k_in.shape[2] != d:
        raise nx.ShapeError(f"multi_head_attention: query {q_in.shape}, key {k_in.shape}, value {v_in.shape}")
    if d % n_heads:
        raise nx.ShapeError(f"multi_head_attention: d_model {d} not divisible by {n_heads} heads")
    d_k = d // n_heads
    q = _split_heads(nx.linear(q_in, weights["wq"], weights["bq"]), n_heads)
    k = _split_heads(nx.linear(k_in, weights["wk"], weights["bk"]), n_heads)
    v = _split_heads(nx.linear(v_in, weights["wv"], weights["bv"]), n_heads)
    scores = nx.scale(nx.matmul(q, nx.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(d_k))
    if mask is None:
        mask = np.zeros((1, 1, 1, 1), dtype=scores.dtype)
    probs = nx.masked_softmax(scores, mask)
    if trace is not None:
        trace.append(probs.data)
    heads = nx.matmul(probs, v)
    merged = nx.reshape(nx.transpose(heads, (0, 2, 1, 3)), (b, t, d))
    return nx.linear(merged, weights["wo"], weights["bo"])


def _ffn(model: TransformerModel, prefix: str, x: Tensor) -> Tensor:
    p = model.params
    h = nx.linear(x, p[f"{prefix}.w1"], p[f"{prefix}.b1"])
    h = nx.relu(h) if model.config.activation == "relu" else nx.gelu(h)
    return nx.linear(h, p[f"{prefix}.w2"], p[f"{prefix}.b2"])


def _ln(model: TransformerModel, prefix: str, x: Tensor) -> Tensor:
    return nx.layer_norm(x, model.params[f"{prefix}.g"], model.params[f"{prefix}.b"])


def _embed(model: TransformerModel, ids: np.ndarray, pos_name: str, training: bool, rng) -> Tensor:
    t = ids.shape[1]
    if t > model.config.max_positions:
        raise ValueError(f"sequence length {t} exceeds max_positions {model.config.max_positions}")
    tok = nx.embedding_lookup(model.params["tok_emb"], ids)
    pos = nx.embedding_lookup(model.params[pos_name], np.arange(t))
    return nx.dropout(nx.add(tok, pos), model.config.dropout_rate, rng, training)


def _logits(model: TransformerModel, h: Tensor) -> Tensor:
    p = model.params
    w = nx.transpose(p["tok_emb"]) if model.config.tie_embeddings else p["lm_head.w"]
    return nx.linear(h, w, p["lm_head.b"])


def _as_batch(ids) -> tuple[np.ndarray, bool]:
    arr = np.asarray(ids, dtype=np.int64)
    if arr.ndim == 1:
        return arr[None, :], True
    if arr.ndim != 2:
        raise nx.ShapeError(f"token ids must be 1-D or 2-D, got shape {arr.shape}")
    return arr, False


def _residual(model, x, sub, training, rng):
    return nx.add(x, nx.dropout(sub, model.config.dropout_rate, rng, training))


# ---------------------------------------------------------------------------
# forward passes
# ---------------------------------------------------------------------------


def encode_source(model: TransformerModel, src_ids, training: bool = False, rng=None, trace: list | None = None):
    """Encoder states (B, S, d) and the source padding mask used by cross-attention."""
    if model.config.paradigm != "enc_dec":
        raise ValueError("encode_source needs an enc_dec model")
    src, _ = _as_batch(src_ids)
    cfg = model.config
    mask = padding_mask(src, nx.get_default_dtype())
    x = _embed(model, src, "enc.pos_emb", training, rng)
    for i in range(cfg.n_layers):
        a = multi_head_attention(
            *([_ln(model, f"enc.{i}.ln1", x)] * 3), mask, _attn_weights(model, f"enc.{i}.attn"), cfg.n_heads, trace
        )
        x = _residual(model, x, a, training, rng)
        x = _residual(model, x, _ffn(model, f"enc.{i}.ffn", _ln(model, f"enc.{i}.ln2", x)), training, rng)
    return _ln(model, "enc.ln_f", x), mask


def decode_target(
    model: TransformerModel,
    memory: Tensor,
    src_mask: np.ndarray,
    tgt_ids,
    training: bool = False,
    rng=None,
    trace: list | None = None,
) -> Tensor:
    tgt, _ = _as_batch(tgt_ids)
    cfg = model.config
    t = tgt.shape[1]
    # right padding: causality alone keeps real positions off padding keys
    self_mask = causal_mask(t, nx.get_default_dtype())
    x = _embed(model, tgt, "dec.pos_emb", training, rng)
    for i in range(cfg.n_layers):
        h = _ln(model, f"dec.{i}.ln1", x)
        a = multi_head_attention(h, h, h, self_mask, _attn_weights(model, f"dec.{i}.self_attn"), cfg.n_heads, trace)
        x = _residual(model, x, a, training, rng)
        h = _ln(model, f"dec.{i}.ln2", x)
        c = multi_head_attention(
            h, memory, memory, src_mask, _attn_weights(model, f"dec.{i}.cross_attn"), cfg.n_heads, trace
        )
        x = _residual(model, x, c, training, rng)
        x = _residual(model, x, _ffn(model, f"dec.{i}.ffn", _ln(model, f"dec.{i}.ln3", x)), training, rng)
    return _logits(model, _ln(model, "dec.ln_f", x))


def forward_enc_dec(model: TransformerModel, src_ids, tgt_ids, training: bool = False, rng=None, trace=None) -> Tensor:
    """Logits for P(y_t | y_<t, x) at every target position: (T, V), or (B, T, V) for batched ids."""
    if model.config.paradigm != "enc_dec":
        raise ValueError(f"forward_enc_dec called on a {model.config.paradigm} model")
    src, single_src = _as_batch(src_ids)
    tgt, single_tgt = _as_batch(tgt_ids)
    if src.shape[0] != tgt.shape[0]:
        raise nx.ShapeError(f"batch sizes differ: source {src.shape}, target {tgt.shape}")
    memory, mask = encode_source(model, src, training, rng, trace)
    logits = decode_target(model, memory, mask, tgt, training, rng, trace)
    if single_src and single_tgt:
        return nx.reshape(logits, logits.shape[1:])
    return logits


def forward_dec_only(model: TransformerModel, ids, training: bool = False, rng=None, trace=None) -> Tensor:
    """Causal LM logits: (T, V), or (B, T, V) for batched ids."""
    if model.config.paradigm != "dec_only":
        raise ValueError(f"forward_dec_only called on a {model.config.paradigm} model")
    x_ids, single = _as_batch(ids)
    cfg = model.config
    t = x_ids.shape[1]
    mask = causal_mask(t, nx.get_default_dtype())
    x = _embed(model, x_ids, "pos_emb", training, rng)
    for i in range(cfg.n_layers):
        h = _ln(model, f"layers.{i}.ln1", x)
        a = multi_head_attention(h, h, h, mask, _attn_weights(model, f"layers.{i}.attn"), cfg.n_heads, trace)
        x = _residual(model, x, a, training, rng)
        x = _residual(model, x, _ffn(model, f"layers.{i}.ffn", _ln(model, f"layers.{i}.ln2", x)), training, rng)
    logits = _logits(model, _ln(model, "ln_f", x))
    return nx.reshape(logits, logits.shape[1:]) if single else logits


def forward(model: TransformerModel, input_ids, decoder_ids=None, **kw) -> Tensor:
    if model.config.paradigm == "enc_dec":
        return forward_enc_dec(model, input_ids, decoder_ids, **kw)
    return forward_dec_only(model, input_ids, **kw)


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------


def collate(
    input_ids: Sequence[Sequence[int]], label_ids: Sequence[Sequence[int]]
) -> tuple[np.ndarray, np.ndarray]:
    """Stack into arrays, right-padding, then drop columns that are padding in every row."""

    def stack(rows, fill):
        n = max(len(r) for r in rows)
        out = np.full((len(rows), n), fill, dtype=np.int64)
        for i, r in enumerate(rows):
            out[i, : len(r)] = r
        return out

    src = stack(input_ids, PAD_ID)
    lab = stack(label_ids, IGNORE_INDEX)
    keep_src = int(np.max(np.nonzero((src != PAD_ID).any(axis=0))[0], initial=0)) + 1
    keep_lab = int(np.max(np.nonzero((lab != IGNORE_INDEX).any(axis=0))[0], initial=0)) + 1
    return src[:, :keep_src], lab[:, :keep_lab]


def loss(model: TransformerModel, batch, training: bool = False, rng=None) -> Tensor:
    """Mean masked cross-entropy over every supervised position in the batch.

    ``batch`` is ``(input_ids, label_ids)``.  Enc-dec labels are
    ``[bos] sql [eos]`` (decoder input is the labels shifted right);
    dec-only labels align with ``input_ids`` and predict the next token.
    """
    input_ids, label_ids = batch
    src, _ = _as_batch(input_ids)
    labels, _ = _as_batch(label_ids)
    if model.config.paradigm == "enc_dec":
        dec_in = np.where(labels[:, :-1] == IGNORE_INDEX, PAD_ID, labels[:, :-1])
        logits = forward_enc_dec(model, src, dec_in, training, rng)
        return nx.cross_entropy_masked(logits, labels[:, 1:], IGNORE_INDEX)
    if src.shape != labels.shape:
        raise nx.ShapeError(f"dec_only batch: ids {src.shape} vs labels {labels.shape}")
    logits = forward_dec_only(model, src[:, :-1], training, rng)
    return nx.cross_entropy_masked(logits, labels[:, 1:], IGNORE_INDEX)
