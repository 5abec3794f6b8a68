import math

import numpy as np
import pytest

from sqlf import numerics as nx
from sqlf.model import (
    ModelConfig,
    causal_mask,
    collate,
    desk_config,
    encode_source,
    forward,
    forward_dec_only,
    forward_enc_dec,
    init_parameters,
    loss,
    multi_head_attention,
    padding_mask,
    parameter_count,
)
from sqlf.numerics import IGNORE_INDEX, Tensor

from gradcheck import model_gradcheck
from tiny import random_batch, tiny_model

PARADIGMS = ["enc_dec", "dec_only"]


def test_config_validation():
    with pytest.raises(ValueError, match="divisible"):
        ModelConfig(d_model=10, n_heads=3)
    with pytest.raises(ValueError):
        ModelConfig(paradigm="encoder_only")
    with pytest.raises(ValueError):
        ModelConfig(dropout_rate=1.0)
    cfg = desk_config("dec_only", 50)
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg


def test_forward_shapes():
    m = tiny_model("enc_dec")
    assert forward_enc_dec(m, [5, 6, 7, 8], [1, 5, 6]).shape == (3, 11)
    assert forward_enc_dec(m, np.full((2, 4), 5), np.full((2, 3), 5)).shape == (2, 3, 11)
    d = tiny_model("dec_only")
    assert forward_dec_only(d, [5, 6, 7]).shape == (3, 11)
    assert forward(d, np.full((2, 5), 4)).shape == (2, 5, 11)


def test_wrong_paradigm_errors():
    with pytest.raises(ValueError, match="dec_only"):
        forward_enc_dec(tiny_model("dec_only"), [4], [1])
    with pytest.raises(ValueError, match="enc_dec"):
        forward_dec_only(tiny_model("enc_dec"), [4])
    with pytest.raises(nx.ShapeError):
        forward_enc_dec(tiny_model("enc_dec"), np.full((2, 3), 4), np.full((3, 3), 4))


def test_too_long_sequence_rejected():
    with pytest.raises(ValueError, match="max_positions"):
        forward_dec_only(tiny_model("dec_only"), [4] * 33)


def test_parameter_count_matches_instantiation():
    for paradigm in PARADIGMS:
        for kw in ({}, {"tie_embeddings": True}, {"n_layers": 3, "d_ff": 48}):
            m = tiny_model(paradigm, **kw)
            assert m.num_parameters() == parameter_count(m.config)


def test_parameter_count_hand_value():
    # one dec-only layer, d=2, f=4, V=3, P=5:
    # tok 6 + pos 10 + attn (16+8) + ffn (8+4+8+2) + 2 ln (8) + final ln 4 + head (6+3)
    cfg = ModelConfig("dec_only", n_layers=1, n_heads=1, d_model=2, d_ff=4, vocab_size=3, max_positions=5)
    assert parameter_count(cfg) == 6 + 10 + 24 + 22 + 8 + 4 + 9


def test_init_statistics():
    m = init_parameters(desk_config("dec_only", 200), seed=3)
    w = m.params["layers.0.ffn.w1"].data
    assert abs(w.std() - 0.02 * 0.88) < 0.002  # std of a normal truncated at 2 sigma
    assert np.abs(w).max() <= 0.04 + 1e-7
    assert np.all(m.params["layers.0.ln1.g"].data == 1.0)
    assert np.all(m.params["layers.0.attn.bq"].data == 0.0)


def test_init_is_seeded():
    a = init_parameters(desk_config("enc_dec", 30), 5).state_dict()
    b = init_parameters(desk_config("enc_dec", 30), 5).state_dict()
    c = init_parameters(desk_config("enc_dec", 30), 6).state_dict()
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert not np.array_equal(a["tok_emb"], c["tok_emb"])


@pytest.mark.parametrize("seed", range(10))
def test_dec_only_prefix_causality(seed):
    rng = np.random.default_rng(seed)
    m = tiny_model("dec_only", seed)
    ids = rng.integers(0, 11, 12)
    k = int(rng.integers(1, 12))
    with nx.no_grad():
        full = forward_dec_only(m, ids).data
        prefix = forward_dec_only(m, ids[:k]).data
    assert np.array_equal(full[:k], prefix)


@pytest.mark.parametrize("seed", range(10))
def test_enc_dec_decoder_prefix_causality(seed):
    rng = np.random.default_rng(seed)
    m = tiny_model("enc_dec", seed)
    src = rng.integers(4, 11, 6)
    tgt = rng.integers(0, 11, 9)
    k = int(rng.integers(1, 9))
    with nx.no_grad():
        assert np.array_equal(forward_enc_dec(m, src, tgt).data[:k], forward_enc_dec(m, src, tgt[:k]).data)


def test_later_tokens_do_not_change_earlier_logits():
    m = tiny_model("dec_only", 1)
    a = np.array([4, 5, 6, 7, 8])
    b = a.copy()
    b[3:] = [9, 10]
    with nx.no_grad():
        assert np.array_equal(forward_dec_only(m, a).data[:3], forward_dec_only(m, b).data[:3])


def test_source_changes_reach_every_decoder_position():
    m = tiny_model("enc_dec", 2)
    tgt = [1, 5, 6, 7]
    with nx.no_grad():
        a = forward_enc_dec(m, [4, 5, 6], tgt).data
        b = forward_enc_dec(m, [4, 9, 6], tgt).data
    assert np.all(np.abs(a - b).max(axis=-1) > 0)


def test_attention_rows_sum_to_one_and_ignore_padding():
    m = tiny_model("enc_dec", 0)
    src = np.array([[5, 6, 7, 0, 0], [4, 4, 0, 0, 0]])
    trace = []
    with nx.no_grad():
        forward_enc_dec(m, src, np.array([[1, 5, 6], [1, 4, 4]]), trace=trace)
    assert trace
    pad = src == 0
    for probs in trace:
        np.testing.assert_allclose(probs.sum(axis=-1), 1.0, atol=1e-6)
        if probs.shape[-1] == src.shape[1]:  # keys are source positions
            assert probs[np.broadcast_to(pad[:, None, None, :], probs.shape)].max() < 1e-30


def test_causal_and_padding_masks():
    cm = causal_mask(3)
    assert cm[0, 1] < -1e8 and cm[1, 0] == 0 and cm[2, 2] == 0
    pm = padding_mask(np.array([[5, 0]]))
    assert pm.shape == (1, 1, 1, 2) and pm[0, 0, 0, 1] < -1e8 and pm[0, 0, 0, 0] == 0


def _loop_attention(x, w, n_heads):
    """Per-head attention with explicit loops, float64, no masking."""
    b, t, d = x.shape
    dk = d // n_heads
    q = x @ w["wq"] + w["bq"]
    k = x @ w["wk"] + w["bk"]
    v = x @ w["wv"] + w["bv"]
    out = np.zeros((b, t, d))
    for bi in range(b):
        for h in range(n_heads):
            sl = slice(h * dk, (h + 1) * dk)
            s = q[bi, :, sl] @ k[bi, :, sl].T / math.sqrt(dk)
            p = np.exp(s - s.max(axis=1, keepdims=True))
            p /= p.sum(axis=1, keepdims=True)
            out[bi, :, sl] = p @ v[bi, :, sl]
    return out @ w["wo"] + w["bo"]


@pytest.mark.parametrize("n_heads", [1, 2, 4])
def test_multi_head_attention_matches_loop_oracle(rng, n_heads):
    d = 8
    w = {n: rng.standard_normal((d, d)) * 0.5 for n in ("wq", "wk", "wv", "wo")}
    w.update({n: rng.standard_normal(d) * 0.1 for n in ("bq", "bk", "bv", "bo")})
    x = rng.standard_normal((2, 5, d))
    got = multi_head_attention(*[Tensor(x)] * 3, None, {k: Tensor(v) for k, v in w.items()}, n_heads).data
    np.testing.assert_allclose(got, _loop_attention(x, w, n_heads), atol=1e-5)


def test_uniform_values_give_uniform_output(rng):
    d = 4
    w = {n: rng.standard_normal((d, d)) for n in ("wq", "wk")}
    w["wv"] = np.zeros((d, d))
    w["wo"] = np.eye(d)
    w.update({n: np.zeros(d) for n in ("bq", "bk", "bo")})
    w["bv"] = np.arange(d, dtype=float)
    x = rng.standard_normal((1, 6, d))
    out = multi_head_attention(*[Tensor(x)] * 3, causal_mask(6), {k: Tensor(v) for k, v in w.items()}, 2).data
    np.testing.assert_allclose(out, np.broadcast_to(np.arange(d), out.shape), atol=1e-6)


@pytest.mark.parametrize("paradigm", PARADIGMS)
def test_initial_loss_near_log_vocab(paradigm):
    m = init_parameters(desk_config(paradigm, 60, 64), 0)
    batch = random_batch(paradigm, np.random.default_rng(0), vocab=60, batch=4)
    assert abs(float(loss(m, batch).data) - math.log(60)) < 0.2 * math.log(60)


@pytest.mark.parametrize("paradigm", PARADIGMS)
def test_duplicated_batch_same_loss(paradigm):
    m = tiny_model(paradigm, 3)
    src, lab = random_batch(paradigm, np.random.default_rng(1))
    one = float(loss(m, (src, lab)).data)
    two = float(loss(m, (np.concatenate([src, src]), np.concatenate([lab, lab]))).data)
    assert two == pytest.approx(one, rel=1e-6)


@pytest.mark.parametrize("paradigm", PARADIGMS)
def test_appended_ignored_positions_are_inert(paradigm):
    m = tiny_model(paradigm, 4)
    src, lab = random_batch(paradigm, np.random.default_rng(2))

    def run(batch):
        m.zero_grad()
        value = loss(m, batch)
        nx.backward(value)
        return float(value.data), {k: p.grad.copy() for k, p in m.named_parameters()}

    base_loss, base_grads = run((src, lab))
    pad = 4
    lab2 = np.concatenate([lab, np.full((lab.shape[0], pad), IGNORE_INDEX)], 1)
    src2 = np.concatenate([src, np.zeros((src.shape[0], pad), dtype=src.dtype)], 1) if paradigm == "dec_only" else src
    new_loss, new_grads = run((src2, lab2))
    assert new_loss == base_loss
    assert all(np.array_equal(base_grads[k], new_grads[k]) for k in base_grads)


def test_collate_trims_all_padding_columns():
    src, lab = collate([[5, 6, 0, 0], [5, 0, 0, 0]], [[1, 5, 2, IGNORE_INDEX], [1, 2, IGNORE_INDEX, IGNORE_INDEX]])
    assert src.shape == (2, 2) and lab.shape == (2, 3)


@pytest.mark.parametrize("paradigm", PARADIGMS)
def test_full_model_gradients_match_finite_differences(paradigm):
    with nx.default_dtype(np.float64):
        m = tiny_model(paradigm, 7, dtype=np.float64, max_positions=16, weight_scale=10.0)
        batch = random_batch(paradigm, np.random.default_rng(3), batch=2, src_len=5, tgt_len=4)
        errors = model_gradcheck(m, lambda mm: loss(mm, batch), np.random.default_rng(0), per_tensor=3)
    worst = max(errors, key=errors.get)
    assert errors[worst] <= 1e-3, (worst, errors[worst])


def test_encoder_padding_rows_do_not_leak():
    m = tiny_model("enc_dec", 5)
    with nx.no_grad():
        a, _ = encode_source(m, np.array([[5, 6, 7]]))
        b, _ = encode_source(m, np.array([[5, 6, 7, 0, 0]]))
    assert np.array_equal(a.data[0], b.data[0, :3])
