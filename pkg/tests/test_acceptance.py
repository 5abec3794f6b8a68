"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v``.  Criteria 6 and 7
train desk-scale models through the CLI and take several minutes on one CPU.
"""

import json
import math
import random
import time

import numpy as np
import pytest

from sqlf import numerics as nx
from sqlf.cli import EXIT_OK, main
from sqlf.data import DatabaseSchema, Table, format_input, serialize_schema
from sqlf.decoding import beam_search, greedy
from sqlf.metrics import MetricReport, bleu_sentence, exact_match, lfacc, normalize_sql
from sqlf.model import desk_config, forward, forward_dec_only, forward_enc_dec, init_parameters, loss
from sqlf.numerics import IGNORE_INDEX
from sqlf.training import Checkpoint, load_checkpoint, model_from_checkpoint, save_checkpoint

from gradcheck import check_op, model_gradcheck
from tiny import exhaustive_best, random_batch, sharp_case, tiny_model

PARADIGMS = ["enc_dec", "dec_only"]


@pytest.fixture
def verdict(capsys):
    """Print one PASS/FAIL line outside pytest's capture, then assert."""

    def report(number: int, title: str, ok: bool, detail: str) -> None:
        with capsys.disabled():
            print(f"\n[acceptance {number}] {'PASS' if ok else 'FAIL'}: {title} -- {detail}", flush=True)
        assert ok, detail

    return report


# ---------------------------------------------------------------------------
# 1. gradients
# ---------------------------------------------------------------------------


def _primitive_cases(rng):
    mask = np.triu(np.full((4, 4), nx.MASK_VALUE), 1)
    labels = np.array([[1, 2, IGNORE_INDEX], [0, IGNORE_INDEX, IGNORE_INDEX]])
    ids = np.array([[0, 2, 2], [3, 1, 0]])
    relu_in = rng.standard_normal((5, 5))
    relu_in[np.abs(relu_in) < 0.01] = 0.5  # keep away from the kink
    n = rng.standard_normal
    return {
        "add": (nx.add, [n((3, 4)), n((4,))]),
        "sub": (nx.sub, [n((3, 4)), n((3, 1))]),
        "mul": (nx.mul, [n((2, 3, 4)), n((1, 3, 4))]),
        "scale": (lambda x: nx.scale(x, -2.5), [n((3, 3))]),
        "relu": (nx.relu, [relu_in]),
        "gelu": (nx.gelu, [n((4, 5))]),
        "sum_all": (nx.sum_all, [n((3, 4))]),
        "mean_all": (nx.mean_all, [n((3, 4))]),
        "reshape": (lambda x: nx.reshape(x, (6, 4)), [n((2, 3, 4))]),
        "transpose": (lambda x: nx.transpose(x, (1, 2, 0)), [n((2, 3, 4))]),
        "matmul": (nx.matmul, [n((3, 4)), n((4, 2))]),
        "matmul_batched": (nx.matmul, [n((2, 3, 4)), n((2, 4, 5))]),
        "linear": (nx.linear, [n((2, 3, 4)), n((4, 5)), n((5,))]),
        "softmax": (nx.softmax, [n((3, 5))]),
        "masked_softmax": (lambda s: nx.masked_softmax(s, mask), [n((2, 4, 4))]),
        "layer_norm": (nx.layer_norm, [n((2, 3, 6)), n((6,)), n((6,))]),
        "embedding_lookup": (lambda w: nx.embedding_lookup(w, ids), [n((4, 3))]),
        "dropout": (lambda x: nx.dropout(x, 0.3, np.random.default_rng(7), True), [n((4, 6))]),
        "cross_entropy_masked": (lambda x: nx.cross_entropy_masked(x, labels), [n((2, 3, 5))]),
    }


def test_acceptance_1_gradient_suite(verdict):
    start = time.perf_counter()
    errors = {name: check_op(fn, xs) for name, (fn, xs) in _primitive_cases(np.random.default_rng(0)).items()}
    for paradigm in PARADIGMS:
        with nx.default_dtype(np.float64):
            m = tiny_model(paradigm, 7, dtype=np.float64, max_positions=16, weight_scale=10.0)
            batch = random_batch(paradigm, np.random.default_rng(3), batch=2, src_len=5, tgt_len=4)
            per_param = model_gradcheck(m, lambda mm: loss(mm, batch), np.random.default_rng(0), per_tensor=6)
        errors[f"model[{paradigm}]"] = max(per_param.values())
    elapsed = time.perf_counter() - start
    worst = max(errors, key=errors.get)
    ok = errors[worst] <= 1e-3 and elapsed < 60
    verdict(1, "gradient suite", ok,
            f"{len(errors)} checks, worst {worst} rel err {errors[worst]:.2e} (<= 1e-3), {elapsed:.1f}s (< 60s)")


# ---------------------------------------------------------------------------
# 2. causality
# ---------------------------------------------------------------------------


def test_acceptance_2_causality(verdict):
    failures = []
    for seed in range(50):
        rng = np.random.default_rng(seed)
        dec = tiny_model("dec_only", seed)
        ids = rng.integers(0, 11, int(rng.integers(2, 16)))
        encdec = tiny_model("enc_dec", seed)
        src = rng.integers(4, 11, int(rng.integers(1, 10)))
        tgt = rng.integers(0, 11, int(rng.integers(2, 16)))
        with nx.no_grad():
            full_d = forward_dec_only(dec, ids).data
            full_e = forward_enc_dec(encdec, src, tgt).data
            for k in range(1, len(ids)):
                if not np.array_equal(full_d[:k], forward_dec_only(dec, ids[:k]).data):
                    failures.append(("dec_only", seed, k))
            for k in range(1, len(tgt)):
                if not np.array_equal(full_e[:k], forward_enc_dec(encdec, src, tgt[:k]).data):
                    failures.append(("enc_dec", seed, k))
    verdict(2, "causality (bitwise prefix truncation)", not failures,
            f"50 seeds x 2 paradigms, every prefix length; failures: {failures[:5] or 'none'}")


# ---------------------------------------------------------------------------
# 3. masked loss
# ---------------------------------------------------------------------------


def _loss_and_grads(model, batch):
    model.zero_grad()
    value = loss(model, batch)
    nx.backward(value)
    return float(value.data), {k: p.grad.copy() for k, p in model.named_parameters()}


def test_acceptance_3_masked_loss(verdict):
    failures = []
    for seed in range(20):
        for paradigm in PARADIGMS:
            rng = np.random.default_rng(seed)
            m = tiny_model(paradigm, seed)
            src, lab = random_batch(paradigm, rng)
            extra = int(rng.integers(1, 6))
            lab2 = np.concatenate([lab, np.full((lab.shape[0], extra), IGNORE_INDEX)], 1)
            # pad columns on the input side too (decoder stream or encoder source)
            src2 = np.concatenate([src, np.zeros((src.shape[0], extra), dtype=src.dtype)], 1)
            base_loss, base_grads = _loss_and_grads(m, (src, lab))
            new_loss, new_grads = _loss_and_grads(m, (src2, lab2))
            if new_loss != base_loss or not all(np.array_equal(base_grads[k], new_grads[k]) for k in base_grads):
                failures.append((paradigm, seed))
    verdict(3, "masked loss (padding changes nothing, exactly)", not failures,
            f"20 seeds x 2 paradigms, loss and every parameter gradient; failures: {failures or 'none'}")


# ---------------------------------------------------------------------------
# 4. beam oracle
# ---------------------------------------------------------------------------


def test_acceptance_4_beam_oracle(verdict):
    mismatches = {3: [], 4: []}
    nontrivial = 0
    for seed in range(100):
        model, src = sharp_case(seed, vocab=3)
        _, seq = exhaustive_best(model, src, 3, 3)
        nontrivial += len(seq) > 1
        for beam in mismatches:
            if beam_search(model, src, beam_size=beam, max_len=3)[0].tokens != seq:
                mismatches[beam].append(seed)
    greedy_fail = []
    for seed in range(100):
        model, src = sharp_case(seed)
        g = greedy(model, src, max_len=10)
        b = beam_search(model, src, beam_size=1, max_len=10)[0]
        if (b.tokens, b.log_prob) != (g.tokens, g.log_prob):
            greedy_fail.append(seed)
    ok = not mismatches[3] and not mismatches[4] and not greedy_fail
    verdict(4, "beam oracle", ok,
            f"vocab 3, max_len 3: beam 3 {100 - len(mismatches[3])}/100, beam 4 {100 - len(mismatches[4])}/100 "
            f"match exhaustive search ({nontrivial} optima longer than a lone eos); "
            f"beam 1 == greedy {100 - len(greedy_fail)}/100")


# ---------------------------------------------------------------------------
# 5. metric oracles
# ---------------------------------------------------------------------------

FUZZ_ALPHABET = list("abcSELCT ()<>=!,;*'\"\t\n.") + ["<=", ">=", "!=", "<>", "SELECT ", " FROM ", "  ", ";;"]


def test_acceptance_5_metric_oracles(verdict):
    hand = bleu_sentence("select a from t".split(), "select a from t where b".split())
    hand_ok = abs(hand - 0.6065) <= 1e-4 and abs(hand - math.exp(1 - 6 / 4)) <= 1e-12
    rnd = random.Random(0)
    vocab = "select from where a b c t = count ( ) *".split()
    identity_ok = all(
        bleu_sentence(x, x) == 1.0 for x in ([rnd.choice(vocab) for _ in range(rnd.randint(1, 20))] for _ in range(500))
    )
    em_count, implication_ok = 0, True
    for _ in range(10_000):
        a = "".join(rnd.choice(FUZZ_ALPHABET) for _ in range(rnd.randint(0, 8)))
        b = a if rnd.random() < 0.3 else "".join(rnd.choice(FUZZ_ALPHABET) for _ in range(rnd.randint(0, 8)))
        if exact_match(a, b):
            em_count += 1
            implication_ok &= lfacc(a, b)
    corpus = ["".join(rnd.choice(FUZZ_ALPHABET) for _ in range(rnd.randint(0, 30))) for _ in range(5000)]
    idempotent_ok = all(normalize_sql(normalize_sql(s)) == normalize_sql(s) for s in corpus)
    ok = hand_ok and identity_ok and implication_ok and idempotent_ok
    verdict(5, "metric oracles", ok,
            f"hand BLEU {hand:.6f} (0.6065 +- 1e-4): {hand_ok}; bleu(x,x)=1 on 500 sequences: {identity_ok}; "
            f"em => lfacc on 10000 pairs ({em_count} exact matches): {implication_ok}; "
            f"normalize idempotent on 5000 fuzz strings: {idempotent_ok}")


# ---------------------------------------------------------------------------
# 6. end-to-end overfit
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def synth64(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth64")
    assert main(["synth", "--seed", "0", "--n", "64", "--out-dir", str(root)]) == EXIT_OK
    return root


@pytest.mark.parametrize("style", ["gpt2", "t5"])
def test_acceptance_6_overfit(style, synth64, tmp_path, verdict):
    tsv = tmp_path / "train.tsv"
    assert main(["ingest", "--tables", str(synth64 / "tables.json"), "--examples", str(synth64 / "train.json"),
                 "--style", style, "--out", str(tsv)]) == EXIT_OK
    start = time.perf_counter()
    code = main(["train", "--train", str(tsv), "--style", style, "--iterations", "500", "--eval-every", "500",
                 "--eval-max-len", "48", "--out-dir", str(tmp_path / "run")])
    train_seconds = time.perf_counter() - start
    assert code == EXIT_OK
    preds = tmp_path / "preds.txt"
    assert main(["generate", "--checkpoint", str(tmp_path / "run" / "model.ckpt"), "--input", str(tsv),
                 "--beam-size", "4", "--gen-max-len", "64", "--out", str(preds)]) == EXIT_OK
    assert main(["evaluate", "--pred", str(preds), "--gold", str(tsv), "--report", str(tmp_path / "r.json")]) == EXIT_OK
    total_seconds = time.perf_counter() - start
    report = MetricReport.load(tmp_path / "r.json")
    paradigm = load_checkpoint(tmp_path / "run" / "model.ckpt").config.paradigm
    ok = report.em >= 0.95 and report.lfacc >= 0.95 and train_seconds < 300
    verdict(6, f"overfit synth(0, 64) [{style}, {paradigm}]", ok,
            f"{report.n_samples} training examples, beam 4: EM {report.em:.4f}, LFAcc {report.lfacc:.4f} (>= 0.95); "
            f"500 steps in {train_seconds:.0f}s (< 300s), {total_seconds:.0f}s including generation")


# ---------------------------------------------------------------------------
# 7. protocol-shape sweep
# ---------------------------------------------------------------------------


def test_acceptance_7_sweep(tmp_path, verdict):
    data = tmp_path / "data"
    assert main(["synth", "--seed", "0", "--n", "400", "--valid-frac", "0.1", "--test-frac", "0.1",
                 "--out-dir", str(data)]) == EXIT_OK
    out = tmp_path / "sweep"
    start = time.perf_counter()
    code = main(["sweep", "--tables", str(data / "tables.json"), "--train", str(data / "train.json"),
                 "--valid", str(data / "valid.json"), "--test", str(data / "test.json"), "--styles", "t5,bart,gpt2",
                 "--divisor", "10", "--eval-every", "100", "--eval-max-len", "48", "--gen-max-len", "48",
                 "--out-dir", str(out)])
    elapsed = time.perf_counter() - start
    assert code == EXIT_OK
    summary = json.loads((out / "sweep.json").read_text())
    table = (out / "table.txt").read_text()
    shape_ok = summary["budgets"] == [100, 200, 300, 400, 500] and all(
        name in table for name in ("T5Prefix", "BARTPrefix", "GPT2Prompt", "Zero-Shot", "Fine-Tuned"))
    parts, ok = [], shape_ok
    for style, res in summary["styles"].items():
        first, last = res["budgets"][0]["val_lfacc"], res["budgets"][-1]["val_lfacc"]
        evals = {h["step"]: h["val_lfacc"] for h in res["history"]}
        ok &= last >= first
        parts.append(f"{style} selected LFAcc {first:.3f}@100 -> {last:.3f}@500 "
                     f"(raw eval {evals.get(100, float('nan')):.3f} -> {evals.get(500, float('nan')):.3f}, "
                     f"test LFAcc zero-shot {res['zero_shot']['lfacc']:.3f} / fine-tuned {res['fine_tuned']['lfacc']:.3f})")
    verdict(7, "sweep over budgets 100..500", ok,
            f"table shape ok: {shape_ok}; " + "; ".join(parts) + f"; {elapsed:.0f}s\n{table}")


# ---------------------------------------------------------------------------
# 8. formatting fidelity
# ---------------------------------------------------------------------------


def test_acceptance_8_templates(verdict):
    question = "What is the average age of employees?"
    schema = serialize_schema(DatabaseSchema("company", (Table("employees", ("id", "name", "age")),)))
    expected = {
        "t5": b"translate SQL: What is the average age of employees? Schema: employees (id, name, age)",
        "bart": b"Question: What is the average age of employees? Schema: employees (id, name, age)",
        "gpt2": b"Question: What is the average age of employees? Schema: employees (id, name, age) SQL:",
    }
    got = {style: format_input(question, schema, style).encode("utf-8") for style in expected}
    wrong = [style for style in expected if got[style] != expected[style]]
    verdict(8, "formatting fidelity", not wrong, f"3 templates byte-for-byte; mismatches: {wrong or 'none'}")


# ---------------------------------------------------------------------------
# 9. checkpoint round trip
# ---------------------------------------------------------------------------


def test_acceptance_9_checkpoint_round_trip(tmp_path, verdict):
    golden = np.array([5, 17, 42, 8, 99, 3, 64, 12])
    details, ok = [], True
    for paradigm in PARADIGMS:
        cfg = desk_config(paradigm, 120)
        model = init_parameters(cfg, 11)
        path = tmp_path / f"{paradigm}.ckpt"
        save_checkpoint(Checkpoint(cfg, model.state_dict(), step=500, val_lfacc=0.5), path)
        back = load_checkpoint(path)
        tensors_ok = back.config == cfg and back.tensors.keys() == model.state_dict().keys() and all(
            back.tensors[k].dtype == v.dtype and np.array_equal(back.tensors[k], v) for k, v in model.state_dict().items())
        restored = model_from_checkpoint(back)
        with nx.no_grad():
            if paradigm == "enc_dec":
                a, b = forward(model, golden, [1, *golden[:4]]).data, forward(restored, golden, [1, *golden[:4]]).data
            else:
                a, b = forward(model, golden).data, forward(restored, golden).data
        forward_ok = np.array_equal(a, b)
        ok &= tensors_ok and forward_ok
        details.append(f"{paradigm}: {len(back.tensors)} tensors bitwise {tensors_ok}, golden forward identical {forward_ok}")
    verdict(9, "checkpoint round trip", ok, "; ".join(details))
