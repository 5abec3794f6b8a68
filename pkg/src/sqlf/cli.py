"""``sqlf`` command line: ingest, synth, train, generate, evaluate, sweep.

Settings resolve as built-in defaults < config file < command-line flags.
The config file is INI: keys in ``[sqlf]`` apply to every command, keys in a
section named after the command (``[train]``, ``[sweep]``, ...) override
them.  Every artifact carries the resolved settings and the format version,
either inside the file (checkpoints, JSON reports) or in a ``<name>.meta.json``
sidecar next to it.

Exit codes: 0 success, 1 usage error, 2 data error, 3 training divergence.
"""

from __future__ import annotations

import argparse
import configparser
import json
import logging
import sys
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Sequence

from .data import (
    EVAL_SUBSET,
    DataError,
    Example,
    InputStyle,
    attach_ids,
    example_to_record,
    load_spider,
    preprocessed_text,
    read_preprocessed,
    schema_to_record,
    split_examples,
    synth_dataset,
    with_formatted_input,
)
from .decoding import DEFAULT_BEAM, DEFAULT_MAX_LEN
from .metrics import MetricReport, evaluate, format_table
from .model import desk_config, init_parameters
from .tokenizer import Vocabulary, build_vocab
from .training import (
    FORMAT_VERSION,
    CheckpointError,
    DivergenceError,
    TrainConfig,
    TrainingData,
    checkpoint_bytes,
    evaluate_model,
    iteration_sweep,
    load_checkpoint,
    model_from_checkpoint,
    predict,
    scaled_budgets,
    train,
)

log = logging.getLogger("sqlf")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3
COMMANDS = ("ingest", "synth", "train", "generate", "evaluate", "sweep")


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    # paths
    tables: str = ""
    examples: str = ""
    train: str = ""
    valid: str = ""
    test: str = ""
    out: str = ""
    out_dir: str = ""
    checkpoint: str = ""
    input: str = ""
    pred: str = ""
    gold: str = ""
    report: str = ""
    # data
    style: str = "t5"
    seed: int = 0
    n: int = 64
    valid_frac: float = 0.0
    test_frac: float = 0.0
    vocab_size: int = 8000
    # model
    n_layers: int = 0  # 0 = per-paradigm default
    n_heads: int = 4
    d_model: int = 128
    d_ff: int = 256
    dropout_rate: float = 0.0
    # training
    iterations: int = 1000
    batch_size: int = 16
    learning_rate: float = 3e-4
    eval_every: int = 100
    max_len: int = 256
    grad_clip: float = 1.0
    schedule: str = "constant"
    eval_beam_size: int = 1
    eval_max_len: int = DEFAULT_MAX_LEN
    eval_samples: int = 0  # 0 = whole validation set
    # generation / evaluation
    beam_size: int = DEFAULT_BEAM
    gen_max_len: int = DEFAULT_MAX_LEN
    eval_subset: int = EVAL_SUBSET  # 0 = everything
    # sweep
    styles: str = "t5,bart,gpt2"
    divisor: int = 10

    def to_dict(self) -> dict:
        return asdict(self)

    def train_config(self, style: str | None = None) -> TrainConfig:
        return TrainConfig(
            iterations=self.iterations,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            seed=self.seed,
            eval_every=min(self.eval_every, self.iterations),
            max_len=self.max_len,
            style=style or self.style,
            grad_clip=self.grad_clip,
            schedule=self.schedule,
            eval_beam_size=self.eval_beam_size,
            eval_max_len=self.eval_max_len,
            eval_samples=self.eval_samples or None,
        )

    def model_config(self, paradigm: str, vocab_size: int):
        overrides = dict(n_heads=self.n_heads, d_model=self.d_model, d_ff=self.d_ff, dropout_rate=self.dropout_rate)
        if self.n_layers:
            overrides["n_layers"] = self.n_layers
        return desk_config(paradigm, vocab_size, self.max_len, **overrides)


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}
_CASTS = {"int": int, "float": float, "str": str}


def _cast(key: str, value: str):
    try:
        return _CASTS[_FIELD_TYPES[key]](value)
    except ValueError as exc:
        raise UsageError(f"setting {key}: cannot parse {value!r} as {_FIELD_TYPES[key]}") from exc


def read_config_file(path: str, command: str) -> dict:
    parser = configparser.ConfigParser()
    try:
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
    except FileNotFoundError as exc:
        raise UsageError(f"config file not found: {path}") from exc
    except configparser.Error as exc:
        raise UsageError(f"config file {path}: {exc}") from exc
    values: dict = {}
    for section in ("sqlf", command):
        if not parser.has_section(section):
            continue
        for key, raw in parser.items(section):
            key = key.replace("-", "_")
            if key not in _FIELD_TYPES:
                raise UsageError(f"config file {path}: unknown setting {key!r} in [{section}]")
            values[key] = _cast(key, raw)
    return values


def resolve_config(command: str, flags: dict) -> RunConfig:
    values = {}
    config_path = flags.pop("config", None)
    if config_path:
        values.update(read_config_file(config_path, command))
    values.update({k: v for k, v in flags.items() if v is not None})
    cfg = RunConfig(**values)
    try:
        InputStyle.parse(cfg.style)
        for s in cfg.styles.split(","):
            InputStyle.parse(s)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    return cfg


# ---------------------------------------------------------------------------
# atomic outputs
# ---------------------------------------------------------------------------


class Outputs:
    """Stage files under temporary names; publish them together or not at all."""

    def __init__(self, command: str, cfg: RunConfig):
        self.meta = {"format_version": FORMAT_VERSION, "command": command, "config": cfg.to_dict()}
        self.staged: list[tuple[Path, Path]] = []

    def _stage(self, path: Path, data: bytes) -> None:
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_name(f".{path.name}.partial")
        tmp.write_bytes(data)
        self.staged.append((tmp, path))

    def text(self, path, content: str, sidecar: bool = True) -> None:
        path = Path(path)
        self._stage(path, content.encode("utf-8"))
        if sidecar:
            self.json(path.with_name(path.name + ".meta.json"), {}, embed_meta=True)

    def json(self, path, payload: dict, embed_meta: bool = True) -> None:
        body = {**self.meta, **payload} if embed_meta else payload
        self._stage(Path(path), (json.dumps(body, indent=2, sort_keys=True) + "\n").encode("utf-8"))

    def raw(self, path, data: bytes) -> None:
        self._stage(Path(path), data)

    def commit(self) -> None:
        for tmp, final in self.staged:
            tmp.replace(final)
        self.staged = []

    def discard(self) -> None:
        for tmp, _ in self.staged:
            tmp.unlink(missing_ok=True)
        self.staged = []


def _require(cfg: RunConfig, *names: str) -> None:
    missing = [n for n in names if not getattr(cfg, n)]
    if missing:
        raise UsageError("missing required setting(s): " + ", ".join("--" + n.replace("_", "-") for n in missing))


def _read_lines(path: str) -> list[str]:
    text = Path(path).read_text(encoding="utf-8")
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    return lines


def _subset(items: list, n: int) -> list:
    return items[:n] if n else items


def _format_examples(path: str, tables: str, style: str) -> list[Example]:
    """Examples with formatted inputs, from a Spider JSON file (needs tables) or a preprocessed TSV."""
    if path.endswith(".json"):
        if not tables:
            raise UsageError(f"{path} is Spider JSON; --tables is needed to serialize schemas")
        schemas, examples = load_spider(tables, path)
        return with_formatted_input(examples, schemas, style)
    return read_preprocessed(path)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_ingest(cfg: RunConfig, out: Outputs) -> None:
    _require(cfg, "tables", "examples", "out")
    schemas, examples = load_spider(cfg.tables, cfg.examples)
    formatted = with_formatted_input(examples, schemas, cfg.style)
    out.text(cfg.out, preprocessed_text(formatted))
    log.info("ingest: %d examples -> %s", len(formatted), cfg.out)


def cmd_synth(cfg: RunConfig, out: Outputs) -> None:
    _require(cfg, "out_dir")
    schemas, examples = synth_dataset(cfg.seed, cfg.n)
    train_ex, valid_ex, test_ex = split_examples(examples, cfg.valid_frac, cfg.test_frac, cfg.seed)
    root = Path(cfg.out_dir)
    dump = lambda records: json.dumps(records, indent=1) + "\n"  # noqa: E731
    out.text(root / "tables.json", dump([schema_to_record(s) for s in schemas.values()]), sidecar=False)
    for name, part in (("train", train_ex), ("valid", valid_ex), ("test", test_ex)):
        out.text(root / f"{name}.json", dump([example_to_record(e) for e in part]), sidecar=False)
    out.json(root / "synth.meta.json", {"counts": {"train": len(train_ex), "valid": len(valid_ex), "test": len(test_ex)}})


def _training_data(cfg: RunConfig, style: str, train_path: str, valid_path: str) -> TrainingData:
    train_ex = _format_examples(train_path, cfg.tables, style)
    valid_ex = _format_examples(valid_path, cfg.tables, style) if valid_path else list(train_ex)
    if not train_ex:
        raise DataError(f"{train_path}: no training examples")
    if not valid_ex:
        raise DataError(f"{valid_path}: no validation examples")
    corpus = [e.formatted_input for e in train_ex] + [e.gold_sql for e in train_ex]
    vocab = build_vocab(corpus, cfg.vocab_size, cfg.max_len)
    return TrainingData(vocab, attach_ids(train_ex, style, vocab, cfg.max_len), valid_ex)


def cmd_train(cfg: RunConfig, out: Outputs) -> None:
    _require(cfg, "train", "out_dir")
    data = _training_data(cfg, cfg.style, cfg.train, cfg.valid)
    tcfg = cfg.train_config()
    model = init_parameters(cfg.model_config(tcfg.paradigm, len(data.vocab)), cfg.seed)
    start = time.perf_counter()
    ckpt, history = train(model, data, tcfg, meta={"run_config": cfg.to_dict()})
    log.info("train: %d steps in %.1fs, best step %d (val LFAcc %.4f)",
             tcfg.iterations, time.perf_counter() - start, ckpt.step, ckpt.val_lfacc)
    root = Path(cfg.out_dir)
    out.raw(root / "model.ckpt", checkpoint_bytes(ckpt))
    lines = ["step,loss,val_lfacc"] + [f"{h.step},{h.train_loss:.6f},{h.val_lfacc:.6f}" for h in history]
    out.text(root / "history.csv", "\n".join(lines) + "\n")


def cmd_generate(cfg: RunConfig, out: Outputs) -> None:
    _require(cfg, "checkpoint", "input", "out")
    ckpt = load_checkpoint(cfg.checkpoint)
    try:
        vocab = Vocabulary(tuple(ckpt.meta["vocab"]))
        input_max_len = int(ckpt.meta["train_config"]["max_len"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"{cfg.checkpoint}: checkpoint lacks vocabulary/training metadata") from exc
    inputs = [line.split("\t", 1)[0] for line in _subset(_read_lines(cfg.input), cfg.eval_subset)]
    if not inputs:
        raise DataError(f"{cfg.input}: no inputs")
    model = model_from_checkpoint(ckpt)
    preds = predict(model, inputs, vocab, cfg.beam_size, cfg.gen_max_len, input_max_len)
    out.text(cfg.out, "".join(p + "\n" for p in preds))


def cmd_evaluate(cfg: RunConfig, out: Outputs) -> None:
    _require(cfg, "pred", "gold", "report")
    preds = _subset(_read_lines(cfg.pred), cfg.eval_subset)
    golds = [line.rsplit("\t", 1)[-1] for line in _subset(_read_lines(cfg.gold), cfg.eval_subset)]
    if len(preds) != len(golds):
        raise DataError(f"{len(preds)} predictions in {cfg.pred} but {len(golds)} gold queries in {cfg.gold}")
    try:
        report = evaluate(preds, golds, provenance=out.meta)
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    out.json(cfg.report, report.to_dict(), embed_meta=False)
    out.text(str(cfg.report) + ".txt", report.table(Path(cfg.pred).name))


def cmd_sweep(cfg: RunConfig, out: Outputs) -> None:
    _require(cfg, "tables", "train", "valid", "out_dir")
    styles = [InputStyle.parse(s).value for s in cfg.styles.split(",")]
    budgets = scaled_budgets(cfg.divisor)
    base = cfg.train_config()
    results, rows, zero_shot, budget_lines = {}, [], [], []
    for style in styles:
        data = _training_data(cfg, style, cfg.train, cfg.valid)
        test = _format_examples(cfg.test, cfg.tables, style) if cfg.test else data.valid
        test = _subset(test, cfg.eval_subset)
        tcfg = TrainConfig(**{**base.to_dict(), "style": style, "paradigm": ""})
        mcfg = cfg.model_config(tcfg.paradigm, len(data.vocab))

        def score(model):
            return evaluate_model(model, test, data.vocab, cfg.beam_size, cfg.gen_max_len, cfg.max_len)

        zs = score(init_parameters(mcfg, cfg.seed))
        report = iteration_sweep(data, tcfg, mcfg, divisor=cfg.divisor, meta={"run_config": cfg.to_dict()})
        ft = score(model_from_checkpoint(report.budgets[-1].checkpoint))
        name = {"t5": "T5Prefix", "bart": "BARTPrefix", "gpt2": "GPT2Prompt"}[style]
        rows.append((name, ft))
        zero_shot.append(zs)
        for r in report.rows():
            budget_lines.append(
                f"{name:<10} | {r['budget']:>6} | {r['best_step']:>9} | {100 * r['val_lfacc']:>9.2f} | "
                f"{100 * r['val_bleu']:>8.2f} | {100 * r['val_em']:>6.2f}"
            )
        results[style] = {
            "budgets": report.rows(),
            "history": [asdict(h) for h in report.history],
            "zero_shot": _summary(zs),
            "fine_tuned": _summary(ft),
        }
        log.info("sweep: %s done", style)
    header = f"{'Model':<10} | {'Budget':>6} | {'Best step':>9} | {'LFAcc (%)':>9} | {'BLEU (%)':>8} | {'EM (%)':>6}"
    root = Path(cfg.out_dir)
    out.json(root / "sweep.json", {"budgets": budgets, "styles": results})
    out.text(root / "table.txt", format_table(rows, zero_shot))
    out.text(root / "budgets.txt", "\n".join([header, "-" * len(header)] + budget_lines) + "\n")


def _summary(r: MetricReport) -> dict:
    return {"n_samples": r.n_samples, "lfacc": r.lfacc, "bleu": r.bleu, "em": r.em}


HANDLERS = {
    "ingest": cmd_ingest,
    "synth": cmd_synth,
    "train": cmd_train,
    "generate": cmd_generate,
    "evaluate": cmd_evaluate,
    "sweep": cmd_sweep,
}


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _add(p: argparse.ArgumentParser, *names: str) -> None:
    for name in names:
        flag = "--" + name.replace("_", "-")
        p.add_argument(flag, dest=name, type=_CASTS[_FIELD_TYPES[name]], default=None)


TRAIN_FLAGS = (
    "style", "seed", "vocab_size", "n_layers", "n_heads", "d_model", "d_ff", "dropout_rate", "iterations",
    "batch_size", "learning_rate", "eval_every", "max_len", "grad_clip", "schedule", "eval_beam_size",
    "eval_max_len", "eval_samples",
)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="sqlf", description="Text-to-SQL fine-tuning pipeline on a from-scratch numpy transformer.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    specs = {
        "ingest": ("Spider JSON -> preprocessed TSV (formatted_input<TAB>gold_sql)", ("tables", "examples", "out", "style")),
        "synth": ("write a seeded toy dataset in Spider format", ("seed", "n", "out_dir", "valid_frac", "test_frac")),
        "train": ("fine-tune from scratch; writes model.ckpt and history.csv", ("train", "valid", "tables", "out_dir") + TRAIN_FLAGS),
        "generate": ("decode SQL for each input line", ("checkpoint", "input", "out", "beam_size", "gen_max_len", "eval_subset")),
        "evaluate": ("score predictions against gold queries", ("pred", "gold", "report", "eval_subset")),
        "sweep": (
            "iteration-budget sweep over input styles; writes a zero-shot/fine-tuned table",
            ("tables", "train", "valid", "test", "out_dir", "styles", "divisor", "beam_size", "gen_max_len", "eval_subset")
            + TRAIN_FLAGS,
        ),
    }
    for name, (help_text, flags) in specs.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", default=None, help="INI file; [sqlf] and [%s] sections" % name)
        _add(p, *flags)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    out = None
    try:
        args = vars(parser.parse_args(argv))
        command = args.pop("command")
        verbose = args.pop("verbose")
        if command is None:
            raise UsageError("sqlf: a command is required: " + ", ".join(COMMANDS))
        logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(name)s: %(message)s")
        cfg = resolve_config(command, args)
        out = Outputs(command, cfg)
        HANDLERS[command](cfg, out)
        out.commit()
        return EXIT_OK
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        code = EXIT_USAGE
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        code = EXIT_DIVERGED
    except (DataError, CheckpointError, FileNotFoundError, IsADirectoryError, UnicodeDecodeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        code = EXIT_DATA
    if out is not None:
        out.discard()
    return code


if __name__ == "__main__":
    sys.exit(main())
