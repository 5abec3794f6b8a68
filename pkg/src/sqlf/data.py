"""Spider-format ingestion, schema serialization, input templates and a toy NL->SQL generator."""

from __future__ import annotations

import enum
import json
import random
import re
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

from .numerics import IGNORE_INDEX
from .tokenizer import PAD_ID, Vocabulary, encode, labels_for_training

TABLE_SEPARATOR = " ; "
EVAL_SUBSET = 1000


class DataError(ValueError):
    """Malformed or inconsistent dataset input."""


@dataclass(frozen=True)
class Table:
    name: str
    columns: tuple[str, ...]


@dataclass(frozen=True)
class DatabaseSchema:
    db_id: str
    tables: tuple[Table, ...]

    def __post_init__(self):
        if not self.db_id:
            raise DataError("schema has an empty db_id")
        names = [t.name for t in self.tables]
        if len(set(names)) != len(names):
            raise DataError(f"schema {self.db_id!r}: duplicate table names")
        for t in self.tables:
            if not t.columns:
                raise DataError(f"schema {self.db_id!r}: table {t.name!r} has no columns")

    def table(self, name: str) -> Table:
        for t in self.tables:
            if t.name == name:
                return t
        raise KeyError(name)


@dataclass(frozen=True)
class Example:
    question: str
    gold_sql: str
    db_id: str
    formatted_input: str = ""
    input_ids: tuple[int, ...] = ()
    label_ids: tuple[int, ...] = ()


class InputStyle(enum.Enum):
    T5_PREFIX = "t5"
    BART_PREFIX = "bart"
    GPT2_PROMPT = "gpt2"

    @property
    def paradigm(self) -> str:
        return "dec_only" if self is InputStyle.GPT2_PROMPT else "enc_dec"

    @classmethod
    def parse(cls, value: "str | InputStyle") -> "InputStyle":
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower()
        aliases = {"t5prefix": "t5", "bartprefix": "bart", "gpt2prompt": "gpt2"}
        key = aliases.get(key, key)
        for style in cls:
            if style.value == key:
                return style
        raise ValueError(f"unknown input style {value!r}; expected one of t5, bart, gpt2")


# ---------------------------------------------------------------------------
# Spider files
# ---------------------------------------------------------------------------


def _read_json_array(path: Path) -> list:
    try:
        payload = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise
    except (OSError, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: cannot parse: {exc}") from exc
    if not isinstance(payload, list):
        raise DataError(f"{path}: expected an array of records")
    return payload


def parse_tables(records: list, path: str = "<tables>") -> dict[str, DatabaseSchema]:
    schemas: dict[str, DatabaseSchema] = {}
    for i, rec in enumerate(records):
        try:
            db_id = rec["db_id"]
            table_names = list(rec["table_names_original"])
            columns: list[list[str]] = [[] for _ in table_names]
            for tidx, cname in rec["column_names_original"]:
                if tidx == -1:
                    continue
                columns[tidx].append(str(cname))
            schema = DatabaseSchema(
                str(db_id), tuple(Table(str(n), tuple(c)) for n, c in zip(table_names, columns))
            )
        except DataError as exc:
            raise DataError(f"{path}: record {i}: {exc}") from exc
        except (KeyError, TypeError, IndexError, ValueError) as exc:
            raise DataError(f"{path}: record {i}: malformed table record ({exc!r})") from exc
        schemas[schema.db_id] = schema
    return schemas


def parse_examples(records: list, schemas: dict[str, DatabaseSchema], path: str = "<examples>") -> list[Example]:
    out = []
    for i, rec in enumerate(records):
        try:
            question, query, db_id = rec["question"], rec["query"], rec["db_id"]
        except (KeyError, TypeError) as exc:
            raise DataError(f"{path}: record {i}: malformed example record ({exc!r})") from exc
        if not isinstance(question, str) or not isinstance(query, str) or not query.strip():
            raise DataError(f"{path}: record {i}: question/query must be non-empty strings")
        if db_id not in schemas:
            raise DataError(f"{path}: example {i}: unresolved db_id {db_id!r}")
        out.append(Example(question, query, db_id))
    return out


def load_spider(tables_path, examples_path) -> tuple[dict[str, DatabaseSchema], list[Example]]:
    """Load a Spider ``tables.json`` and an examples file, preserving file order."""
    tables_path, examples_path = Path(tables_path), Path(examples_path)
    schemas = parse_tables(_read_json_array(tables_path), str(tables_path))
    text = examples_path.read_text(encoding="utf-8")
    if not text.strip():
        return schemas, []
    try:
        records = json.loads(text)
    except json.JSONDecodeError as exc:
        raise DataError(f"{examples_path}: cannot parse: {exc}") from exc
    if not isinstance(records, list):
        raise DataError(f"{examples_path}: expected an array of records")
    return schemas, parse_examples(records, schemas, str(examples_path))


def schema_to_record(schema: DatabaseSchema) -> dict:
    cols: list[list] = [[-1, "*"]]
    for i, t in enumerate(schema.tables):
        cols.extend([i, c] for c in t.columns)
    return {
        "db_id": schema.db_id,
        "table_names_original": [t.name for t in schema.tables],
        "column_names_original": cols,
    }


def example_to_record(ex: Example) -> dict:
    return {"db_id": ex.db_id, "question": ex.question, "query": ex.gold_sql}


# ---------------------------------------------------------------------------
# serialization and templates
# ---------------------------------------------------------------------------


def serialize_schema(schema: DatabaseSchema) -> str:
    return TABLE_SEPARATOR.join(f"{t.name} ({', '.join(t.columns)})" for t in schema.tables)


def format_input(question: str, schema_string: str, style: InputStyle | str) -> str:
    if not question:
        raise ValueError("format_input: empty question")
    style = InputStyle.parse(style)
    if style is InputStyle.T5_PREFIX:
        return f"translate SQL: {question} Schema: {schema_string}"
    if style is InputStyle.BART_PREFIX:
        return f"Question: {question} Schema: {schema_string}"
    return f"Question: {question} Schema: {schema_string} SQL:"


def with_formatted_input(examples: Iterable[Example], schemas: dict[str, DatabaseSchema], style) -> list[Example]:
    cache: dict[str, str] = {}
    out = []
    for ex in examples:
        if ex.db_id not in cache:
            cache[ex.db_id] = serialize_schema(schemas[ex.db_id])
        out.append(replace(ex, formatted_input=format_input(ex.question, cache[ex.db_id], style)))
    return out


def make_training_pair(
    example: Example,
    style: InputStyle | str,
    vocab: Vocabulary,
    max_len: int,
    pad_to_max: bool = True,
) -> tuple[list[int], list[int]]:
    """Token ids and loss labels for one example.

    Encoder-decoder: ``(source, [bos] sql [eos])`` with padding ignored.
    Decoder-only: one stream ``prompt sql [eos]`` whose labels ignore the prompt.
    """
    style = InputStyle.parse(style)
    text = example.formatted_input
    if not text:
        raise ValueError("make_training_pair: example has no formatted_input")
    if style.paradigm == "enc_dec":
        src = encode(text, vocab, max_len, pad_to_max=pad_to_max)
        tgt = encode(example.gold_sql, vocab, max_len, pad_to_max=pad_to_max, add_bos=True, add_eos=True)
        return src, labels_for_training(tgt, IGNORE_INDEX, vocab_size=len(vocab))
    prompt = encode(text, vocab, 10**9)
    if len(prompt) >= max_len:
        raise DataError(
            f"no room for target: prompt has {len(prompt)} tokens, max_len is {max_len}"
        )
    target = encode(example.gold_sql, vocab, 10**9, add_eos=True)
    seq = (prompt + target)[:max_len]
    if pad_to_max:
        seq += [PAD_ID] * (max_len - len(seq))
    return seq, labels_for_training(seq, IGNORE_INDEX, prompt_len=len(prompt), vocab_size=len(vocab))


def attach_ids(examples: Sequence[Example], style, vocab: Vocabulary, max_len: int) -> list[Example]:
    out = []
    for ex in examples:
        ids, labels = make_training_pair(ex, style, vocab, max_len)
        out.append(replace(ex, input_ids=tuple(ids), label_ids=tuple(labels)))
    return out


# ---------------------------------------------------------------------------
# splits and preprocessed files
# ---------------------------------------------------------------------------


def split_examples(
    examples: Sequence[Example], valid_frac: float = 0.1, test_frac: float = 0.1, seed: int = 0
) -> tuple[list[Example], list[Example], list[Example]]:
    """Seeded shuffle then cut into disjoint train/valid/test partitions."""
    order = list(range(len(examples)))
    random.Random(seed).shuffle(order)
    n = len(order)
    n_test = int(round(n * test_frac))
    n_valid = int(round(n * valid_frac))
    test = [examples[i] for i in order[:n_test]]
    valid = [examples[i] for i in order[n_test : n_test + n_valid]]
    train = [examples[i] for i in order[n_test + n_valid :]]
    return train, valid, test


def eval_subset(examples: Sequence[Example], n: int = EVAL_SUBSET) -> list[Example]:
    return list(examples[:n])


def _clean_field(s: str) -> str:
    return " ".join(s.replace("\t", " ").splitlines()).strip()


def preprocessed_text(examples: Iterable[Example]) -> str:
    """One ``formatted_input<TAB>gold_sql`` line per example; tabs/newlines inside fields become spaces."""
    return "".join(f"{_clean_field(ex.formatted_input)}\t{_clean_field(ex.gold_sql)}\n" for ex in examples)


def write_preprocessed(path, examples: Iterable[Example]) -> int:
    text = preprocessed_text(examples)
    Path(path).write_text(text, encoding="utf-8")
    return text.count("\n")


def read_preprocessed(path) -> list[Example]:
    out = []
    text = Path(path).read_text(encoding="utf-8")
    for i, line in enumerate(text.splitlines()):
        if not line.strip():
            continue
        if "\t" not in line:
            raise DataError(f"{path}: line {i + 1}: expected formatted_input<TAB>gold_sql")
        src, sql = line.rsplit("\t", 1)
        if not sql.strip():
            raise DataError(f"{path}: line {i + 1}: empty gold SQL")
        out.append(Example(question="", gold_sql=sql, db_id="", formatted_input=src))
    return out


# ---------------------------------------------------------------------------
# synthetic toy dataset
# ---------------------------------------------------------------------------

SYNTH_SCHEMAS = (
    DatabaseSchema("company", (
        Table("employees", ("id", "name", "age", "salary")),
        Table("departments", ("id", "name", "budget")),
    )),
    DatabaseSchema("store", (
        Table("products", ("id", "name", "price", "stock")),
        Table("orders", ("id", "quantity", "total")),
    )),
    DatabaseSchema("school", (
        Table("students", ("id", "name", "grade", "age")),
        Table("courses", ("id", "title", "credits")),
    )),
    DatabaseSchema("geo", (
        Table("cities", ("id", "name", "population", "area")),
        Table("rivers", ("id", "name", "length")),
    )),
)
_TEXT_COLUMNS = {"name", "title"}
SYNTH_OPS = {"=": "equal to", ">": "greater than", "<": "less than"}
SYNTH_AGGS = {"AVG": "average", "MAX": "maximum", "MIN": "minimum", "SUM": "total"}
SYNTH_VALUES = tuple(str(v) for v in range(10, 100, 10))


def _numeric(table: Table) -> list[str]:
    return [c for c in table.columns if c not in _TEXT_COLUMNS and c != "id"]


def synth_family(family: int) -> list[tuple[str, str, str]]:
    """Every (question, sql, db_id) triple of one template family, in a fixed order."""
    out = []
    for schema in SYNTH_SCHEMAS:
        for t in schema.tables:
            if family == 1:
                for c in t.columns:
                    out.append((f"Show the {c} of all {t.name}.", f"SELECT {c} FROM {t.name}", schema.db_id))
            elif family == 2:
                for c in t.columns:
                    for w in _numeric(t):
                        for op, word in SYNTH_OPS.items():
                            for v in SYNTH_VALUES:
                                out.append((
                                    f"Show the {c} of {t.name} whose {w} is {word} {v}.",
                                    f"SELECT {c} FROM {t.name} WHERE {w} {op} {v}",
                                    schema.db_id,
                                ))
            elif family == 3:
                for c in _numeric(t):
                    for agg, word in SYNTH_AGGS.items():
                        out.append((
                            f"What is the {word} {c} of {t.name}?",
                            f"SELECT {agg} ( {c} ) FROM {t.name}",
                            schema.db_id,
                        ))
            else:
                raise ValueError(f"unknown template family {family}")
    return out


def synth_dataset(seed: int, n: int) -> tuple[dict[str, DatabaseSchema], list[Example]]:
    """``n`` distinct toy question/SQL pairs; a template family is drawn uniformly per pair.

    Deterministic for a given seed.  Pairs repeat only once all pairs of the
    grammar have been used.
    """
    if n < 1:
        raise ValueError("synth_dataset: n must be >= 1")
    rng = random.Random(seed)
    pools = {f: synth_family(f) for f in (1, 2, 3)}
    for pool in pools.values():
        rng.shuffle(pool)
    cursors = {f: 0 for f in pools}
    examples = []
    while len(examples) < n:
        live = [f for f in pools if cursors[f] < len(pools[f])]
        if not live:
            cursors = {f: 0 for f in pools}
            continue
        f = rng.choice(live)
        q, sql, db = pools[f][cursors[f]]
        cursors[f] += 1
        examples.append(Example(q, sql, db))
    return {s.db_id: s for s in SYNTH_SCHEMAS}, examples


_SYNTH_SQL_RE = re.compile(
    r"^SELECT (?:(?P<agg>AVG|MAX|MIN|SUM) \( (?P<acol>\w+) \)|(?P<col>\w+)) FROM (?P<table>\w+)"
    r"(?: WHERE (?P<wcol>\w+) (?P<op>[=<>]) (?P<val>\d+))?$"
)


def parse_synth_sql(sql: str, schemas: dict[str, DatabaseSchema] | None = None) -> dict | None:
    """Parse ``sql`` under the toy grammar; ``None`` if it is not a sentence of it.

    With ``schemas``, every referenced column must belong to the referenced
    table of some schema.
    """
    m = _SYNTH_SQL_RE.match(sql)
    if not m or (m["agg"] and m["wcol"]):
        return None
    parsed = {k: v for k, v in m.groupdict().items() if v is not None}
    if schemas is not None:
        tables = [t for s in schemas.values() for t in s.tables if t.name == parsed["table"]]
        if not tables:
            return None
        cols = set(tables[0].columns)
        for key in ("col", "acol", "wcol"):
            if key in parsed and parsed[key] not in cols:
                return None
    return parsed
