"""Column-oriented table with CSV ingestion/emission and equality grouping.

A Table is immutable after construction: operators produce new tables and
report provenance through row ids (plain non-negative ints indexing into the
source table). Cells are python values (str/int/float/bool) or None for null.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

from .errors import SchemaError

KINDS = ("text", "float", "int", "bool")


def render_cell(value) -> str:
    """Textual form of a cell used by templates and CSV output."""
    if isinstance(value, bool):
        return "True" if value else "False"
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass(frozen=True)
class Table:
    schema: tuple[tuple[str, str], ...]
    columns: dict[str, list]
    row_count: int
    # Similarity indexes attached by load_sem_index/sem_index; not part of
    # table identity and dropped by row-reshaping operators.
    indexes: dict = field(default_factory=dict, compare=False, repr=False)

    @staticmethod
    def from_columns(schema, columns) -> "Table":
        schema = tuple((str(n), str(k)) for n, k in schema)
        names = [n for n, _ in schema]
        if len(set(names)) != len(names):
            raise SchemaError("duplicate column names: %r" % (names,))
        for n, k in schema:
            if not n:
                raise SchemaError("empty column name")
            if k not in KINDS:
                raise SchemaError("unknown column kind %r for %r" % (k, n))
        if set(columns) != set(names):
            raise SchemaError("columns %r do not match schema %r" % (sorted(columns), names))
        lengths = {len(v) for v in columns.values()}
        if len(lengths) > 1:
            raise SchemaError("ragged columns: lengths %r" % sorted(lengths))
        n_rows = lengths.pop() if lengths else 0
        return Table(schema, {n: list(columns[n]) for n in names}, n_rows)

    @property
    def column_names(self) -> list[str]:
        return [n for n, _ in self.schema]

    def kind_of(self, name: str) -> str:
        for n, k in self.schema:
            if n == name:
                return k
        raise SchemaError("unknown column %r" % name)

    def column(self, name: str) -> list:
        if name not in self.columns:
            raise SchemaError("unknown column %r" % name)
        return self.columns[name]

    def cell(self, row: int, name: str):
        return self.column(name)[row]

    def row_dict(self, row: int) -> dict:
        return {n: self.columns[n][row] for n in self.columns}

    def select_rows(self, row_ids) -> "Table":
        """New table holding the given rows in the given order."""
        row_ids = list(row_ids)
        cols = {n: [v[i] for i in row_ids] for n, v in self.columns.items()}
        return Table(self.schema, cols, len(row_ids))

    def with_column(self, name: str, kind: str, values: list) -> "Table":
        if name in self.columns:
            raise SchemaError("column %r already exists" % name)
        if len(values) != self.row_count:
            raise SchemaError("new column length %d != row_count %d" % (len(values), self.row_count))
        schema = self.schema + ((name, kind),)
        cols = dict(self.columns)
        cols[name] = list(values)
        # row alignment is preserved, so attached indexes stay valid
        return Table(schema, cols, self.row_count, dict(self.indexes))


def _parse_int(s: str):
    try:
        return int(s)
    except ValueError:
        return None


def _parse_float(s: str):
    try:
        return float(s)
    except ValueError:
        return None


def _parse_bool(s: str):
    low = s.lower()
    if low == "true":
        return True
    if low == "false":
        return False
    return None


# Inference tries each kind in order and falls back to text on any miss.
_INFERENCE_ORDER = (("int", _parse_int), ("float", _parse_float), ("bool", _parse_bool))


def infer_kind(values: list[str]) -> str:
    present = [v for v in values if v != ""]
    if not present:
        return "text"
    for kind, parse in _INFERENCE_ORDER:
        if all(parse(v) is not None for v in present):
            return kind
    return "text"


def _convert(value: str, kind: str):
    if value == "":
        return None
    if kind == "int":
        return int(value)
    if kind == "float":
        return float(value)
    if kind == "bool":
        return _parse_bool(value)
    return value


def load_csv(path) -> Table:
    """Read a UTF-8 CSV with a mandatory header row, inferring column kinds."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError("%s: empty file, header row required" % path)
        if len(set(header)) != len(header):
            raise SchemaError("%s: duplicate header names" % path)
        rows = []
        for lineno, rec in enumerate(reader, start=2):
            if len(rec) != len(header):
                raise SchemaError(
                    "%s: line %d has %d fields, expected %d" % (path, lineno, len(rec), len(header))
                )
            rows.append(rec)
    raw_cols = {name: [r[i] for r in rows] for i, name in enumerate(header)}
    schema = [(name, infer_kind(raw_cols[name])) for name in header]
    cols = {name: [_convert(v, kind) for v in raw_cols[name]] for name, kind in schema}
    return Table.from_columns(schema, cols)


def write_csv(t: Table, path) -> None:
    """Emit RFC-4180-style CSV; nulls become empty fields."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(t.column_names)
        for i in range(t.row_count):
            writer.writerow(
                ["" if t.columns[n][i] is None else render_cell(t.columns[n][i]) for n in t.column_names]
            )


def partition_by_equality(t: Table, cols: list[str]) -> list[tuple[tuple, list[int]]]:
    """Group row ids by the tuple of cell values, in first-occurrence order.

    An empty column list yields a single group with all rows.
    """
    for c in cols:
        t.column(c)  # raises on unknown column
    groups: dict[tuple, list[int]] = {}
    for i in range(t.row_count):
        key = tuple(t.columns[c][i] for c in cols)
        groups.setdefault(key, []).append(i)
    return list(groups.items())
