"""Versioned CSV schemas for every file the CLI emits.

Each CSV starts with a ``schema`` column whose value (e.g. ``compare_oracle/1``)
names the schema of that row. :func:`check_csv` validates a file against it.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

from .errors import MetaIFError


class SchemaError(MetaIFError, ValueError):
    pass


@dataclass(frozen=True)
class Column:
    name: str
    kind: str  # int | float | str | bool
    optional: bool = False
    low: float | None = None
    high: float | None = None


def _cols(*specs) -> tuple:
    return tuple(Column(*s) for s in specs)


SCHEMAS = {
    "attribute/1": _cols(
        ("target", "str"), ("method", "str"), ("backend", "str"), ("task_id", "int"),
        ("example_index", "int", True), ("norm", "float", True, 0.0), ("runtime_seconds", "float", True, 0.0),
        ("relative_residual", "float", True, 0.0), ("retrain_seconds", "float", True, 0.0),
        ("speedup", "float", True, 0.0), ("influence_file", "str", True), ("status", "str"), ("error", "str", True),
    ),
    "compare_oracle/1": _cols(
        ("seed", "int"), ("removal", "str"), ("method", "str"), ("accuracy", "float", True, 0.0, 1.0),
        ("runtime_seconds", "float", True, 0.0), ("l2_to_oracle", "float", True, 0.0),
        ("cosine_to_oracle", "float", True, -1.0 - 1e-9, 1.0 + 1e-9), ("l2_base_to_oracle", "float", True, 0.0),
        ("status", "str"), ("error", "str", True),
    ),
    "detection/1": _cols(
        ("seed", "int"), ("ranking", "str"), ("fraction_checked", "float", False, 0.0, 1.0),
        ("n_checked", "int", False, 0.0), ("n_corrupted", "int", False, 0.0),
        ("fraction_found", "float", False, 0.0, 1.0), ("test_accuracy", "float", True, 0.0, 1.0),
        ("runtime_seconds", "float", False, 0.0), ("retrain_seconds", "float", False, 0.0),
    ),
    "effectiveness/1": _cols(
        ("seed", "int"), ("level", "str"), ("ranking", "str"), ("repeat", "int", False, 0.0),
        ("fraction_removed", "float", False, 0.0, 1.0), ("n_removed", "int", False, 0.0),
        ("test_accuracy", "float", True, 0.0, 1.0), ("retrain_seconds", "float", False, 0.0),
    ),
}

# columns whose values legitimately differ between identical runs
RUNTIME_COLUMNS = {"runtime_seconds", "retrain_seconds", "speedup"}


def header(schema: str) -> list[str]:
    return ["schema"] + [c.name for c in SCHEMAS[schema]]


def _format(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_csv(path, schema: str, rows: list[dict]) -> Path:
    if schema not in SCHEMAS:
        raise SchemaError(f"unknown schema {schema!r}")
    names = [c.name for c in SCHEMAS[schema]]
    for r in rows:
        extra = set(r) - set(names)
        if extra:
            raise SchemaError(f"row has columns not in {schema}: {sorted(extra)}")
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header(schema))
        for r in rows:
            w.writerow([schema] + [_format(r.get(n)) for n in names])
    return path


def _check_value(col: Column, text: str, where: str) -> None:
    if text == "":
        if not col.optional:
            raise SchemaError(f"{where}: required column {col.name!r} is empty")
        return
    try:
        if col.kind == "int":
            v = int(text)
        elif col.kind == "float":
            v = float(text)
        elif col.kind == "bool":
            if text not in ("true", "false"):
                raise ValueError(text)
            return
        else:
            return
    except ValueError:
        raise SchemaError(f"{where}: {col.name}={text!r} is not a valid {col.kind}") from None
    if math.isnan(v):
        raise SchemaError(f"{where}: {col.name} is NaN")
    if col.low is not None and v < col.low:
        raise SchemaError(f"{where}: {col.name}={v} below {col.low}")
    if col.high is not None and v > col.high:
        raise SchemaError(f"{where}: {col.name}={v} above {col.high}")


def check_csv(path) -> tuple[str, int]:
    """Validate an emitted CSV; returns (schema name, data row count)."""
    path = Path(path)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise SchemaError(f"{path}: empty file")
    head = rows[0]
    if not head or head[0] != "schema":
        raise SchemaError(f"{path}: first column must be 'schema'")
    if len(rows) == 1:
        for name in SCHEMAS:
            if head == header(name):
                return name, 0
        raise SchemaError(f"{path}: header matches no known schema")
    name = rows[1][0]
    if name not in SCHEMAS:
        raise SchemaError(f"{path}:2: unknown schema {name!r}")
    if head != header(name):
        raise SchemaError(f"{path}: header does not match {name}")
    cols = SCHEMAS[name]
    for line_no, row in enumerate(rows[1:], start=2):
        where = f"{path}:{line_no}"
        if len(row) != len(head):
            raise SchemaError(f"{where}: expected {len(head)} fields, got {len(row)}")
        if row[0] != name:
            raise SchemaError(f"{where}: schema {row[0]!r} differs from {name!r}")
        for col, text in zip(cols, row[1:]):
            _check_value(col, text, where)
    return name, len(rows) - 1
