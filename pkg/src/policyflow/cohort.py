"""Synthetic patient cohorts with mandated boundary records, plus CSV I/O.

Random sampling uses :class:`random.Random` seeded with ``CohortSpec.seed``; the
draw order is: boundary records (columns in schema order, thresholds in
declared order, values t, t-eps, t+eps; other columns filled in schema
order), then one record per category grade not yet covered, then uniform
fill records, then a single shuffle. Same spec and seed gives the same cohort.
"""

from __future__ import annotations

import csv
import random
import re
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

from .errors import HeaderMismatch, RowError, SchemaMismatch, SpecError
from .expression import format_number
from .schema import Column, PatientSchema, ValueKind

ID_COLUMN = "patient_id"
_NUMBER_RE = re.compile(r"[+-]?(\d+(\.\d*)?|\.\d+)([eE][+-]?\d+)?\Z")


@dataclass(frozen=True)
class PatientRecord:
    id: str
    values: Mapping[str, Any]

    def __post_init__(self):
        object.__setattr__(self, "values", dict(self.values))

    def __getitem__(self, name: str) -> Any:
        return self.values[name]

    def __hash__(self) -> int:
        return hash((self.id, tuple(sorted(self.values.items()))))


@dataclass(frozen=True)
class CohortSpec:
    schema: PatientSchema
    size: int = 1000
    seed: int = 0
    boundary_epsilon: Mapping[str, float] = field(default_factory=dict)

    def epsilon(self, column: Column) -> float:
        if column.name in self.boundary_epsilon:
            eps = float(self.boundary_epsilon[column.name])
            if eps <= 0:
                raise SpecError(f"{column.name}: boundary epsilon must be positive")
            return eps
        return 10.0 ** -column.precision

    @property
    def mandated(self) -> int:
        return 3 * sum(len(c.thresholds) for c in self.schema.columns if c.kind is ValueKind.NUMBER)


def _round(x: float, places: int) -> float:
    q = Decimal(1).scaleb(-places)
    return float(Decimal(repr(x)).quantize(q, rounding=ROUND_HALF_UP))


def _sample(col: Column, rng: random.Random) -> Any:
    if col.kind is ValueKind.BOOLEAN:
        return rng.random() < 0.5
    if col.kind is ValueKind.CATEGORY:
        if not col.grades:
            raise SpecError(f"{col.name}: category columns need declared grades")
        return col.grades[rng.randrange(len(col.grades))]
    lo, hi = col.plausible_range if col.plausible_range is not None else (0.0, 1.0)
    return _round(lo + (hi - lo) * rng.random(), col.precision)


def generate(spec: CohortSpec) -> list[PatientRecord]:
    """Threshold-stratified synthetic cohort; deterministic in ``spec``."""
    schema = spec.schema
    if spec.size < spec.mandated:
        raise SpecError(f"size {spec.size} is smaller than the {spec.mandated} mandated boundary records")
    rng = random.Random(spec.seed)

    def filled(fixed: Mapping[str, Any]) -> dict[str, Any]:
        return {c.name: fixed[c.name] if c.name in fixed else _sample(c, rng) for c in schema.columns}

    rows: list[dict[str, Any]] = []
    for col in schema.columns:
        if col.kind is not ValueKind.NUMBER:
            continue
        eps = spec.epsilon(col)
        places = max(col.precision, -Decimal(repr(eps)).normalize().as_tuple().exponent, 0)
        for t in col.thresholds:
            for value in (t, t - eps, t + eps):
                rows.append(filled({col.name: _round(value, places)}))

    for col in schema.columns:
        if col.kind is not ValueKind.CATEGORY:
            continue
        present = {r[col.name] for r in rows}
        for grade in col.grades:
            if grade not in present and len(rows) < spec.size:
                rows.append(filled({col.name: grade}))
                present.add(grade)

    while len(rows) < spec.size:
        rows.append(filled({}))
    rng.shuffle(rows)
    width = max(4, len(str(spec.size)))
    return [PatientRecord(f"P{i + 1:0{width}d}", r) for i, r in enumerate(rows)]


def boundary_values(column: Column, epsilon: float) -> list[tuple[float, float, float]]:
    places = max(column.precision, -Decimal(repr(epsilon)).normalize().as_tuple().exponent, 0)
    return [(_round(t - epsilon, places), t, _round(t + epsilon, places)) for t in column.thresholds]


# --- CSV --------------------------------------------------------------------


def _format(value: Any) -> str:
    if isinstance(value, bool):
        return "True" if value else "False"
    if isinstance(value, (int, float)):
        return format_number(value)
    return str(value)


def _parse(col: Column, text: str, line: int) -> Any:
    if col.kind is ValueKind.NUMBER:
        s = text.strip()
        if not _NUMBER_RE.match(s):
            raise RowError(line, col.name, f"not a number: {text!r}")
        return float(s)
    if col.kind is ValueKind.BOOLEAN:
        s = text.strip().lower()
        if s in ("true", "1"):
            return True
        if s in ("false", "0"):
            return False
        raise RowError(line, col.name, f"not a boolean: {text!r}")
    if col.grades and text not in col.grades:
        raise RowError(line, col.name, f"unknown grade {text!r}")
    return text


def save_csv(cohort: Sequence[PatientRecord], path: str | Path, schema: PatientSchema | None = None) -> None:
    names = list(schema.names) if schema is not None else (list(cohort[0].values) if cohort else [])
    with open(path, "w", newline="", encoding="utf-8") as fp:
        w = csv.writer(fp, lineterminator="\n")
        w.writerow([ID_COLUMN, *names])
        for rec in cohort:
            w.writerow([rec.id, *(_format(rec.values[n]) for n in names)])


def load_csv(path: str | Path, schema: PatientSchema) -> list[PatientRecord]:
    """Read a cohort; the header must hold exactly the schema columns (plus an optional patient_id)."""
    with open(path, newline="", encoding="utf-8") as fp:
        reader = csv.reader(fp)
        try:
            header = next(reader)
        except StopIteration:
            raise HeaderMismatch("empty CSV file") from None
        cols = [h for h in header if h != ID_COLUMN]
        if sorted(cols) != sorted(schema.names) or len(cols) != len(set(cols)):
            missing = set(schema.names) - set(cols)
            extra = set(cols) - set(schema.names)
            raise HeaderMismatch(f"header does not match schema: missing {sorted(missing)}, unexpected {sorted(extra)}")
        has_id = ID_COLUMN in header
        out = []
        for n, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise RowError(n, "*", f"expected {len(header)} fields, got {len(row)}")
            cells = dict(zip(header, row))
            values = {c.name: _parse(c, cells[c.name], n) for c in schema.columns}
            rid = cells[ID_COLUMN] if has_id else f"P{len(out) + 1:04d}"
            out.append(PatientRecord(rid, values))
    return out


def check_cohort(cohort: Iterable[PatientRecord], schema: PatientSchema) -> None:
    for rec in cohort:
        try:
            schema.check_record(rec.values)
        except SchemaMismatch as exc:
            raise SchemaMismatch(detail=f"record {rec.id}: {exc}") from exc
