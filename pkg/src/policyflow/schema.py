"""Patient-database column catalog used to ground and type-check expressions."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from decimal import Decimal
from enum import Enum
from pathlib import Path
from typing import Any, Iterable, Mapping


class ValueKind(str, Enum):
    NUMBER = "number"
    CATEGORY = "category"
    BOOLEAN = "boolean"


def kind_of(value: Any) -> ValueKind:
    """Classify a runtime value. ``bool`` is checked before numbers on purpose."""
    if isinstance(value, bool):
        return ValueKind.BOOLEAN
    if isinstance(value, (int, float)):
        return ValueKind.NUMBER
    if isinstance(value, str):
        return ValueKind.CATEGORY
    raise TypeError(f"unsupported value type: {type(value).__name__}")


def _decimals(x: float) -> int:
    exp = Decimal(repr(float(x))).normalize().as_tuple().exponent
    return max(0, -int(exp))


@dataclass(frozen=True)
class Column:
    name: str
    kind: ValueKind = ValueKind.NUMBER
    plausible_range: tuple[float, float] | None = None
    thresholds: tuple[float, ...] = ()
    grades: tuple[str, ...] = ()
    # True when ``grades`` is listed in ascending order and may be compared with <, >= etc.
    ordered: bool = False
    decimals: int | None = None

    def __post_init__(self):
        if not self.name.isidentifier():
            raise ValueError(f"column name is not an identifier: {self.name!r}")
        if self.plausible_range is not None:
            lo, hi = self.plausible_range
            if lo > hi:
                raise ValueError(f"{self.name}: empty plausible range {self.plausible_range}")
            for t in self.thresholds:
                if not lo <= t <= hi:
                    raise ValueError(f"{self.name}: threshold {t} outside plausible range")
        if self.thresholds and self.kind is not ValueKind.NUMBER:
            raise ValueError(f"{self.name}: thresholds only apply to numeric columns")

    @property
    def precision(self) -> int:
        """Number of decimal places values of this column are reported with."""
        if self.decimals is not None:
            return self.decimals
        if self.thresholds:
            return max(_decimals(t) for t in self.thresholds)
        if self.plausible_range is not None:
            return max(_decimals(b) for b in self.plausible_range)
        return 0

    def grade_rank(self, grade: str) -> int | None:
        if not self.ordered:
            return None
        try:
            return self.grades.index(grade)
        except ValueError:
            return None

    def to_dict(self) -> dict:
        d: dict[str, Any] = {"name": self.name, "kind": self.kind.value}
        if self.plausible_range is not None:
            d["range"] = list(self.plausible_range)
        if self.thresholds:
            d["thresholds"] = list(self.thresholds)
        if self.grades:
            d["grades"] = list(self.grades)
            d["grade_order"] = self.ordered
        if self.decimals is not None:
            d["decimals"] = self.decimals
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "Column":
        grades = d.get("grades") or ()
        order = d.get("grade_order", False)
        if isinstance(order, list):
            # an explicit ordering doubles as the grade set
            grades, order = order, True
        rng = d.get("range")
        return cls(
            name=d["name"],
            kind=ValueKind(d.get("kind", "number")),
            plausible_range=tuple(rng) if rng is not None else None,
            thresholds=tuple(float(t) for t in d.get("thresholds", ())),
            grades=tuple(grades),
            ordered=bool(order),
            decimals=d.get("decimals"),
        )


@dataclass(frozen=True)
class PatientSchema:
    columns: tuple[Column, ...] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "columns", tuple(self.columns))
        seen = set()
        for c in self.columns:
            if c.name in seen:
                raise ValueError(f"duplicate column: {c.name}")
            seen.add(c.name)

    @classmethod
    def of(cls, *names: str) -> "PatientSchema":
        """Shorthand for a schema of untyped numeric columns."""
        return cls(tuple(Column(n) for n in names))

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(c.name for c in self.columns)

    def __contains__(self, name: object) -> bool:
        return any(c.name == name for c in self.columns)

    def __iter__(self):
        return iter(self.columns)

    def __len__(self) -> int:
        return len(self.columns)

    def get(self, name: str) -> Column | None:
        for c in self.columns:
            if c.name == name:
                return c
        return None

    def to_json(self) -> str:
        return json.dumps([c.to_dict() for c in self.columns], indent=2)

    @classmethod
    def from_json(cls, text: str) -> "PatientSchema":
        data = json.loads(text)
        if isinstance(data, dict):
            data = data["columns"]
        return cls(tuple(Column.from_dict(d) for d in data))

    @classmethod
    def load(cls, path: str | Path) -> "PatientSchema":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json() + "\n", encoding="utf-8")

    def check_record(self, values: Mapping[str, Any]) -> None:
        """Raise SchemaMismatch unless ``values`` has exactly the schema's columns with matching kinds."""
        from .errors import SchemaMismatch

        missing = set(self.names) - set(values)
        extra = set(values) - set(self.names)
        if missing or extra:
            raise SchemaMismatch(missing, extra)
        for c in self.columns:
            v = values[c.name]
            try:
                k = kind_of(v)
            except TypeError:
                raise SchemaMismatch(detail=f"{c.name}: unsupported value {v!r}") from None
            if k is not c.kind:
                raise SchemaMismatch(detail=f"{c.name}: expected {c.kind.value}, got {k.value}")
            if c.kind is ValueKind.CATEGORY and c.grades and v not in c.grades:
                raise SchemaMismatch(detail=f"{c.name}: unknown grade {v!r}")


def schema_from_names(names: Iterable[str]) -> PatientSchema:
    return PatientSchema(tuple(Column(n) for n in names))
