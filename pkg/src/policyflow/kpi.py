"""KPI definitions, majority-vote KPI-to-task mapping, counting and derivation."""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Sequence

from .bpmn import FlowNode, ProcessModel
from .errors import ConfigError, OracleError
from .schema import PatientSchema


class KpiId(str, Enum):
    NC = "NC"
    HC = "HC"
    RU = "RU"
    HI = "HI"
    CS = "CS"

    @property
    def derived_from_hc(self) -> bool:
        return self in (KpiId.RU, KpiId.HI, KpiId.CS)

    @property
    def counted_kpi(self) -> "KpiId":
        """The directly counted KPI whose task this KPI shares."""
        return KpiId.HC if self.derived_from_hc else self


KPI_DEFINITIONS = {
    KpiId.NC: "Notification Count: number of patients who receive a notification letter about the program",
    KpiId.HC: "Health Guidance Count: number of patients who accept and receive health guidance",
    KpiId.RU: "Guidance Resource Utilization: share of guidance capacity used by guided patients",
    KpiId.HI: "Health Improvement Rate: number of guided patients expected to improve",
    KpiId.CS: "Medical Cost Savings: dialysis-prevention savings from guided patients",
}


def _half_up(x: Decimal, places: int = 0) -> Decimal:
    return x.quantize(Decimal(1).scaleb(-places), rounding=ROUND_HALF_UP)


@dataclass(frozen=True)
class KpiCoefficients:
    guidance_capacity: float
    improvement_rate: float
    cost_per_guided: float  # yen per guided patient
    fitted: bool = False

    def __post_init__(self):
        if self.guidance_capacity <= 0 or self.cost_per_guided <= 0:
            raise ConfigError("KPI coefficients must be strictly positive")
        if not 0 < self.improvement_rate <= 1:
            raise ConfigError("improvement_rate must lie in (0, 1]")

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "KpiCoefficients":
        try:
            return cls(float(d["capacity"]), float(d["improvement_rate"]), float(d["cost_per_guided_yen"]),
                       bool(d.get("fitted", False)))
        except KeyError as exc:
            raise ConfigError(f"KPI config lacks {exc.args[0]!r}") from None

    def to_dict(self) -> dict[str, Any]:
        return {"capacity": self.guidance_capacity, "improvement_rate": self.improvement_rate,
                "cost_per_guided_yen": self.cost_per_guided, "fitted": self.fitted}

    @classmethod
    def load(cls, path: str | Path) -> "KpiCoefficients":
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"KPI coefficients file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"KPI coefficients file is not JSON: {exc}") from None
        return cls.from_dict(data)


def default_coefficients() -> KpiCoefficients:
    """Coefficients fitted so that HC=88 reproduces the City-1 reference KPI tuple (NC=HC=88, RU=17.6%, HI=53, CS=249.7M yen)."""
    text = resources.files("policyflow.data").joinpath("kpi_city1_fitted.json").read_text(encoding="utf-8")
    return KpiCoefficients.from_dict(json.loads(text))


@dataclass(frozen=True)
class KpiVector:
    nc: int
    hc: int
    ru: float  # percent of capacity
    hi: int
    cs: float  # yen

    @property
    def ru_display(self) -> float:
        return float(_half_up(Decimal(repr(self.ru)), 1))

    @property
    def cs_millions(self) -> float:
        return float(_half_up(Decimal(repr(self.cs)) / Decimal(1_000_000), 1))

    @property
    def is_zero(self) -> bool:
        return self.nc == 0 and self.hc == 0 and self.hi == 0 and self.ru == 0 and self.cs == 0

    def to_dict(self) -> dict[str, Any]:
        return {
            "raw": {"nc": self.nc, "hc": self.hc, "ru": self.ru, "hi": self.hi, "cs": self.cs},
            "display": {"NC": self.nc, "HC": self.hc, "RU": f"{self.ru_display:.1f}%", "HI": self.hi,
                        "CS": f"¥{self.cs_millions:.1f}M"},
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "KpiVector":
        raw = d.get("raw", d)
        return cls(int(raw["nc"]), int(raw["hc"]), float(raw["ru"]), int(raw["hi"]), float(raw["cs"]))

    def __str__(self) -> str:
        return (f"NC={self.nc}, HC={self.hc}, RU={self.ru_display:.1f}%, HI={self.hi}, "
                f"CS=¥{self.cs_millions:.1f}M")


ZERO_KPIS = KpiVector(0, 0, 0.0, 0, 0.0)


def derive(nc: int, hc: int, coeff: KpiCoefficients) -> KpiVector:
    """RU, HI and CS all scale from HC; no capacity clipping is applied."""
    hc_d = Decimal(hc)
    ru = hc_d * 100 / Decimal(repr(coeff.guidance_capacity))
    hi = int(_half_up(hc_d * Decimal(repr(coeff.improvement_rate))))
    cs = hc_d * Decimal(repr(coeff.cost_per_guided))
    return KpiVector(int(nc), int(hc), float(ru), hi, float(cs))


# --- mapping ----------------------------------------------------------------

MappingOracle = Callable[[str, Sequence[FlowNode]], str]


@dataclass(frozen=True)
class Vote:
    repetition: int
    task_id: str
    source: str = "oracle"


@dataclass(frozen=True)
class TaskMapping:
    nc_task: str
    hc_task: str
    votes: Mapping[str, tuple[Vote, ...]] = field(default_factory=dict, compare=False)

    def task_for(self, kpi: KpiId) -> str:
        return self.nc_task if kpi.counted_kpi is KpiId.NC else self.hc_task

    def to_dict(self) -> dict[str, Any]:
        return {
            "NC": self.nc_task,
            "HC": self.hc_task,
            "votes": {k: [[v.repetition, v.task_id, v.source] for v in vs] for k, vs in sorted(self.votes.items())},
        }


def majority(votes: Sequence[str], order: Sequence[str]) -> str:
    """Plurality winner; ties go to the task earliest in document order."""
    counts = Counter(votes)
    top = max(counts.values())
    rank = {tid: i for i, tid in enumerate(order)}
    return min((t for t, c in counts.items() if c == top), key=lambda t: rank.get(t, len(rank)))


def collect_votes(kpi: KpiId, model: ProcessModel, oracle: MappingOracle, k: int = 5) -> tuple[Vote, ...]:
    if k < 1:
        raise ValueError("k must be >= 1")
    tasks = model.tasks
    if not tasks:
        raise OracleError(0, "model has no tasks")
    ids = {t.id for t in tasks}
    text = KPI_DEFINITIONS[kpi.counted_kpi]
    source = getattr(oracle, "backend_id", getattr(oracle, "__name__", type(oracle).__name__))
    votes = []
    for rep in range(k):
        try:
            choice = oracle(text, tasks)
        except OracleError:
            raise
        except Exception as exc:
            raise OracleError(rep, str(exc)) from exc
        if choice not in ids:
            raise OracleError(rep, f"returned {choice!r}, which is not a task of the model")
        votes.append(Vote(rep, choice, str(source)))
    return tuple(votes)


def map_kpi(kpi: KpiId, model: ProcessModel, oracle: MappingOracle, k: int = 5) -> str:
    votes = collect_votes(kpi, model, oracle, k)
    return majority([v.task_id for v in votes], [t.id for t in model.tasks])


def build_mapping(model: ProcessModel, oracle: MappingOracle, k: int = 5) -> TaskMapping:
    order = [t.id for t in model.tasks]
    nc_votes = collect_votes(KpiId.NC, model, oracle, k)
    hc_votes = collect_votes(KpiId.HC, model, oracle, k)
    return TaskMapping(
        majority([v.task_id for v in nc_votes], order),
        majority([v.task_id for v in hc_votes], order),
        {"NC": nc_votes, "HC": hc_votes},
    )


def count_kpis(traces: Iterable[Any], mapping: TaskMapping) -> tuple[int, int]:
    """Patients (not visits) reaching the NC and HC tasks; per-record errors are skipped."""
    nc = hc = 0
    for t in traces:
        steps = getattr(t, "steps", None)
        if steps is None:
            continue
        visited = {s.node_id for s in steps}
        nc += mapping.nc_task in visited
        hc += mapping.hc_task in visited
    return nc, hc


def evaluate_model(
    model: ProcessModel,
    cohort: Sequence[Any],
    schema: PatientSchema,
    oracle: MappingOracle,
    k: int,
    coeff: KpiCoefficients,
) -> KpiVector:
    from .engine import run_cohort

    traces = run_cohort(model, cohort, schema)
    mapping = build_mapping(model, oracle, k)
    return derive(*count_kpis(traces, mapping), coeff)
