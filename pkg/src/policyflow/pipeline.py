"""End-to-end batch evaluation: candidates -> repair -> augment -> execute -> KPIs -> reports."""

from __future__ import annotations

import datetime as _dt
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

from . import __version__
from .analysis import (
    AgreementReport,
    DistributionReport,
    agreement_metrics,
    agreement_table,
    classify_ambiguity,
    confusion,
    mean_agreement,
    tabulate,
)
from .bpmn import parse_bpmn, serialize_bpmn
from .cohort import CohortSpec, PatientRecord, generate as generate_cohort, load_csv
from .engine import ExecutionTrace, augment, run_cohort
from .errors import ConfigError, PolicyFlowError
from .kpi import ZERO_KPIS, KpiCoefficients, KpiVector, TaskMapping, build_mapping, count_kpis, derive
from .provider import Candidate, GenerationRequest, HttpChatBackend, ReplayBackend, generate, oracle_from_backend
from .repair import RepairStatus, repair_loop
from .schema import PatientSchema
from .validation import validate

log = logging.getLogger(__name__)


def _dump(obj: Any) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, ensure_ascii=False) + "\n"


@dataclass(frozen=True)
class PipelineConfig:
    """Batch settings; relative paths resolve against the config file's directory."""

    schema_path: Path
    kpi_coefficients_path: Path
    provider: Mapping[str, Any]
    output_dir: Path
    cohort: Mapping[str, Any] = field(default_factory=dict)
    k: int = 5
    M: int = 100
    max_repair_iterations: int = 5
    ground_truth_path: Path | None = None
    narrative_path: Path | None = None
    parallelism: int = 4

    def __post_init__(self):
        if self.k < 1 or self.M < 1:
            raise ConfigError("k and M must both be >= 1")
        if self.max_repair_iterations < 1:
            raise ConfigError("max_repair_iterations must be >= 1")

    @classmethod
    def from_dict(cls, d: Mapping[str, Any], base: Path = Path(".")) -> "PipelineConfig":
        def path(key: str, required: bool = True) -> Path | None:
            v = d.get(key)
            if v is None:
                if required:
                    raise ConfigError(f"config lacks {key!r}")
                return None
            p = Path(v)
            return p if p.is_absolute() else base / p

        provider = dict(d.get("provider") or {})
        if provider.get("type", "replay") == "replay":
            if "directory" not in provider:
                raise ConfigError("replay provider needs a 'directory'")
            p = Path(provider["directory"])
            provider["directory"] = str(p if p.is_absolute() else base / p)
        cohort = dict(d.get("cohort") or {})
        if "csv" in cohort:
            p = Path(cohort["csv"])
            cohort["csv"] = str(p if p.is_absolute() else base / p)
        try:
            return cls(
                schema_path=path("schema"),
                kpi_coefficients_path=path("kpi_coefficients"),
                provider=provider,
                output_dir=path("output_dir"),
                cohort=cohort,
                k=int(d.get("k", 5)),
                M=int(d.get("M", 100)),
                max_repair_iterations=int(d.get("max_repair_iterations", 5)),
                ground_truth_path=path("ground_truth", required=False),
                narrative_path=path("narrative", required=False),
                parallelism=int(d.get("parallelism", 4)),
            )
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad config value: {exc}") from None

    @classmethod
    def load(cls, path: str | Path) -> "PipelineConfig":
        path = Path(path)
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from None
        return cls.from_dict(data, path.resolve().parent)

    def check_paths(self) -> None:
        needed = {"schema": self.schema_path, "kpi_coefficients": self.kpi_coefficients_path}
        if self.ground_truth_path is not None:
            needed["ground_truth"] = self.ground_truth_path
        if self.narrative_path is not None:
            needed["narrative"] = self.narrative_path
        if "csv" in self.cohort:
            needed["cohort.csv"] = Path(self.cohort["csv"])
        if self.provider.get("type", "replay") == "replay":
            needed["provider.directory"] = Path(self.provider["directory"])
        for key, p in needed.items():
            if not p.exists():
                raise ConfigError(f"{key}: path does not exist: {p}")


@dataclass(frozen=True)
class CandidateResult:
    slot: int
    status: str  # "ok" or a failure label
    kpis: KpiVector
    raw_xml: str | None = None
    repaired_xml: str | None = None
    actions: tuple[dict, ...] = ()
    repair: Mapping[str, Any] | None = None
    mapping: TaskMapping | None = None
    decisions: tuple[bool | None, ...] | None = None
    error: str | None = None
    record_errors: int = 0

    @property
    def ok(self) -> bool:
        return self.status == "ok"


def decisions_of(traces: Sequence[Any], task_id: str) -> tuple[bool | None, ...]:
    """Per-patient eligibility: does the trace visit the HC-mapped task (None when the record failed)."""
    return tuple(t.visits(task_id) if isinstance(t, ExecutionTrace) else None for t in traces)


def evaluate_candidate(
    cand: Candidate,
    schema: PatientSchema,
    cohort: Sequence[PatientRecord],
    coeff: KpiCoefficients,
    oracle,
    k: int,
    max_iterations: int,
) -> CandidateResult:
    """Never raises for candidate-level problems; failures become all-zero KPI results."""
    if not cand.ok:
        return CandidateResult(cand.slot, "provider_failure", ZERO_KPIS, error=str(cand.error))
    raw = cand.raw_xml
    try:
        model = parse_bpmn(raw)
    except PolicyFlowError as exc:
        return CandidateResult(cand.slot, "parse_failure", ZERO_KPIS, raw, error=f"{type(exc).__name__}: {exc}")
    outcome = None
    try:
        outcome = repair_loop(model, schema, max_iterations)
        actions = tuple(a.to_dict() for a in outcome.actions)
        summary = {"status": outcome.status.value, "iterations": outcome.iterations,
                   "failures": list(outcome.failures), "report": outcome.report.to_dict()}
        repaired_xml = serialize_bpmn(outcome.model)
        if outcome.status is RepairStatus.GENERATION_FAILURE:
            return CandidateResult(cand.slot, "generation_failure", ZERO_KPIS, raw, repaired_xml, actions, summary,
                                   error="violations remain after the repair budget")
        executable = augment(outcome.model, schema)
        traces = run_cohort(executable, cohort, schema)
        mapping = build_mapping(executable, oracle, k)
        kpis = derive(*count_kpis(traces, mapping), coeff)
        errors = sum(1 for t in traces if not isinstance(t, ExecutionTrace))
        return CandidateResult(cand.slot, "ok", kpis, raw, repaired_xml, actions, summary, mapping,
                               decisions_of(traces, mapping.hc_task), record_errors=errors)
    except Exception as exc:  # crash isolation: one candidate never aborts the batch
        log.warning("candidate %d failed: %s", cand.slot, exc)
        repaired = serialize_bpmn(outcome.model) if outcome is not None else None
        return CandidateResult(cand.slot, "execution_failure", ZERO_KPIS, raw, repaired,
                               error=f"{type(exc).__name__}: {exc}")


def make_backend(provider: Mapping[str, Any]):
    kind = provider.get("type", "replay")
    if kind == "replay":
        return ReplayBackend(provider["directory"], provider.get("backend_id"))
    if kind == "http":
        opts = {k: provider[k] for k in ("max_retries", "backoff", "timeout", "log_path") if k in provider}
        if "endpoint" in provider and "model" in provider:
            key = os.environ.get(provider.get("api_key_env", "POLICYFLOW_API_KEY"))
            return HttpChatBackend(provider["endpoint"], provider["model"], key, **opts)
        return HttpChatBackend.from_env(**opts)
    raise ConfigError(f"unknown provider type {kind!r}")


def build_cohort(cfg: PipelineConfig, schema: PatientSchema) -> list[PatientRecord]:
    if "csv" in cfg.cohort:
        return load_csv(cfg.cohort["csv"], schema)
    spec = CohortSpec(schema, int(cfg.cohort.get("size", 1000)), int(cfg.cohort.get("seed", 0)),
                      dict(cfg.cohort.get("boundary_epsilon", {})))
    return generate_cohort(spec)


@dataclass(frozen=True)
class PipelineRun:
    directory: Path
    results: tuple[CandidateResult, ...]
    distribution: DistributionReport
    agreement: dict[str, Any] | None


def run_pipeline(cfg: PipelineConfig, run_name: str | None = None) -> PipelineRun:
    """Execute the whole batch and write every artifact under a fresh run directory."""
    started = _dt.datetime.now(_dt.timezone.utc)
    cfg.check_paths()
    schema = PatientSchema.load(cfg.schema_path)
    coeff = KpiCoefficients.load(cfg.kpi_coefficients_path)
    cohort = build_cohort(cfg, schema)
    backend = make_backend(cfg.provider)
    oracle = oracle_from_backend(backend)
    narrative = cfg.narrative_path.read_text(encoding="utf-8") if cfg.narrative_path else ""
    seed = cfg.provider.get("seed")
    decoding = {"seed": seed} if seed is not None else {}
    gt = _ground_truth(cfg, schema, cohort, oracle) if cfg.ground_truth_path else None

    candidates = generate(GenerationRequest(narrative, schema, cfg.M, decoding), backend, cfg.parallelism)

    def work(c: Candidate) -> CandidateResult:
        return evaluate_candidate(c, schema, cohort, coeff, oracle, cfg.k, cfg.max_repair_iterations)

    with ThreadPoolExecutor(max_workers=max(1, cfg.parallelism)) as pool:
        results = tuple(pool.map(work, candidates))

    run_dir = cfg.output_dir / (run_name or "run-" + started.strftime("%Y%m%dT%H%M%S%fZ"))
    if run_dir.exists() and any(run_dir.iterdir()):
        raise ConfigError(f"run directory already exists and is not empty: {run_dir}")
    run_dir.mkdir(parents=True, exist_ok=True)
    cdir = run_dir / "candidates"
    width = max(3, len(str(cfg.M)))
    for r in results:
        d = cdir / f"{r.slot + 1:0{width}d}"
        d.mkdir(parents=True)
        if r.raw_xml is not None:
            (d / "raw.bpmn").write_text(r.raw_xml, encoding="utf-8")
        if r.repaired_xml is not None:
            (d / "repaired.bpmn").write_text(r.repaired_xml, encoding="utf-8")
        (d / "actions.json").write_text(_dump({"actions": list(r.actions), "repair": r.repair}), encoding="utf-8")
        (d / "kpi.json").write_text(_dump({
            "slot": r.slot, "status": r.status, "error": r.error, "record_errors": r.record_errors,
            "kpis": r.kpis.to_dict(), "mapping": r.mapping.to_dict() if r.mapping else None,
        }), encoding="utf-8")

    dist = tabulate([r.kpis for r in results])
    verdict = classify_ambiguity(dist)
    (run_dir / "distribution.json").write_text(
        _dump({**dist.to_dict(), "ambiguity": verdict.to_dict(),
               "statuses": dict(sorted(_count(r.status for r in results).items()))}), encoding="utf-8")

    agreement = None
    rows: list[tuple[str, AgreementReport]] = []
    if gt is not None:
        gt_decisions, gt_kpis = gt
        per = {}
        for r in results:
            name = f"candidate {r.slot + 1:0{width}d}"
            if not r.ok:
                per[name] = {"status": r.status}
                continue
            pairs = [(g, p) for g, p in zip(gt_decisions, r.decisions) if g is not None and p is not None]
            incomplete = len(pairs) < len(gt_decisions)
            if not pairs:
                per[name] = {"status": "no_comparable_records"}
                continue
            rep = agreement_metrics(confusion([g for g, _ in pairs], [p for _, p in pairs]), incomplete)
            per[name] = {"status": "ok", **rep.to_dict()}
            rows.append((name, rep))
        agreement = {"ground_truth_kpis": gt_kpis.to_dict(), "candidates": per,
                     "mean": mean_agreement([r for _, r in rows]), "compared": len(rows)}
        (run_dir / "agreement.json").write_text(_dump(agreement), encoding="utf-8")

    (run_dir / "report.txt").write_text(render_report(dist.to_dict() | {"ambiguity": verdict.to_dict()}, agreement),
                                        encoding="utf-8")
    finished = _dt.datetime.now(_dt.timezone.utc)
    (run_dir / "metadata.json").write_text(_dump({
        "started": started.isoformat(), "finished": finished.isoformat(), "version": __version__,
        "config": {"schema": str(cfg.schema_path), "kpi_coefficients": str(cfg.kpi_coefficients_path),
                   "k": cfg.k, "M": cfg.M, "max_repair_iterations": cfg.max_repair_iterations,
                   "provider": dict(cfg.provider), "cohort": dict(cfg.cohort)},
    }), encoding="utf-8")
    return PipelineRun(run_dir, results, dist, agreement)


def _count(items) -> dict[str, int]:
    out: dict[str, int] = {}
    for i in items:
        out[i] = out.get(i, 0) + 1
    return out


def _ground_truth(cfg: PipelineConfig, schema: PatientSchema, cohort, oracle) -> tuple[tuple, KpiVector]:
    model = parse_bpmn(cfg.ground_truth_path.read_text(encoding="utf-8"))
    report = validate(model, schema)
    if not report.passed:
        raise ConfigError(f"ground-truth model is not compliant: {[v.detail for v in report.violations]}")
    executable = augment(model, schema)
    traces = run_cohort(executable, cohort, schema)
    mapping = build_mapping(executable, oracle, cfg.k)
    coeff = KpiCoefficients.load(cfg.kpi_coefficients_path)
    return decisions_of(traces, mapping.hc_task), derive(*count_kpis(traces, mapping), coeff)


def render_report(distribution: Mapping[str, Any], agreement: Mapping[str, Any] | None, top: int = 5) -> str:
    """Top-N KPI combinations with an entropy header, then the agreement table if present."""
    dist = DistributionReport.from_dict(distribution)
    parts = ["KPI combinations", dist.to_table(top)]
    amb = distribution.get("ambiguity")
    if amb:
        parts.append(f"ambiguity: {amb['class']} (dominant {amb['dominant_frequency'] * 100:.1f}%, "
                     f"failures {amb['failure_frequency'] * 100:.1f}%)\n")
    if agreement:
        rows = [(name, AgreementReport.from_dict(d)) for name, d in sorted(agreement["candidates"].items())
                if d.get("status") == "ok"]
        parts.append("Agreement with ground truth")
        parts.append(agreement_table(rows))
        mean = agreement["mean"]
        parts.append("mean: " + ", ".join(
            f"{k}={'n/a' if v is None else f'{v:.4f}'}" for k, v in sorted(mean.items())) + "\n")
    return "\n".join(parts)


def load_run(run_dir: str | Path) -> tuple[dict, dict | None]:
    run_dir = Path(run_dir)
    dist_path = run_dir / "distribution.json"
    if not run_dir.is_dir() or not dist_path.exists():
        raise ConfigError(f"not a pipeline run directory: {run_dir}")
    dist = json.loads(dist_path.read_text(encoding="utf-8"))
    agr_path = run_dir / "agreement.json"
    agreement = json.loads(agr_path.read_text(encoding="utf-8")) if agr_path.exists() else None
    return dist, agreement
