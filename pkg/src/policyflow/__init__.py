"""Validation, repair, execution and statistical evaluation of data-aware BPMN policy models."""

from __future__ import annotations

__version__ = "0.1.0"

from .analysis import (
    AgreementReport,
    AmbiguityClass,
    ConfusionMatrix,
    DistributionReport,
    KpiCombination,
    agreement_metrics,
    classify_ambiguity,
    confusion,
    normalized_entropy,
    perplexity,
    tabulate,
)
from .bpmn import FlowNode, NodeKind, ProcessModel, SequenceFlow, parse_bpmn, serialize_bpmn
from .cohort import CohortSpec, PatientRecord, generate as generate_cohort, load_csv, save_csv
from .engine import DataContext, ExecutionTrace, augment, run_cohort, run_instance
from .expression import evaluate, normalize, parse_expression, resolve_scope, tokenize
from .kpi import KpiCoefficients, KpiId, KpiVector, build_mapping, default_coefficients, derive, map_kpi
from .repair import RepairOutcome, RepairStatus, repair_loop
from .schema import Column, PatientSchema, ValueKind
from .validation import RuleId, ValidationReport, Violation, validate

__all__ = [
    "__version__",
    "AgreementReport",
    "AmbiguityClass",
    "ConfusionMatrix",
    "DistributionReport",
    "KpiCombination",
    "agreement_metrics",
    "classify_ambiguity",
    "confusion",
    "normalized_entropy",
    "perplexity",
    "tabulate",
    "FlowNode",
    "NodeKind",
    "ProcessModel",
    "SequenceFlow",
    "parse_bpmn",
    "serialize_bpmn",
    "CohortSpec",
    "PatientRecord",
    "generate_cohort",
    "load_csv",
    "save_csv",
    "DataContext",
    "ExecutionTrace",
    "augment",
    "run_cohort",
    "run_instance",
    "evaluate",
    "normalize",
    "parse_expression",
    "resolve_scope",
    "tokenize",
    "KpiCoefficients",
    "KpiId",
    "KpiVector",
    "build_mapping",
    "default_coefficients",
    "derive",
    "map_kpi",
    "RepairOutcome",
    "RepairStatus",
    "repair_loop",
    "Column",
    "PatientSchema",
    "ValueKind",
    "RuleId",
    "ValidationReport",
    "Violation",
    "validate",
]
