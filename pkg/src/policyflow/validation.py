"""Structural compliance rules R1-R8 for generated process models."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from typing import Any

from .bpmn import NodeKind, ProcessModel
from .errors import ExpressionError
from .expression import is_entity_encoded, variables
from .schema import PatientSchema
from .script import parse_script


class RuleId(str, Enum):
    R1 = "R1"  # exactly one start event, no incoming flows
    R2 = "R2"  # at least one end event
    R3 = "R3"  # tasks have exactly one incoming and one outgoing flow
    R4 = "R4"  # a gateway splits or merges, never both
    R5 = "R5"  # split gateways name exactly one default flow
    R6 = "R6"  # non-default split flows carry a parsable, entity-encoded condition
    R7 = "R7"  # no two outgoing gateway flows share a target
    R8 = "R8"  # referenced variables exist in the patient schema

    @property
    def index(self) -> int:
        return int(self.value[1:])


@dataclass(frozen=True)
class Violation:
    rule: RuleId
    subject: str
    detail: str
    data: dict[str, Any] = field(default_factory=dict, compare=True, hash=False)

    def to_dict(self) -> dict[str, Any]:
        return {"rule": self.rule.value, "subject": self.subject, "detail": self.detail, "data": self.data}


@dataclass(frozen=True)
class ValidationReport:
    violations: tuple[Violation, ...] = ()

    @property
    def passed(self) -> bool:
        return not self.violations

    def by_rule(self, rule: RuleId) -> list[Violation]:
        return [v for v in self.violations if v.rule is rule]

    def to_dict(self) -> dict[str, Any]:
        return {"passed": self.passed, "violations": [v.to_dict() for v in self.violations]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _r1(model: ProcessModel, schema: PatientSchema) -> list[Violation]:
    starts = model.nodes_of(NodeKind.START_EVENT)
    if not starts:
        return [Violation(RuleId.R1, model.process_id, "model has no start event", {"issue": "missing"})]
    out = []
    for s in starts:
        inc = model.incoming(s.id)
        if inc:
            out.append(Violation(RuleId.R1, s.id, f"start event {s.id} has incoming flows",
                                 {"issue": "incoming", "flows": inc}))
    for s in starts[1:]:
        out.append(Violation(RuleId.R1, s.id, f"surplus start event {s.id}",
                             {"issue": "surplus", "retained": starts[0].id}))
    return out


def _r2(model: ProcessModel, schema: PatientSchema) -> list[Violation]:
    if model.nodes_of(NodeKind.END_EVENT):
        return []
    return [Violation(RuleId.R2, model.process_id, "model has no end event", {"issue": "missing"})]


def _r3(model: ProcessModel, schema: PatientSchema) -> list[Violation]:
    out = []
    for t in model.tasks:
        inc, outs = model.incoming(t.id), model.outgoing(t.id)
        if len(inc) > 1:
            out.append(Violation(RuleId.R3, t.id, f"task {t.id} has {len(inc)} incoming flows",
                                 {"issue": "multiple_incoming", "flows": inc}))
        elif not inc:
            out.append(Violation(RuleId.R3, t.id, f"task {t.id} has no incoming flow", {"issue": "no_incoming"}))
        if len(outs) > 1:
            out.append(Violation(RuleId.R3, t.id, f"task {t.id} has {len(outs)} outgoing flows",
                                 {"issue": "multiple_outgoing", "flows": outs}))
        elif not outs:
            out.append(Violation(RuleId.R3, t.id, f"task {t.id} has no outgoing flow", {"issue": "no_outgoing"}))
    return out


def _r4(model: ProcessModel, schema: PatientSchema) -> list[Violation]:
    out = []
    for g in model.nodes_of(NodeKind.EXCLUSIVE_GATEWAY):
        inc, outs = model.incoming(g.id), model.outgoing(g.id)
        if len(inc) > 1 and len(outs) > 1:
            out.append(Violation(RuleId.R4, g.id, f"gateway {g.id} both merges ({len(inc)} in) "
                                 f"and splits ({len(outs)} out)", {"incoming": inc, "outgoing": outs}))
    return out


def _r5(model: ProcessModel, schema: PatientSchema) -> list[Violation]:
    out = []
    for g in model.nodes_of(NodeKind.EXCLUSIVE_GATEWAY):
        if model.is_split(g.id) and g.default_flow is None:
            out.append(Violation(RuleId.R5, g.id, f"split gateway {g.id} has no default flow",
                                 {"outgoing": model.outgoing(g.id)}))
    return out


def _r6(model: ProcessModel, schema: PatientSchema) -> list[Violation]:
    out = []
    for g in model.nodes_of(NodeKind.EXCLUSIVE_GATEWAY):
        if not model.is_split(g.id):
            continue
        for fid in model.outgoing(g.id):
            if fid == g.default_flow:
                continue
            f = model.flow(fid)
            if not f.has_condition:
                out.append(Violation(RuleId.R6, fid, f"non-default flow {fid} of {g.id} has no condition",
                                     {"issue": "missing", "gateway": g.id}))
            elif f.condition is None:
                out.append(Violation(RuleId.R6, fid, f"condition on {fid} does not parse",
                                     {"issue": "unparsable", "gateway": g.id, "text": f.condition_text}))
            elif not is_entity_encoded(f.condition_text):
                out.append(Violation(RuleId.R6, fid, f"condition on {fid} is not XML-entity encoded",
                                     {"issue": "unencoded", "gateway": g.id, "text": f.condition_text}))
    return out


def _r7(model: ProcessModel, schema: PatientSchema) -> list[Violation]:
    out = []
    for g in model.nodes_of(NodeKind.EXCLUSIVE_GATEWAY):
        by_target: dict[str, list[str]] = {}
        for fid in model.outgoing(g.id):
            by_target.setdefault(model.flow(fid).target, []).append(fid)
        for target, fids in by_target.items():
            if len(fids) > 1:
                out.append(Violation(RuleId.R7, g.id, f"gateway {g.id} has {len(fids)} flows into {target}",
                                     {"target": target, "kept": fids[0], "duplicates": fids[1:]}))
    return out


def script_targets(model: ProcessModel) -> set[str]:
    """Variables written by any script task; these are data-context names too."""
    names: set[str] = set()
    for t in model.nodes_of(NodeKind.SCRIPT_TASK):
        try:
            names.update(parse_script(t.script).targets)
        except ExpressionError:
            continue
    return names


def _r8(model: ProcessModel, schema: PatientSchema) -> list[Violation]:
    known = set(schema.names) | script_targets(model)
    out = []
    for eid in model.document_order:
        if model.has_flow(eid):
            cond = model.flow(eid).condition
            names = variables(cond) if cond is not None else []
            where = "condition on flow"
        else:
            node = model.node(eid)
            if node.kind is not NodeKind.SCRIPT_TASK:
                continue
            try:
                names = parse_script(node.script).reads()
            except ExpressionError:
                continue
            where = "script of task"
        for name in names:
            if name not in known:
                out.append(Violation(RuleId.R8, eid, f"{where} {eid} references unknown column {name}",
                                     {"variable": name}))
    return out


_CHECKS = {
    RuleId.R1: _r1, RuleId.R2: _r2, RuleId.R3: _r3, RuleId.R4: _r4,
    RuleId.R5: _r5, RuleId.R6: _r6, RuleId.R7: _r7, RuleId.R8: _r8,
}


def check_rule(model: ProcessModel, schema: PatientSchema, rule: RuleId) -> list[Violation]:
    found = _CHECKS[RuleId(rule)](model, schema)
    pos = model.position
    return sorted(found, key=lambda v: pos.get(v.subject, -1))


def validate(model: ProcessModel, schema: PatientSchema) -> ValidationReport:
    """Every violation of every rule, ordered by rule and then document order."""
    out: list[Violation] = []
    for rule in RuleId:
        out.extend(check_rule(model, schema, rule))
    return ValidationReport(tuple(out))
