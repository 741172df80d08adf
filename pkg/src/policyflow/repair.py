"""Targeted repairs for R1-R8 violations and the bounded validate-and-repair loop."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, replace
from enum import Enum
from typing import Any, Callable, Iterable

from .bpmn import FlowNode, NodeKind, ProcessModel, SequenceFlow
from .errors import ExpressionError, IrreparableViolation
from .expression import (
    count_conjuncts,
    decode_entities,
    drop_conjunct,
    encode_entities,
    generate_expression_text,
    parse_expression,
    substitute,
    variables,
)
from .grounding import ground_criterion
from .schema import PatientSchema
from .script import Assign, ScriptProgram, parse_script, render_script
from .validation import RuleId, Violation, check_rule, validate, ValidationReport

log = logging.getLogger(__name__)

Matcher = Callable[[str, list, PatientSchema], "tuple[frozenset[str], int] | None"]

DEFAULT_MAX_ITERATIONS = 5
# deterministic-matcher tiers accepted as a confident R8 substitution
CONFIDENT_TIER = 2
_UNPARSABLE_CONJUNCTS = 10**6


class RepairStatus(str, Enum):
    REPAIRED = "Repaired"
    GENERATION_FAILURE = "GenerationFailure"


@dataclass(frozen=True)
class RepairAction:
    rule: RuleId
    description: str
    before: tuple[str, ...] = ()
    after: tuple[str, ...] = ()
    inserted: tuple[str, ...] = ()
    removed: tuple[str, ...] = ()
    warning: str | None = None

    def to_dict(self) -> dict[str, Any]:
        d = {
            "rule": self.rule.value,
            "description": self.description,
            "before": list(self.before),
            "after": list(self.after),
            "inserted": list(self.inserted),
            "removed": list(self.removed),
        }
        if self.warning:
            d["warning"] = self.warning
        return d


@dataclass(frozen=True)
class RepairOutcome:
    model: ProcessModel
    actions: tuple[RepairAction, ...]
    iterations: int
    status: RepairStatus
    report: ValidationReport
    failures: tuple[str, ...] = ()

    @property
    def repaired(self) -> bool:
        return self.status is RepairStatus.REPAIRED

    def actions_json(self) -> str:
        return json.dumps(
            {
                "status": self.status.value,
                "iterations": self.iterations,
                "actions": [a.to_dict() for a in self.actions],
                "failures": list(self.failures),
                "remaining": [v.to_dict() for v in self.report.violations],
            },
            indent=2,
            sort_keys=True,
        )


class _Draft:
    """Mutable working copy of a model; frozen back into a ProcessModel when done."""

    def __init__(self, model: ProcessModel, reserved: Iterable[str] = ()):
        self.process_id = model.process_id
        self.name = model.name
        self.nodes: dict[str, FlowNode] = {n.id: n for n in model.nodes}
        self.flows: dict[str, SequenceFlow] = {f.id: f for f in model.flows}
        self.order: list[str] = list(model.document_order)
        self.original_ids = set(model.document_order) | set(reserved)
        self.inserted: list[str] = []
        self.removed: list[str] = []

    def fresh(self, prefix: str) -> str:
        i = 1
        while f"{prefix}_{i}" in self.nodes or f"{prefix}_{i}" in self.flows or f"{prefix}_{i}" in self.original_ids:
            i += 1
        return f"{prefix}_{i}"

    def _place(self, eid: str, before: str | None = None, after: str | None = None) -> None:
        if before is not None and before in self.order:
            self.order.insert(self.order.index(before), eid)
        elif after is not None and after in self.order:
            self.order.insert(self.order.index(after) + 1, eid)
        else:
            self.order.append(eid)
        self.inserted.append(eid)

    def add_node(self, kind: NodeKind, prefix: str, name: str = "", **place) -> str:
        nid = self.fresh(prefix)
        self.nodes[nid] = FlowNode(nid, kind, name)
        self._place(nid, **place)
        return nid

    def add_flow(self, source: str, target: str, condition_text: str | None = None) -> str:
        fid = self.fresh("Flow_repair")
        self.flows[fid] = SequenceFlow(fid, source, target, condition_text)
        self._place(fid)
        return fid

    def incoming(self, nid: str) -> list[str]:
        return [fid for fid in self.order if fid in self.flows and self.flows[fid].target == nid]

    def outgoing(self, nid: str) -> list[str]:
        return [fid for fid in self.order if fid in self.flows and self.flows[fid].source == nid]

    def set_flow(self, fid: str, **changes) -> None:
        self.flows[fid] = replace(self.flows[fid], **changes)

    def resource(self, fid: str, source: str) -> None:
        old = self.flows[fid].source
        node = self.nodes[old]
        if node.default_flow == fid:
            self.nodes[old] = replace(node, default_flow=None)
            dst = self.nodes[source]
            if dst.kind is NodeKind.EXCLUSIVE_GATEWAY:
                self.nodes[source] = replace(dst, default_flow=fid)
        self.set_flow(fid, source=source)

    def remove_flow(self, fid: str) -> None:
        f = self.flows.pop(fid)
        src = self.nodes.get(f.source)
        if src is not None and src.default_flow == fid:
            self.nodes[f.source] = replace(src, default_flow=None)
        self.order.remove(fid)
        self.removed.append(fid)

    def remove_node(self, nid: str) -> None:
        for fid in self.incoming(nid) + self.outgoing(nid):
            self.remove_flow(fid)
        del self.nodes[nid]
        self.order.remove(nid)
        self.removed.append(nid)

    def freeze(self) -> ProcessModel:
        return ProcessModel(self.process_id, tuple(self.nodes.values()), tuple(self.flows.values()),
                            tuple(self.order), self.name)


def _first_end(draft: _Draft) -> str:
    for nid in draft.order:
        if nid in draft.nodes and draft.nodes[nid].kind is NodeKind.END_EVENT:
            return nid
    return draft.add_node(NodeKind.END_EVENT, "EndEvent_repair", "End")


def _condition_text(expr) -> str | None:
    return None if expr is None else encode_entities(generate_expression_text(expr))


# --- per-rule repairs -------------------------------------------------------


def _repair_r1(d: _Draft, v: Violation, schema, matcher) -> tuple[str, str | None]:
    issue = v.data.get("issue")
    if issue == "missing":
        sources = [nid for nid in d.order if nid in d.nodes and not d.incoming(nid)]
        if len(sources) != 1:
            raise IrreparableViolation(f"no start event and {len(sources)} candidate entry nodes")
        sid = d.add_node(NodeKind.START_EVENT, "StartEvent_repair", "Start", before=sources[0])
        d.add_flow(sid, sources[0])
        return f"inserted start event {sid} before sole entry node {sources[0]}", None
    if issue == "incoming":
        for fid in d.incoming(v.subject):
            d.remove_flow(fid)
        return f"removed flows entering start event {v.subject}", None
    retained = v.data["retained"]
    old = d.nodes[v.subject]
    d.nodes[v.subject] = FlowNode(old.id, NodeKind.SCRIPT_TASK, old.name, "")
    succ = [d.flows[f].target for f in d.outgoing(retained)]
    if succ:
        for fid in d.outgoing(v.subject):
            d.set_flow(fid, target=succ[0])
    return f"demoted surplus start event {v.subject} to a pass-through script task", None


def _repair_r2(d: _Draft, v: Violation, schema, matcher) -> tuple[str, str | None]:
    if not d.nodes:
        raise IrreparableViolation("model has no nodes")
    sinks = [nid for nid in d.order if nid in d.nodes and not d.outgoing(nid)
             and d.nodes[nid].kind is not NodeKind.END_EVENT]
    eid = d.add_node(NodeKind.END_EVENT, "EndEvent_repair", "End")
    for s in sinks:
        d.add_flow(s, eid)
    return f"appended end event {eid} wired from {len(sinks)} sink node(s)", None


def _prune(d: _Draft, nid: str) -> None:
    """Remove an unreachable node and any successors left without incoming flows."""
    stack = [nid]
    while stack:
        cur = stack.pop()
        if cur not in d.nodes:
            continue
        targets = [d.flows[f].target for f in d.outgoing(cur)]
        d.remove_node(cur)
        for t in targets:
            node = d.nodes.get(t)
            if node is None or node.kind in (NodeKind.START_EVENT, NodeKind.END_EVENT):
                continue
            if not d.incoming(t):
                stack.append(t)


def _repair_r3(d: _Draft, v: Violation, schema, matcher) -> tuple[str, str | None]:
    t = v.subject
    issue = v.data.get("issue")
    if issue == "multiple_incoming":
        gw = d.add_node(NodeKind.EXCLUSIVE_GATEWAY, "Gateway_merge", before=t)
        for fid in d.incoming(t):
            d.set_flow(fid, target=gw)
        d.add_flow(gw, t)
        return f"inserted merge gateway {gw} upstream of {t}", None
    if issue == "multiple_outgoing":
        gw = d.add_node(NodeKind.EXCLUSIVE_GATEWAY, "Gateway_split", after=t)
        for fid in d.outgoing(t):
            d.resource(fid, gw)
        d.add_flow(t, gw)
        return f"inserted split gateway {gw} downstream of {t}", None
    if issue == "no_outgoing":
        end = _first_end(d)
        d.add_flow(t, end)
        return f"connected dead-end task {t} to end event {end}", None
    if issue == "no_incoming":
        _prune(d, t)
        return f"pruned unreachable task {t}", f"removed unreachable task {t}"
    raise IrreparableViolation(f"unknown R3 issue {issue!r}")


def _repair_r4(d: _Draft, v: Violation, schema, matcher) -> tuple[str, str | None]:
    g = v.subject
    merge = d.add_node(NodeKind.EXCLUSIVE_GATEWAY, "Gateway_merge", before=g)
    for fid in d.incoming(g):
        d.set_flow(fid, target=merge)
    d.add_flow(merge, g)
    return f"split mixed gateway {g} into merge {merge} followed by split {g}", None


def _repair_r5(d: _Draft, v: Violation, schema, matcher) -> tuple[str, str | None]:
    g = v.subject
    outs = d.outgoing(g)
    if len(outs) < 2:
        raise IrreparableViolation(f"{g} is not a split gateway")

    def weight(fid: str) -> int:
        f = d.flows[fid]
        if not f.has_condition:
            return 0
        cond = f.condition
        return count_conjuncts(cond) if cond is not None else _UNPARSABLE_CONJUNCTS

    chosen = min(outs, key=weight)  # min() keeps the first on ties, i.e. document order
    dropped = d.flows[chosen].expression_text
    d.nodes[g] = replace(d.nodes[g], default_flow=chosen)
    d.set_flow(chosen, condition_text=None)
    warning = f"cleared condition {dropped!r} on new default flow {chosen}" if dropped else None
    return f"designated {chosen} as default flow of {g}", warning


def _repair_r6(d: _Draft, v: Violation, schema, matcher) -> tuple[str, str | None]:
    fid = v.subject
    f = d.flows[fid]
    issue = v.data.get("issue")
    if issue == "unencoded":
        d.set_flow(fid, condition_text=encode_entities(f.expression_text))
        return f"entity-encoded condition on {fid}", None
    if issue == "unparsable":
        text = f.expression_text
        if text is not None:
            # double-encoded entities are the common case
            try:
                expr = parse_expression(decode_entities(text))
            except (ExpressionError, ValueError):
                expr = None
            if expr is not None:
                d.set_flow(fid, condition_text=_condition_text(expr))
                return f"decoded doubly-encoded condition on {fid}", None
        d.set_flow(fid, condition_text=None)
        return f"removed unparsable condition on {fid}", f"dropped unparsable condition {f.condition_text!r} on {fid}"
    raise IrreparableViolation(f"non-default flow {fid} has no condition and its gateway already has a default")


def _repair_r7(d: _Draft, v: Violation, schema, matcher) -> tuple[str, str | None]:
    target = v.data["target"]
    inserted = []
    for fid in v.data["duplicates"]:
        if fid not in d.flows:
            continue
        task = d.add_node(NodeKind.SCRIPT_TASK, "Task_passthrough", "Pass-through", before=target)
        d.set_flow(fid, target=task)
        d.add_flow(task, target)
        inserted.append(task)
    return f"re-routed duplicate flows of {v.subject} into {target} through {', '.join(inserted)}", None


def _fix_variable(expr, name: str, schema: PatientSchema, matcher):
    """Returns (new_expr_or_None, description, warning)."""
    match = matcher(name, [], schema)
    if match is not None and match[1] <= CONFIDENT_TIER:
        cols = sorted(match[0])
        return substitute(expr, {name: cols}), f"substituted {name} -> {' or '.join(cols)}", None
    reduced = drop_conjunct(expr, name)
    warning = f"no confident column for {name}; removed the conjunct referencing it"
    if reduced is None:
        warning = f"no confident column for {name}; removed the condition entirely"
    log.warning(warning)
    return reduced, f"removed logic referencing unknown variable {name}", warning


def _repair_r8(d: _Draft, v: Violation, schema, matcher) -> tuple[str, str | None]:
    name = v.data["variable"]
    eid = v.subject
    if eid in d.flows:
        cond = d.flows[eid].condition
        if cond is None:
            raise IrreparableViolation(f"condition on {eid} no longer parses")
        new, desc, warning = _fix_variable(cond, name, schema, matcher)
        d.set_flow(eid, condition_text=_condition_text(new))
        return f"{desc} on flow {eid}", warning
    node = d.nodes[eid]
    program = parse_script(node.script)
    statements = []
    desc, warning = "", None
    for st in program.statements:
        if name in variables(st.rhs):
            new, desc, warning = _fix_variable(st.rhs, name, schema, matcher)
            if new is None:
                continue
            st = Assign(st.target, new)
        statements.append(st)
    d.nodes[eid] = replace(node, script=render_script(ScriptProgram(tuple(statements))))
    return f"{desc} in script of {eid}", warning


_REPAIRS = {
    RuleId.R1: _repair_r1, RuleId.R2: _repair_r2, RuleId.R3: _repair_r3, RuleId.R4: _repair_r4,
    RuleId.R5: _repair_r5, RuleId.R6: _repair_r6, RuleId.R7: _repair_r7, RuleId.R8: _repair_r8,
}


def repair_violation(
    model: ProcessModel,
    v: Violation,
    schema: PatientSchema,
    matcher: Matcher | None = None,
    reserved: Iterable[str] = (),
) -> tuple[ProcessModel, RepairAction]:
    """Apply the targeted repair for one violation and return the new model plus its log entry.

    ``reserved`` lists ids that must not be minted even if absent from ``model``
    (the loop passes every id seen so far, so deleted ids are never reused).
    """
    if not model.nodes:
        raise IrreparableViolation("model has no nodes")
    matcher = matcher or ground_criterion
    d = _Draft(model, reserved)
    if v.subject != model.process_id and v.subject not in d.nodes and v.subject not in d.flows:
        raise IrreparableViolation(f"subject {v.subject} no longer exists")
    description, warning = _REPAIRS[v.rule](d, v, schema, matcher)
    new = d.freeze()
    touched = [i for i in d.removed if i in model.ids]
    action = RepairAction(
        rule=v.rule,
        description=description,
        before=tuple(dict.fromkeys([v.subject] + touched)),
        after=tuple(i for i in [v.subject, *d.inserted] if new.has_node(i) or new.has_flow(i)),
        inserted=tuple(i for i in d.inserted if i not in model.ids),
        removed=tuple(touched),
        warning=warning,
    )
    return new, action


def _key(v: Violation) -> tuple:
    return (v.rule, v.subject, v.data.get("issue"), v.data.get("variable"), v.data.get("target"))


def repair_loop(
    model: ProcessModel,
    schema: PatientSchema,
    max_iterations: int = DEFAULT_MAX_ITERATIONS,
    matcher: Matcher | None = None,
) -> RepairOutcome:
    """Validate, repair every reported violation, and revalidate, up to ``max_iterations`` rounds."""
    if max_iterations < 1:
        raise ValueError("max_iterations must be >= 1")
    actions: list[RepairAction] = []
    failures: list[str] = []
    seen_ids = set(model.ids)
    for iteration in range(1, max_iterations + 1):
        report = validate(model, schema)
        if report.passed:
            return RepairOutcome(model, tuple(actions), iteration, RepairStatus.REPAIRED, report, tuple(failures))
        for v in report.violations:
            # violations come from a snapshot; act only on those still present
            current = {_key(c): c for c in check_rule(model, schema, v.rule)}
            live = current.get(_key(v))
            if live is None:
                continue
            try:
                model, action = repair_violation(model, live, schema, matcher, seen_ids)
            except IrreparableViolation as exc:
                failures.append(f"iteration {iteration}: {v.rule.value} {v.subject}: {exc}")
                continue
            seen_ids |= model.ids
            actions.append(action)
    report = validate(model, schema)
    status = RepairStatus.REPAIRED if report.passed else RepairStatus.GENERATION_FAILURE
    return RepairOutcome(model, tuple(actions), max_iterations, status, report, tuple(failures))
