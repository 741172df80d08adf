"""Executable augmentation and token-style execution of decision models."""

from __future__ import annotations

import json
import logging
from collections import Counter
from dataclasses import dataclass, replace
from typing import Any, Iterable, Mapping, Sequence, TextIO, Union

from .bpmn import NodeKind, ProcessModel
from .cohort import PatientRecord
from .errors import (
    AugmentationInvariantError,
    EngineError,
    ExpressionError,
    ExpressionSyntaxError,
    NoViableFlow,
    NotExecutable,
    PolicyFlowError,
    SchemaMismatch,
    StepLimitExceeded,
    TypeMismatch,
    UnparsableCondition,
    UnparsableScript,
)
from .expression import (
    Expr,
    encode_entities,
    evaluate,
    generate_expression_text,
    normalize,
    parse_expression,
)
from .schema import PatientSchema
from .script import ScriptProgram, parse_script, render_script

log = logging.getLogger(__name__)


@dataclass
class DataContext:
    bindings: dict[str, Any]

    def __getitem__(self, name: str) -> Any:
        return self.bindings[name]

    def snapshot(self) -> dict[str, Any]:
        return dict(self.bindings)


@dataclass(frozen=True)
class Step:
    node_id: str
    kind: NodeKind
    flow_id: str | None = None


@dataclass(frozen=True)
class ExecutionTrace:
    steps: tuple[Step, ...]
    terminal: str
    final_context: Mapping[str, Any]
    record_id: str | None = None

    def visits(self, node_id: str) -> bool:
        return any(s.node_id == node_id for s in self.steps)

    @property
    def path(self) -> list[str]:
        return [s.node_id for s in self.steps]

    def to_dict(self) -> dict[str, Any]:
        return {
            "record_id": self.record_id,
            "terminal": self.terminal,
            "steps": [[s.node_id, s.kind.value, s.flow_id] for s in self.steps],
            "final_context": dict(sorted(self.final_context.items())),
        }


@dataclass(frozen=True)
class RecordError:
    """A per-record failure inside a cohort run."""

    record_id: str | None
    index: int
    error: PolicyFlowError

    def to_dict(self) -> dict[str, Any]:
        return {"record_id": self.record_id, "index": self.index,
                "error": type(self.error).__name__, "message": str(self.error)}


TraceResult = Union[ExecutionTrace, RecordError]


def condition_signature(model: ProcessModel) -> Counter:
    """Multiset of normalized conditions over every flow that carries a parsable one."""
    sig: Counter = Counter()
    for f in model.flows:
        cond = f.condition
        if cond is not None:
            sig[normalize(cond)] += 1
    return sig


def augment(model: ProcessModel, schema: PatientSchema | None = None) -> ProcessModel:
    """Turn a validated descriptive model into one the engine can run.

    User tasks become script tasks, conditions and scripts are parsed (and
    re-emitted in canonical form), and the multiset of normalized conditions
    is asserted unchanged. With ``schema``, every referenced variable must be a
    column or a script-assigned name.
    """
    before: Counter = Counter()
    flows = []
    for f in model.flows:
        if not f.has_condition:
            flows.append(replace(f, condition_text=None) if f.condition_text is not None else f)
            continue
        text = f.expression_text
        if text is None:
            raise UnparsableCondition(f.id, ValueError("condition text is not decodable"))
        try:
            cond = parse_expression(text)
        except (ExpressionSyntaxError, ValueError) as exc:
            raise UnparsableCondition(f.id, exc) from exc
        before[normalize(cond)] += 1
        flows.append(replace(f, condition_text=encode_entities(generate_expression_text(cond))))

    nodes = []
    assigned: set[str] = set()
    reads: set[str] = set()
    for n in model.nodes:
        if n.kind is NodeKind.USER_TASK:
            n = replace(n, kind=NodeKind.SCRIPT_TASK, script="")
        if n.kind is NodeKind.SCRIPT_TASK:
            try:
                program = parse_script(n.script)
            except ExpressionError as exc:
                raise UnparsableScript(n.id, exc) from exc
            assigned.update(program.targets)
            reads.update(program.reads())
            n = replace(n, script=render_script(program))
        nodes.append(n)

    out = model.with_elements(nodes, flows, model.document_order)
    after = condition_signature(out)
    if after != before:
        raise AugmentationInvariantError(
            f"gateway conditions changed during augmentation: {sorted((before - after).elements())} "
            f"-> {sorted((after - before).elements())}"
        )
    if schema is not None:
        from .expression import variables

        for f in out.flows:
            if f.condition is not None:
                reads.update(variables(f.condition))
        unknown = reads - set(schema.names) - assigned
        if unknown:
            raise SchemaMismatch(extra=unknown, detail="model references variables outside the data context")
    return out


def bind_context(record: PatientRecord | Mapping[str, Any], schema: PatientSchema) -> DataContext:
    values = record.values if isinstance(record, PatientRecord) else record
    schema.check_record(values)
    return DataContext({c.name: values[c.name] for c in schema.columns})


class _Program:
    """Per-model cache of parsed scripts and conditions."""

    def __init__(self, model: ProcessModel):
        self.model = model
        self.scripts: dict[str, ScriptProgram] = {}
        self.conditions: dict[str, Expr | None] = {}
        for n in model.nodes:
            if n.kind is NodeKind.USER_TASK:
                raise NotExecutable(f"user task {n.id} must be augmented before execution")
            if n.kind is NodeKind.SCRIPT_TASK:
                try:
                    self.scripts[n.id] = parse_script(n.script)
                except ExpressionError as exc:
                    raise UnparsableScript(n.id, exc) from exc
        for f in model.flows:
            if f.has_condition:
                cond = f.condition
                if cond is None:
                    raise UnparsableCondition(f.id, ValueError(f.condition_text))
                self.conditions[f.id] = cond
            else:
                self.conditions[f.id] = None
        starts = model.nodes_of(NodeKind.START_EVENT)
        if len(starts) != 1:
            raise NotExecutable(f"model needs exactly one start event, found {len(starts)}")
        self.start = starts[0].id


_PROGRAMS: dict[int, tuple[ProcessModel, _Program]] = {}


def _program(model: ProcessModel) -> _Program:
    hit = _PROGRAMS.get(id(model))
    if hit is not None and hit[0] is model:
        return hit[1]
    prog = _Program(model)
    if len(_PROGRAMS) > 64:
        _PROGRAMS.clear()
    _PROGRAMS[id(model)] = (model, prog)
    return prog


def run_instance(
    model: ProcessModel,
    context: DataContext,
    schema: PatientSchema | None = None,
    step_limit: int | None = None,
    record_id: str | None = None,
) -> ExecutionTrace:
    """Walk one token from the start event to the first end event reached."""
    prog = _program(model)
    env = context.bindings
    limit = step_limit if step_limit is not None else 2 * len(model.nodes)
    steps: list[Step] = []
    current = prog.start
    while True:
        if len(steps) >= limit:
            raise StepLimitExceeded(f"exceeded {limit} steps; the model likely contains a cycle")
        node = model.node(current)
        outs = model.outgoing(current)
        if node.kind is NodeKind.END_EVENT:
            steps.append(Step(current, node.kind, None))
            return ExecutionTrace(tuple(steps), current, dict(env), record_id)
        if node.kind is NodeKind.SCRIPT_TASK:
            for st in prog.scripts[current].statements:
                env[st.target] = evaluate(st.rhs, env, schema)
        if node.kind is NodeKind.EXCLUSIVE_GATEWAY and len(outs) > 1:
            chosen = None
            for fid in outs:
                if fid == node.default_flow:
                    continue
                cond = prog.conditions[fid]
                if cond is None:
                    raise NoViableFlow(f"non-default flow {fid} of {current} has no condition")
                value = evaluate(cond, env, schema)
                if not isinstance(value, bool):
                    raise TypeMismatch("condition", type(value).__name__, "boolean")
                if value:
                    chosen = fid
                    break
            if chosen is None:
                chosen = node.default_flow
            if chosen is None:
                raise NoViableFlow(f"no condition of {current} holds and it has no default flow")
        elif len(outs) == 1:
            chosen = outs[0]
        elif not outs:
            raise NoViableFlow(f"{current} has no outgoing flow")
        else:
            raise NoViableFlow(f"{node.kind.value} {current} has {len(outs)} outgoing flows")
        steps.append(Step(current, node.kind, chosen))
        current = model.flow(chosen).target


def run_cohort(
    model: ProcessModel,
    cohort: Sequence[PatientRecord],
    schema: PatientSchema,
) -> list[TraceResult]:
    """One result per record, in input order; failures are captured per record."""
    results: list[TraceResult] = []
    for i, rec in enumerate(cohort):
        rid = rec.id if isinstance(rec, PatientRecord) else None
        try:
            ctx = bind_context(rec, schema)
            results.append(run_instance(model, ctx, schema, record_id=rid))
        except (PolicyFlowError, KeyError, TypeError) as exc:
            if not isinstance(exc, PolicyFlowError):
                exc = EngineError(str(exc))
            results.append(RecordError(rid, i, exc))
    return results


def write_traces(results: Iterable[TraceResult], fp: TextIO) -> None:
    """JSON lines, one trace (or per-record error) per line."""
    for r in results:
        fp.write(json.dumps(r.to_dict(), sort_keys=True, default=str) + "\n")
