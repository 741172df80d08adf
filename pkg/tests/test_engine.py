from __future__ import annotations

import io
import json
import random
from dataclasses import replace

import pytest

from conftest import hba1c_gate
from modelgen import FUZZ_SCHEMA, oracle_end, path_predicates, random_valid_model, record_grid
from policyflow.bpmn import FlowNode, NodeKind, ProcessModel, SequenceFlow, parse_bpmn
from policyflow.cohort import CohortSpec, PatientRecord, generate
from policyflow.engine import (
    ExecutionTrace,
    RecordError,
    augment,
    bind_context,
    condition_signature,
    run_cohort,
    run_instance,
    write_traces,
)
from policyflow.errors import (
    NotExecutable,
    SchemaMismatch,
    StepLimitExceeded,
    UnboundVariable,
    UnparsableCondition,
)
from policyflow.expression import parse_expression, variables
from policyflow.schema import PatientSchema

GATE_SCHEMA = PatientSchema.of("HbA1c")


@pytest.fixture
def gate():
    return augment(parse_bpmn(hba1c_gate()))


def run(model, **values):
    return run_instance(model, bind_context(values, PatientSchema.of(*values)))


def test_user_task_becomes_empty_script_task(gate):
    node = gate.node("Task_eligible")
    assert node.kind is NodeKind.SCRIPT_TASK
    assert node.name == "Send notification" and node.script == ""


def test_condition_is_parsed_and_signature_preserved():
    model = parse_bpmn(hba1c_gate())
    out = augment(model)
    assert out.flow("f_yes").condition == parse_expression("HbA1c >= 6.5")
    assert condition_signature(out) == condition_signature(model)


def test_incomplete_condition_is_rejected():
    model = parse_bpmn(hba1c_gate().replace("HbA1c &gt;= 6.5", "HbA1c &gt;="))
    with pytest.raises(UnparsableCondition) as info:
        augment(model)
    assert info.value.flow_id == "f_yes"
    assert "position" in str(info.value)


def test_augment_with_schema_rejects_unknown_variables():
    with pytest.raises(SchemaMismatch):
        augment(parse_bpmn(hba1c_gate()), PatientSchema.of("eGFR"))


def test_unaugmented_model_is_not_executable():
    with pytest.raises(NotExecutable):
        run_instance(parse_bpmn(hba1c_gate()), bind_context({"HbA1c": 7.0}, GATE_SCHEMA))


@pytest.mark.parametrize("value,end", [(7.0, "End_yes"), (6.0, "End_no"), (6.5, "End_yes")])
def test_gateway_boundaries(gate, value, end):
    trace = run(gate, HbA1c=value)
    assert trace.terminal == end
    assert trace.steps[0].node_id == "Start" and trace.steps[-1].kind is NodeKind.END_EVENT


def test_trace_is_flow_connected_and_deterministic(gate):
    trace = run(gate, HbA1c=7.0)
    for a, b in zip(trace.steps, trace.steps[1:]):
        f = gate.flow(a.flow_id)
        assert (f.source, f.target) == (a.node_id, b.node_id)
    assert run(gate, HbA1c=7.0) == trace


def test_bind_context():
    schema = PatientSchema.of("HbA1c", "Diabetes")
    assert len(bind_context({"HbA1c": 7.0, "Diabetes": 1}, schema).bindings) == 2
    with pytest.raises(SchemaMismatch):
        bind_context({"HbA1c": 7.0}, PatientSchema.of("HbA1c", "eGFR"))
    with pytest.raises(SchemaMismatch) as info:
        bind_context({"HbA1c": 7.0, "Foo": 1}, GATE_SCHEMA)
    assert info.value.extra == ("Foo",)


def test_scripts_update_context_and_are_read_downstream():
    nodes = [FlowNode("S", NodeKind.START_EVENT), FlowNode("T", NodeKind.SCRIPT_TASK, script="risk = HbA1c >= 6.5"),
             FlowNode("G", NodeKind.EXCLUSIVE_GATEWAY, default_flow="n"),
             FlowNode("E1", NodeKind.END_EVENT), FlowNode("E2", NodeKind.END_EVENT)]
    flows = [SequenceFlow("a", "S", "T"), SequenceFlow("b", "T", "G"),
             SequenceFlow.conditional("y", "G", "E1", "risk"), SequenceFlow("n", "G", "E2")]
    model = augment(ProcessModel("P", nodes, flows))
    trace = run(model, HbA1c=8.0)
    assert trace.terminal == "E1" and trace.final_context["risk"] is True


def test_unbound_variable_surfaces():
    model = augment(parse_bpmn(hba1c_gate().replace("HbA1c &gt;= 6.5", "eGFR &lt; 30")))
    with pytest.raises(UnboundVariable):
        run(model, HbA1c=7.0)


def test_step_limit_catches_cycles():
    nodes = [FlowNode("S", NodeKind.START_EVENT), FlowNode("A", NodeKind.SCRIPT_TASK),
             FlowNode("B", NodeKind.SCRIPT_TASK)]
    flows = [SequenceFlow("f0", "S", "A"), SequenceFlow("f1", "A", "B"), SequenceFlow("f2", "B", "A")]
    with pytest.raises(StepLimitExceeded):
        run_instance(ProcessModel("P", nodes, flows), bind_context({}, PatientSchema()))


def test_first_true_condition_in_document_order_wins():
    doc = hba1c_gate('<bpmn:sequenceFlow id="f_also" sourceRef="Gw" targetRef="End_yes">'
                     '<bpmn:conditionExpression>HbA1c &gt;= 5</bpmn:conditionExpression></bpmn:sequenceFlow>')
    model = augment(parse_bpmn(doc))
    assert run(model, HbA1c=7.0).steps[1].flow_id == "f_yes"
    assert run(model, HbA1c=5.5).steps[1].flow_id == "f_also"


def test_run_cohort_city1(city1_schema, city1_models):
    cohort = generate(CohortSpec(city1_schema, size=1000, seed=3))
    traces = run_cohort(augment(city1_models[0]), cohort, city1_schema)
    assert len(traces) == 1000
    assert all(isinstance(t, ExecutionTrace) for t in traces)
    assert [t.record_id for t in traces] == [r.id for r in cohort]


def test_run_cohort_empty(gate):
    assert run_cohort(gate, [], GATE_SCHEMA) == []


def test_run_cohort_isolates_bad_records(gate):
    cohort = [PatientRecord(f"P{i}", {"HbA1c": 5.0 + i * 0.3}) for i in range(10)]
    cohort[4] = PatientRecord("P4", {"HbA1c": 6.0, "Foo": 1.0})
    results = run_cohort(gate, cohort, GATE_SCHEMA)
    errors = [r for r in results if isinstance(r, RecordError)]
    assert len(results) == 10 and len(errors) == 1
    assert errors[0].index == 4 and isinstance(errors[0].error, SchemaMismatch)


def test_write_traces_json_lines(gate):
    cohort = [PatientRecord("P1", {"HbA1c": 7.0}), PatientRecord("P2", {"HbA1c": 6.0, "x": 1.0})]
    buf = io.StringIO()
    write_traces(run_cohort(gate, cohort, GATE_SCHEMA), buf)
    lines = [json.loads(line) for line in buf.getvalue().splitlines()]
    assert lines[0]["terminal"] == "End_yes" and lines[0]["steps"][0] == ["Start", "startEvent", "f0"]
    assert lines[1]["error"] == "SchemaMismatch"


# --- properties ----------------------------------------------------------------


def small_models(n: int, seed: int):
    rng = random.Random(seed)
    while n:
        model = random_valid_model(rng)
        if len(model.nodes_of(NodeKind.EXCLUSIVE_GATEWAY)) <= 4:
            n -= 1
            yield model


@pytest.mark.parametrize("seed", range(3))
def test_engine_matches_path_oracle(seed):
    for model in small_models(10, seed):
        aug = augment(model)
        assert condition_signature(aug) == condition_signature(model)
        names = sorted({v for f in aug.flows if f.condition is not None for v in variables(f.condition)})
        paths = path_predicates(aug)
        for env in record_grid(names):
            trace = run_instance(aug, bind_context(env, FUZZ_SCHEMA), FUZZ_SCHEMA)
            assert trace.terminal == oracle_end(paths, env)
            assert len(trace.steps) <= 2 * len(aug.nodes)


def test_augment_is_idempotent_on_random_models():
    rng = random.Random(11)
    for _ in range(30):
        model = augment(random_valid_model(rng))
        assert augment(model) == model


def test_flow_replace_keeps_model_executable(gate):
    # changing only a condition's spacing does not alter the normalized signature
    flows = [replace(f, condition_text="HbA1c&gt;=6.5") if f.id == "f_yes" else f for f in gate.flows]
    other = augment(gate.with_elements(gate.nodes, flows, gate.document_order))
    assert condition_signature(other) == condition_signature(gate)
