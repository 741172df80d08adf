from __future__ import annotations

import json
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from policyflow.bpmn import parse_bpmn
from policyflow.schema import PatientSchema

FIXTURES = Path(__file__).parent / "fixtures"
CITY1 = FIXTURES / "city1"

NS = 'xmlns:bpmn="http://www.omg.org/spec/BPMN/20100524/MODEL"'


def bpmn_doc(body: str, process_id: str = "Process_1") -> str:
    """Wrap process content in a definitions/process envelope using the bpmn: prefix."""
    return (f'<?xml version="1.0" encoding="UTF-8"?>\n<bpmn:definitions {NS} id="Defs">'
            f'<bpmn:process id="{process_id}">{body}</bpmn:process></bpmn:definitions>')


MINIMAL = bpmn_doc(
    '<bpmn:startEvent id="Start"/><bpmn:userTask id="Task_A" name="Review"/><bpmn:endEvent id="End"/>'
    '<bpmn:sequenceFlow id="f1" sourceRef="Start" targetRef="Task_A"/>'
    '<bpmn:sequenceFlow id="f2" sourceRef="Task_A" targetRef="End"/>'
)


def hba1c_gate(extra: str = "") -> str:
    """Start -> split on HbA1c >= 6.5 -> Task_eligible | default -> End_no."""
    return bpmn_doc(
        '<bpmn:startEvent id="Start"/>'
        '<bpmn:exclusiveGateway id="Gw" default="f_no"/>'
        '<bpmn:userTask id="Task_eligible" name="Send notification"/>'
        '<bpmn:endEvent id="End_yes"/><bpmn:endEvent id="End_no"/>'
        '<bpmn:sequenceFlow id="f0" sourceRef="Start" targetRef="Gw"/>'
        '<bpmn:sequenceFlow id="f_yes" sourceRef="Gw" targetRef="Task_eligible">'
        '<bpmn:conditionExpression>HbA1c &gt;= 6.5</bpmn:conditionExpression></bpmn:sequenceFlow>'
        '<bpmn:sequenceFlow id="f_no" sourceRef="Gw" targetRef="End_no"/>'
        '<bpmn:sequenceFlow id="f_done" sourceRef="Task_eligible" targetRef="End_yes"/>' + extra
    )


@pytest.fixture
def minimal_model():
    return parse_bpmn(MINIMAL)


@pytest.fixture(scope="session")
def city1_schema() -> PatientSchema:
    return PatientSchema.load(CITY1 / "schema.json")


@pytest.fixture(scope="session")
def city1_models():
    gt = parse_bpmn((CITY1 / "ground_truth.bpmn").read_text(encoding="utf-8"))
    variant = parse_bpmn((CITY1 / "variant.bpmn").read_text(encoding="utf-8"))
    return gt, variant


def irreparable_variant() -> str:
    """Ground truth with a non-default split flow stripped of its condition (cannot be repaired)."""
    text = (CITY1 / "ground_truth.bpmn").read_text(encoding="utf-8")
    start = text.index("<bpmn:conditionExpression>diabetes_claims")
    end = text.index("</bpmn:conditionExpression>", start) + len("</bpmn:conditionExpression>")
    return text[:start] + text[end:]


def write_pipeline_fixture(root: Path, counts: dict[str, int], *, size: int = 1000, seed: int = 7,
                           ground_truth: bool = True, k: int = 5) -> Path:
    """Build a replay directory plus config under ``root``; returns the config path.

    ``counts`` maps "gt", "variant" and "broken" to how many candidate files of each kind to write;
    files are interleaved deterministically so failures are not bunched at the end.
    """
    sources = {
        "gt": (CITY1 / "ground_truth.bpmn").read_text(encoding="utf-8"),
        "variant": (CITY1 / "variant.bpmn").read_text(encoding="utf-8"),
        "broken": irreparable_variant(),
    }
    kinds = [kind for kind, n in counts.items() for _ in range(n)]
    total = len(kinds)
    order = sorted(range(total), key=lambda i: (i * 37) % total)  # fixed permutation (37 is coprime to 100)
    replay = root / "fixtures" / "city1" / "replay"
    replay.mkdir(parents=True)
    for slot, i in enumerate(order):
        (replay / f"{slot + 1:03d}.bpmn").write_text(sources[kinds[i]], encoding="utf-8")
    (root / "kpi.json").write_text('{"capacity": 500, "improvement_rate": 0.602, "cost_per_guided_yen": 2837500}')
    config = {
        "schema": str(CITY1 / "schema.json"),
        "kpi_coefficients": "kpi.json",
        "provider": {"type": "replay", "directory": "fixtures/city1/replay"},
        "output_dir": "runs",
        "cohort": {"size": size, "seed": seed},
        "k": k,
        "M": total,
        "parallelism": 4,
        "narrative": str(CITY1 / "narrative.txt"),
    }
    if ground_truth:
        config["ground_truth"] = str(CITY1 / "ground_truth.bpmn")
    path = root / "config.json"
    path.write_text(json.dumps(config, indent=2), encoding="utf-8")
    return path


# lines recorded by the acceptance suite, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: s.split("criterion")[1]):
            terminalreporter.write_line(line)
