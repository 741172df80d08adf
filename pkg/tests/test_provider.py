from __future__ import annotations

import json

import httpx
import pytest

from conftest import MINIMAL
from policyflow.bpmn import FlowNode, NodeKind
from policyflow.errors import BackendUnavailable, ConfigError, FixtureMissing, MalformedResponse
from policyflow.kpi import KpiId, collect_votes
from policyflow.provider import (
    BackendOracle,
    GenerationRequest,
    HttpChatBackend,
    LexicalOracle,
    ReplayBackend,
    extract_xml,
    generate,
    oracle_from_backend,
)
from policyflow.schema import PatientSchema

SCHEMA = PatientSchema.of("HbA1c")
REQUEST = GenerationRequest("Notify patients with HbA1c at or above 6.5.", SCHEMA, count=10)


def chat(content: str, status: int = 200) -> httpx.Response:
    return httpx.Response(status, json={"choices": [{"message": {"role": "assistant", "content": content}}]})


def fixture_dir(tmp_path, n):
    d = tmp_path / "city" / "backend"
    d.mkdir(parents=True)
    for i in range(n):
        (d / f"{i + 1:03d}.bpmn").write_text(MINIMAL.replace("Review", f"Review {i}"), encoding="utf-8")
    return d


class TestReplay:
    def test_full_directory(self, tmp_path):
        fixture_dir(tmp_path, 100)
        cands = generate(GenerationRequest("x", SCHEMA, count=100), ReplayBackend.for_city(tmp_path, "city", "backend"))
        assert len(cands) == 100 and not cands.failures
        assert [c.provenance.source for c in cands][:3] == ["001.bpmn", "002.bpmn", "003.bpmn"]
        assert "Review 0" in cands[0].raw_xml and cands[0].provenance.backend_id == "replay:city/backend"

    def test_short_directory(self, tmp_path):
        d = fixture_dir(tmp_path, 99)
        cands = generate(GenerationRequest("x", SCHEMA, count=100), ReplayBackend(d))
        assert len(cands) == 100
        (missing,) = cands.failures
        assert missing.slot == 99 and isinstance(missing.error, FixtureMissing)

    def test_missing_directory(self, tmp_path):
        with pytest.raises(FixtureMissing):
            generate(REQUEST, ReplayBackend(tmp_path / "nope"))

    def test_deterministic(self, tmp_path):
        backend = ReplayBackend(fixture_dir(tmp_path, 5))
        assert generate(REQUEST, backend) == generate(REQUEST, backend)


class TestHttp:
    def test_prose_slot_is_isolated(self, tmp_path):
        log_path = tmp_path / "log.jsonl"

        def handler(request: httpx.Request) -> httpx.Response:
            body = json.loads(request.content)
            assert body["model"] == "m" and "HbA1c" in body["messages"][0]["content"]
            return chat("```xml\n" + MINIMAL + "\n```")

        calls = {"n": 0}

        class Backend(HttpChatBackend):
            def complete(self, prompt, slot, decoding=None):
                if slot == 7:
                    return "I cannot draw diagrams, but here is a description.", 0
                calls["n"] += 1
                return super().complete(prompt, slot, decoding)

        backend = Backend("http://llm.test/v1/chat", "m", "key", transport=httpx.MockTransport(handler),
                          log_path=log_path)
        cands = generate(REQUEST, backend, parallelism=3)
        assert [c.slot for c in cands] == list(range(10))
        (bad,) = cands.failures
        assert bad.slot == 7 and isinstance(bad.error, MalformedResponse) and bad.error.slot == 7
        assert all(c.raw_xml.startswith("<?xml") for c in cands if c.ok)
        assert len(log_path.read_text().splitlines()) == calls["n"] == 9

    def test_retry_with_backoff(self):
        replies = iter([httpx.Response(503), httpx.Response(429), chat(MINIMAL)])
        sleeps = []
        backend = HttpChatBackend("http://llm.test", "m", transport=httpx.MockTransport(lambda r: next(replies)),
                                  backoff=0.5, sleep=sleeps.append)
        text, attempt = backend.complete("p", 0)
        assert attempt == 2 and sleeps == [0.5, 1.0] and "definitions" in text

    def test_transport_errors_exhaust_retries(self):
        def handler(request):
            raise httpx.ConnectError("refused")

        backend = HttpChatBackend("http://llm.test", "m", transport=httpx.MockTransport(handler),
                                  max_retries=2, sleep=lambda s: None)
        with pytest.raises(BackendUnavailable):
            backend.complete("p", 0)
        cands = generate(GenerationRequest("x", SCHEMA, count=2), backend)
        assert len(cands.failures) == 2

    def test_client_error_is_not_retried(self):
        seen = []

        def handler(request):
            seen.append(1)
            return httpx.Response(401, text="bad key")

        backend = HttpChatBackend("http://llm.test", "m", transport=httpx.MockTransport(handler), sleep=lambda s: None)
        with pytest.raises(BackendUnavailable):
            backend.complete("p", 0)
        assert len(seen) == 1

    def test_unreadable_body(self):
        backend = HttpChatBackend("http://llm.test", "m",
                                  transport=httpx.MockTransport(lambda r: httpx.Response(200, text="<html>")))
        with pytest.raises(MalformedResponse):
            backend.complete("p", 4)

    def test_from_env(self, monkeypatch):
        monkeypatch.delenv("POLICYFLOW_ENDPOINT", raising=False)
        with pytest.raises(ConfigError):
            HttpChatBackend.from_env()
        monkeypatch.setenv("POLICYFLOW_ENDPOINT", "http://llm.test")
        monkeypatch.setenv("POLICYFLOW_MODEL", "m")
        assert HttpChatBackend.from_env().backend_id == "http:m"


def test_extract_xml_variants():
    assert extract_xml(MINIMAL, 0).startswith("<?xml")
    assert extract_xml("Here you go:\n" + MINIMAL.split("\n", 1)[1] + "\nDone.", 0).endswith("</bpmn:definitions>")
    with pytest.raises(MalformedResponse):
        extract_xml("no model here", 3)


TASKS = [FlowNode("T1", NodeKind.USER_TASK, name="Send notification"),
         FlowNode("T2", NodeKind.USER_TASK, name="Conduct guidance")]


class TestOracles:
    def test_lexical_overlap(self):
        assert LexicalOracle()("Notification Count", TASKS) == "T1"
        assert LexicalOracle()("Health Guidance Count", TASKS) == "T2"

    def test_lexical_fallback_is_first_task(self):
        assert LexicalOracle()("Dialysis transfers", TASKS) == "T1"

    def test_backend_oracle_votes_are_stamped(self, city1_models):
        seen = []

        class Scripted:
            backend_id = "scripted"

            def complete(self, prompt, slot, decoding=None):
                seen.append(slot)
                assert "Task_notify" in prompt
                return "The matching task is Task_notify.", 0

        votes = collect_votes(KpiId.NC, city1_models[0], BackendOracle(Scripted()), k=5)
        assert [v.task_id for v in votes] == ["Task_notify"] * 5
        assert [v.repetition for v in votes] == list(range(5)) and {v.source for v in votes} == {"scripted"}
        assert seen == list(range(5))

    def test_oracle_from_backend(self, tmp_path):
        assert isinstance(oracle_from_backend(None), LexicalOracle)
        assert isinstance(oracle_from_backend(ReplayBackend(tmp_path)), LexicalOracle)
        backend = HttpChatBackend("http://llm.test", "m", transport=httpx.MockTransport(lambda r: chat("T2")))
        assert oracle_from_backend(backend)("Guidance", TASKS) == "T2"
