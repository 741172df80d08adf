"""Candidate model sources: fixture replay and a chat-completion HTTP backend.

Nothing here validates or repairs models; a candidate is raw XML text or a
per-slot failure marker. Slots are numbered from 0 and results are always
returned in slot order, whatever the fan-out.
"""

from __future__ import annotations

import json
import logging
import os
import re
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from string import Template
from typing import Any, Callable, Mapping, Protocol, Sequence, runtime_checkable

import httpx

from .bpmn import FlowNode
from .errors import BackendUnavailable, ConfigError, FixtureMissing, MalformedResponse, ProviderError
from .grounding import name_tokens
from .schema import PatientSchema

log = logging.getLogger(__name__)

ENV_ENDPOINT = "POLICYFLOW_ENDPOINT"
ENV_API_KEY = "POLICYFLOW_API_KEY"
ENV_MODEL = "POLICYFLOW_MODEL"


def load_prompt(name: str) -> Template:
    text = resources.files("policyflow.prompts").joinpath(f"{name}.txt").read_text(encoding="utf-8")
    return Template(text)


@dataclass(frozen=True)
class GenerationRequest:
    narrative_text: str
    schema: PatientSchema
    count: int = 1
    decoding: Mapping[str, Any] = field(default_factory=dict)  # passed through untouched

    def __post_init__(self):
        if self.count < 1:
            raise ValueError("count must be >= 1")

    def prompt(self) -> str:
        return load_prompt("generate_bpmn").substitute(narrative=self.narrative_text, schema=self.schema.to_json())


@dataclass(frozen=True)
class Provenance:
    backend_id: str
    attempt: int = 0
    source: str | None = None  # fixture file name for replay

    def to_dict(self) -> dict[str, Any]:
        return {"backend": self.backend_id, "attempt": self.attempt, "source": self.source}


@dataclass(frozen=True)
class Candidate:
    slot: int
    raw_xml: str | None
    provenance: Provenance
    error: ProviderError | None = field(default=None, compare=False)

    @property
    def ok(self) -> bool:
        return self.raw_xml is not None

    def to_dict(self) -> dict[str, Any]:
        return {"slot": self.slot, "ok": self.ok, "provenance": self.provenance.to_dict(),
                "error": None if self.error is None else f"{type(self.error).__name__}: {self.error}"}


@dataclass(frozen=True)
class CandidateSet:
    candidates: tuple[Candidate, ...]

    def __len__(self) -> int:
        return len(self.candidates)

    def __iter__(self):
        return iter(self.candidates)

    def __getitem__(self, i: int) -> Candidate:
        return self.candidates[i]

    @property
    def failures(self) -> list[Candidate]:
        return [c for c in self.candidates if not c.ok]


@runtime_checkable
class Backend(Protocol):
    backend_id: str

    def complete(self, prompt: str, slot: int, decoding: Mapping[str, Any] | None = None) -> tuple[str, int]:
        """Return (response text, attempt index that succeeded)."""
        ...


# --- replay -----------------------------------------------------------------


class ReplayBackend:
    """Streams ``*.bpmn`` files from one fixture directory in lexicographic order.

    The conventional layout is ``fixtures/<city>/<backend>/NNN.bpmn``.
    """

    def __init__(self, directory: str | Path, backend_id: str | None = None):
        self.directory = Path(directory)
        self.backend_id = backend_id or f"replay:{self.directory.name}"

    @classmethod
    def for_city(cls, root: str | Path, city: str, backend: str) -> "ReplayBackend":
        return cls(Path(root) / city / backend, backend_id=f"replay:{city}/{backend}")

    def files(self) -> list[Path]:
        if not self.directory.is_dir():
            raise FixtureMissing(str(self.directory))
        return sorted(self.directory.glob("*.bpmn"), key=lambda p: p.name)

    def replay(self, count: int) -> CandidateSet:
        files = self.files()
        out = []
        for slot in range(count):
            if slot < len(files):
                path = files[slot]
                out.append(Candidate(slot, path.read_text(encoding="utf-8"),
                                     Provenance(self.backend_id, 0, path.name)))
            else:
                out.append(Candidate(slot, None, Provenance(self.backend_id),
                                     FixtureMissing(str(self.directory), slot)))
        return CandidateSet(tuple(out))

    def complete(self, prompt: str, slot: int, decoding: Mapping[str, Any] | None = None) -> tuple[str, int]:
        files = self.files()
        if slot >= len(files):
            raise FixtureMissing(str(self.directory), slot)
        return files[slot].read_text(encoding="utf-8"), 0


# --- live -------------------------------------------------------------------


class HttpChatBackend:
    """Generic JSON-over-HTTP chat-completion client with retry and JSON-lines audit log."""

    def __init__(
        self,
        endpoint: str,
        model: str,
        api_key: str | None = None,
        *,
        max_retries: int = 3,
        backoff: float = 1.0,
        timeout: float = 120.0,
        transport: httpx.BaseTransport | None = None,
        log_path: str | Path | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        if not endpoint:
            raise ConfigError("chat backend needs an endpoint")
        self.endpoint = endpoint
        self.model = model
        self.backend_id = f"http:{model}"
        self.max_retries = max_retries
        self.backoff = backoff
        self._sleep = sleep
        headers = {"Authorization": f"Bearer {api_key}"} if api_key else {}
        self._client = httpx.Client(timeout=timeout, transport=transport, headers=headers)
        self._log_path = Path(log_path) if log_path else None
        self._log_lock = threading.Lock()

    @classmethod
    def from_env(cls, **kwargs: Any) -> "HttpChatBackend":
        endpoint = os.environ.get(ENV_ENDPOINT)
        model = os.environ.get(ENV_MODEL)
        if not endpoint or not model:
            raise ConfigError(f"set {ENV_ENDPOINT} and {ENV_MODEL} to use the live backend")
        return cls(endpoint, model, os.environ.get(ENV_API_KEY), **kwargs)

    def close(self) -> None:
        self._client.close()

    def _log(self, entry: dict[str, Any]) -> None:
        if self._log_path is None:
            return
        line = json.dumps(entry, sort_keys=True, ensure_ascii=False)
        with self._log_lock, open(self._log_path, "a", encoding="utf-8") as fp:
            fp.write(line + "\n")

    def complete(self, prompt: str, slot: int, decoding: Mapping[str, Any] | None = None) -> tuple[str, int]:
        body: dict[str, Any] = {"model": self.model, "messages": [{"role": "user", "content": prompt}]}
        body.update(decoding or {})
        last = "no attempt made"
        for attempt in range(self.max_retries + 1):
            if attempt:
                self._sleep(self.backoff * 2 ** (attempt - 1))
            entry = {"ts": time.time(), "slot": slot, "attempt": attempt, "request": body}
            try:
                resp = self._client.post(self.endpoint, json=body)
            except httpx.TransportError as exc:
                last = f"transport error: {exc}"
                self._log({**entry, "error": last})
                continue
            if resp.status_code == 429 or resp.status_code >= 500:
                last = f"HTTP {resp.status_code}"
                self._log({**entry, "status": resp.status_code, "error": last})
                continue
            if resp.status_code >= 400:
                self._log({**entry, "status": resp.status_code, "error": resp.text[:500]})
                raise BackendUnavailable(f"slot {slot}: HTTP {resp.status_code}")
            try:
                text = _response_text(resp.json())
            except (ValueError, KeyError, IndexError, TypeError) as exc:
                self._log({**entry, "status": resp.status_code, "error": "unreadable body"})
                raise MalformedResponse(slot, f"unreadable response body ({exc})") from None
            self._log({**entry, "status": resp.status_code, "response": text})
            return text, attempt
        raise BackendUnavailable(f"slot {slot}: gave up after {self.max_retries + 1} attempts ({last})")


def _response_text(data: Any) -> str:
    if isinstance(data, dict):
        if "choices" in data:
            choice = data["choices"][0]
            msg = choice.get("message") or {}
            text = msg.get("content", choice.get("text"))
        else:
            text = data.get("content", data.get("output"))
        if isinstance(text, list):  # content blocks
            text = "".join(b.get("text", "") for b in text if isinstance(b, dict))
        if isinstance(text, str):
            return text
    raise ValueError("no text content in response")


_FENCE_RE = re.compile(r"```(?:xml|bpmn)?\s*\n(.*?)```", re.S)
_DEFS_RE = re.compile(r"<(?:[\w.-]+:)?definitions\b.*?</(?:[\w.-]+:)?definitions\s*>", re.S)


def extract_xml(text: str, slot: int) -> str:
    """Pull the BPMN document out of a chat reply (fenced or bare)."""
    for body in [m.group(1) for m in _FENCE_RE.finditer(text)] + [text]:
        m = _DEFS_RE.search(body)
        if m:
            head = body[: m.start()]
            decl = re.search(r"<\?xml[^>]*\?>\s*$", head)
            return (decl.group(0) if decl else "") + m.group(0)
    raise MalformedResponse(slot, "no BPMN definitions element in reply")


def generate(request: GenerationRequest, backend: Any, parallelism: int = 4) -> CandidateSet:
    """Produce ``request.count`` candidate slots; a slot failure never aborts the batch."""
    if isinstance(backend, ReplayBackend):
        return backend.replay(request.count)
    prompt = request.prompt()
    bid = getattr(backend, "backend_id", type(backend).__name__)

    def one(slot: int) -> Candidate:
        try:
            text, attempt = backend.complete(prompt, slot, request.decoding)
            return Candidate(slot, extract_xml(text, slot), Provenance(bid, attempt))
        except ProviderError as exc:
            log.warning("candidate slot %d failed: %s", slot, exc)
            return Candidate(slot, None, Provenance(bid), exc)

    with ThreadPoolExecutor(max_workers=max(1, parallelism)) as pool:
        return CandidateSet(tuple(pool.map(one, range(request.count))))


# --- KPI-mapping oracles ----------------------------------------------------


class LexicalOracle:
    """Offline mapping oracle: token overlap between a KPI definition and task names.

    The KPI name (text before the first colon) is weighed ahead of the rest of
    the definition; a task with no overlap loses to any task with some, and
    ties go to the earliest task in document order.
    """

    backend_id = "lexical"

    def __call__(self, definition: str, tasks: Sequence[FlowNode]) -> str:
        if not tasks:
            raise ProviderError("no tasks to choose from")
        title, _, rest = definition.partition(":")
        title_tokens, all_tokens = name_tokens(title), name_tokens(definition)
        best, best_score = tasks[0].id, (0, 0)
        for t in tasks:
            toks = name_tokens(t.name or t.id)
            score = (len(toks & title_tokens), len(toks & all_tokens))
            if score > best_score:
                best, best_score = t.id, score
        return best


class BackendOracle:
    """Asks a chat backend which task a KPI maps to; the reply must name a task id."""

    def __init__(self, backend: Any):
        self.backend = backend
        self.backend_id = getattr(backend, "backend_id", type(backend).__name__)
        self._calls = 0
        self._lock = threading.Lock()

    def __call__(self, definition: str, tasks: Sequence[FlowNode]) -> str:
        listing = "\n".join(f"{t.id}: {t.name}" for t in tasks)
        prompt = load_prompt("map_kpi").substitute(kpi=definition, tasks=listing)
        with self._lock:
            slot = self._calls
            self._calls += 1
        text, _ = self.backend.complete(prompt, slot)
        hits = [(m.start(), t.id) for t in tasks for m in [re.search(rf"(?<![\w-]){re.escape(t.id)}(?![\w-])", text)] if m]
        if not hits:
            raise MalformedResponse(slot, "reply names no task id")
        return min(hits)[1]


def oracle_from_backend(backend: Any) -> Callable[[str, Sequence[FlowNode]], str]:
    """Wrap a backend as a KPI-mapping oracle; replay and missing backends use the lexical oracle."""
    if backend is None or isinstance(backend, ReplayBackend):
        return LexicalOracle()
    return BackendOracle(backend)
