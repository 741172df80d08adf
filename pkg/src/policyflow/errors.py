"""Exception hierarchy shared across the toolkit."""

from __future__ import annotations


class PolicyFlowError(Exception):
    """Base class for every error raised by policyflow."""


# --- BPMN model -------------------------------------------------------------


class BpmnError(PolicyFlowError):
    pass


class MalformedXml(BpmnError):
    pass


class UnsupportedElement(BpmnError):
    def __init__(self, tag: str):
        super().__init__(f"unsupported BPMN element: {tag}")
        self.tag = tag


class DuplicateId(BpmnError):
    def __init__(self, element_id: str):
        super().__init__(f"duplicate id: {element_id}")
        self.element_id = element_id


class DanglingFlowEndpoint(BpmnError):
    def __init__(self, flow_id: str, endpoint: str = ""):
        super().__init__(f"sequence flow {flow_id} has unresolved endpoint {endpoint!r}")
        self.flow_id = flow_id
        self.endpoint = endpoint


class InvalidModel(BpmnError):
    pass


class UnknownNode(BpmnError, KeyError):
    def __init__(self, node_id: str):
        BpmnError.__init__(self, f"unknown node: {node_id}")
        self.node_id = node_id

    def __str__(self) -> str:
        return f"unknown node: {self.node_id}"


# --- expressions ------------------------------------------------------------


class ExpressionError(PolicyFlowError):
    pass


class ExpressionSyntaxError(ExpressionError):
    def __init__(self, position: int, message: str):
        super().__init__(f"{message} at position {position}")
        self.position = position


class LexError(ExpressionSyntaxError):
    def __init__(self, position: int, fragment: str):
        super().__init__(position, f"cannot tokenize {fragment!r}")
        self.fragment = fragment


class ParseError(ExpressionSyntaxError):
    def __init__(self, position: int, expected: str):
        super().__init__(position, f"expected {expected}")
        self.expected = expected


class UnboundVariable(ExpressionError, KeyError):
    def __init__(self, name: str):
        ExpressionError.__init__(self, f"unbound variable: {name}")
        self.name = name

    def __str__(self) -> str:
        return f"unbound variable: {self.name}"


class TypeMismatch(ExpressionError, TypeError):
    def __init__(self, op: str, left_kind: str, right_kind: str = ""):
        detail = f"{left_kind} {op} {right_kind}" if right_kind else f"{op} {left_kind}"
        ExpressionError.__init__(self, f"type mismatch: {detail}")
        self.op = op
        self.left_kind = left_kind
        self.right_kind = right_kind


class MalformedEntity(ExpressionError, ValueError):
    def __init__(self, position: int, fragment: str):
        ExpressionError.__init__(self, f"malformed entity {fragment!r} at position {position}")
        self.position = position
        self.fragment = fragment


# --- repair / engine --------------------------------------------------------


class IrreparableViolation(PolicyFlowError):
    pass


class EngineError(PolicyFlowError):
    pass


class UnparsableCondition(EngineError):
    def __init__(self, flow_id: str, cause: Exception):
        super().__init__(f"condition on flow {flow_id} does not parse: {cause}")
        self.flow_id = flow_id
        self.cause = cause


class UnparsableScript(EngineError):
    def __init__(self, task_id: str, cause: Exception | str):
        super().__init__(f"script on task {task_id} does not parse: {cause}")
        self.task_id = task_id
        self.cause = cause


class AugmentationInvariantError(EngineError):
    pass


class SchemaMismatch(EngineError):
    def __init__(self, missing=(), extra=(), detail: str = ""):
        parts = []
        if missing:
            parts.append(f"missing columns {sorted(missing)}")
        if extra:
            parts.append(f"unknown columns {sorted(extra)}")
        if detail:
            parts.append(detail)
        super().__init__("schema mismatch: " + "; ".join(parts))
        self.missing = tuple(sorted(missing))
        self.extra = tuple(sorted(extra))


class NoViableFlow(EngineError):
    pass


class StepLimitExceeded(EngineError):
    pass


class NotExecutable(EngineError):
    pass


# --- kpi / cohort / analysis ------------------------------------------------


class OracleError(PolicyFlowError):
    def __init__(self, repetition: int, message: str):
        super().__init__(f"mapping oracle failed on repetition {repetition}: {message}")
        self.repetition = repetition


class SpecError(PolicyFlowError, ValueError):
    pass


class HeaderMismatch(PolicyFlowError, ValueError):
    pass


class RowError(PolicyFlowError, ValueError):
    def __init__(self, line: int, column: str, reason: str):
        super().__init__(f"line {line}, column {column}: {reason}")
        self.line = line
        self.column = column
        self.reason = reason


class AnalysisError(PolicyFlowError, ValueError):
    pass


class EmptyInput(AnalysisError):
    pass


class InvalidDistribution(AnalysisError):
    pass


class LengthMismatch(AnalysisError):
    pass


class EmptyMatrix(AnalysisError):
    pass


# --- provider ---------------------------------------------------------------


class ProviderError(PolicyFlowError):
    pass


class BackendUnavailable(ProviderError):
    pass


class MalformedResponse(ProviderError):
    def __init__(self, slot: int, detail: str = ""):
        super().__init__(f"slot {slot}: malformed backend response{': ' + detail if detail else ''}")
        self.slot = slot


class FixtureMissing(ProviderError):
    def __init__(self, where: str, slot: int | None = None):
        msg = f"fixture missing: {where}" if slot is None else f"fixture missing for slot {slot}: {where}"
        super().__init__(msg)
        self.slot = slot


class ConfigError(PolicyFlowError):
    pass
