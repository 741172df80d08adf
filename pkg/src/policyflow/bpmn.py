"""BPMN 2.0 process models restricted to the decision-centric construct palette.

Parsing goes through expat rather than ElementTree because condition bodies
must be kept byte-for-byte as written (entity-encoded or not); the structural
validator needs to see whether ``>`` was escaped.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from enum import Enum
from functools import cached_property
from typing import Iterable
from xml.parsers import expat

from .errors import (
    DanglingFlowEndpoint,
    DuplicateId,
    InvalidModel,
    MalformedXml,
    UnknownNode,
    UnsupportedElement,
)
from .expression import Expr, decode_entities, encode_entities, generate_expression_text, parse_expression
from .errors import ExpressionError

log = logging.getLogger(__name__)

BPMN_NS = "http://www.omg.org/spec/BPMN/20100524/MODEL"
BPMNDI_NS = "http://www.omg.org/spec/BPMN/20100524/DI"
DC_NS = "http://www.omg.org/spec/DD/20100524/DC"
DI_NS = "http://www.omg.org/spec/DD/20100524/DI"
XSI_NS = "http://www.w3.org/2001/XMLSchema-instance"


class NodeKind(str, Enum):
    START_EVENT = "startEvent"
    END_EVENT = "endEvent"
    EXCLUSIVE_GATEWAY = "exclusiveGateway"
    SCRIPT_TASK = "scriptTask"
    SERVICE_TASK = "serviceTask"
    USER_TASK = "userTask"

    @property
    def is_task(self) -> bool:
        return self in (NodeKind.SCRIPT_TASK, NodeKind.SERVICE_TASK, NodeKind.USER_TASK)


TASK_KINDS = frozenset(k for k in NodeKind if k.is_task)


@dataclass(frozen=True)
class FlowNode:
    id: str
    kind: NodeKind
    name: str = ""
    script: str | None = None
    default_flow: str | None = None

    def __post_init__(self):
        if not self.id:
            raise InvalidModel("node id must be non-empty")
        if self.kind is NodeKind.SCRIPT_TASK and self.script is None:
            object.__setattr__(self, "script", "")
        if self.kind is not NodeKind.SCRIPT_TASK and self.script is not None:
            raise InvalidModel(f"{self.id}: only script tasks carry a script")
        if self.default_flow is not None and self.kind is not NodeKind.EXCLUSIVE_GATEWAY:
            raise InvalidModel(f"{self.id}: only exclusive gateways carry a default flow")


def xml_text_value(raw: str) -> str | None:
    """Character data denoted by a raw XML content fragment, or None if it is not well-formed."""
    parser = expat.ParserCreate()
    chunks: list[str] = []
    parser.CharacterDataHandler = chunks.append
    depth = [0]

    def start(name, attrs):
        depth[0] += 1
        if depth[0] > 1:
            raise ValueError("nested element")

    parser.StartElementHandler = start
    try:
        parser.Parse(f"<x>{raw}</x>".encode("utf-8"), True)
    except (expat.ExpatError, ValueError):
        return None
    return "".join(chunks)


@dataclass(frozen=True)
class SequenceFlow:
    id: str
    source: str
    target: str
    # The condition body exactly as it appears (or will appear) in the XML.
    condition_text: str | None = None

    def __post_init__(self):
        if not self.id:
            raise InvalidModel("flow id must be non-empty")
        if not self.source or not self.target:
            raise DanglingFlowEndpoint(self.id, self.source if not self.source else self.target)

    @classmethod
    def conditional(cls, id: str, source: str, target: str, expression: str | Expr) -> "SequenceFlow":
        """Build a flow from a plain (unencoded) expression or an AST."""
        text = expression if isinstance(expression, str) else generate_expression_text(expression)
        return cls(id, source, target, encode_entities(text))

    @property
    def expression_text(self) -> str | None:
        """The decoded expression text, or None when absent or not decodable."""
        if self.condition_text is None:
            return None
        value = xml_text_value(self.condition_text)
        if value is None:
            try:
                value = decode_entities(self.condition_text)
            except ExpressionError:
                return None
        return value

    @property
    def condition(self) -> Expr | None:
        """Parsed condition; None when absent or when the text does not parse."""
        text = self.expression_text
        if text is None or not text.strip():
            return None
        try:
            return parse_expression(text)
        except (ExpressionError, ValueError):
            return None

    @property
    def has_condition(self) -> bool:
        return self.condition_text is not None and self.condition_text.strip() != ""


@dataclass(frozen=True)
class ProcessModel:
    process_id: str
    nodes: tuple[FlowNode, ...]
    flows: tuple[SequenceFlow, ...]
    document_order: tuple[str, ...] = ()
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "nodes", tuple(self.nodes))
        object.__setattr__(self, "flows", tuple(self.flows))
        seen: set[str] = set()
        for el in (*self.nodes, *self.flows):
            if el.id in seen:
                raise DuplicateId(el.id)
            seen.add(el.id)
        node_ids = {n.id for n in self.nodes}
        for f in self.flows:
            for end in (f.source, f.target):
                if end not in node_ids:
                    raise DanglingFlowEndpoint(f.id, end)
        outgoing = {}
        for f in self.flows:
            outgoing.setdefault(f.source, set()).add(f.id)
        for n in self.nodes:
            if n.default_flow is not None and n.default_flow not in outgoing.get(n.id, ()):
                raise InvalidModel(f"{n.id}: default flow {n.default_flow} is not one of its outgoing flows")
        order = tuple(self.document_order)
        if not order:
            order = tuple(el.id for el in (*self.nodes, *self.flows))
        elif set(order) != seen or len(order) != len(seen):
            raise InvalidModel("document_order must list every node and flow id exactly once")
        object.__setattr__(self, "document_order", order)
        pos = {eid: i for i, eid in enumerate(order)}
        object.__setattr__(self, "nodes", tuple(sorted(self.nodes, key=lambda n: pos[n.id])))
        object.__setattr__(self, "flows", tuple(sorted(self.flows, key=lambda f: pos[f.id])))

    @cached_property
    def _node_index(self) -> dict[str, FlowNode]:
        return {n.id: n for n in self.nodes}

    @cached_property
    def _flow_index(self) -> dict[str, SequenceFlow]:
        return {f.id: f for f in self.flows}

    @cached_property
    def _adjacency(self) -> tuple[dict[str, list[str]], dict[str, list[str]]]:
        inc: dict[str, list[str]] = {n.id: [] for n in self.nodes}
        out: dict[str, list[str]] = {n.id: [] for n in self.nodes}
        for f in self.flows:
            out[f.source].append(f.id)
            inc[f.target].append(f.id)
        return inc, out

    @cached_property
    def position(self) -> dict[str, int]:
        return {eid: i for i, eid in enumerate(self.document_order)}

    @property
    def ids(self) -> frozenset[str]:
        return frozenset(self.document_order)

    def node(self, node_id: str) -> FlowNode:
        try:
            return self._node_index[node_id]
        except KeyError:
            raise UnknownNode(node_id) from None

    def flow(self, flow_id: str) -> SequenceFlow:
        return self._flow_index[flow_id]

    def has_node(self, node_id: str) -> bool:
        return node_id in self._node_index

    def has_flow(self, flow_id: str) -> bool:
        return flow_id in self._flow_index

    def incoming(self, node_id: str) -> list[str]:
        self.node(node_id)
        return list(self._adjacency[0][node_id])

    def outgoing(self, node_id: str) -> list[str]:
        self.node(node_id)
        return list(self._adjacency[1][node_id])

    def nodes_of(self, *kinds: NodeKind) -> list[FlowNode]:
        return [n for n in self.nodes if n.kind in kinds]

    @property
    def tasks(self) -> list[FlowNode]:
        return [n for n in self.nodes if n.kind.is_task]

    def is_split(self, node_id: str) -> bool:
        return self.node(node_id).kind is NodeKind.EXCLUSIVE_GATEWAY and len(self.outgoing(node_id)) > 1

    def is_merge(self, node_id: str) -> bool:
        return self.node(node_id).kind is NodeKind.EXCLUSIVE_GATEWAY and len(self.incoming(node_id)) > 1

    def reachable_from(self, node_id: str) -> set[str]:
        seen = {node_id}
        stack = [node_id]
        while stack:
            cur = stack.pop()
            for fid in self._adjacency[1][cur]:
                t = self._flow_index[fid].target
                if t not in seen:
                    seen.add(t)
                    stack.append(t)
        return seen

    def with_elements(self, nodes: Iterable[FlowNode], flows: Iterable[SequenceFlow],
                      document_order: Iterable[str] | None = None) -> "ProcessModel":
        nodes, flows = tuple(nodes), tuple(flows)
        if document_order is None:
            keep = {el.id for el in (*nodes, *flows)}
            order = [i for i in self.document_order if i in keep]
            known = set(order)
            order += [el.id for el in (*nodes, *flows) if el.id not in known]
            document_order = order
        return replace(self, nodes=nodes, flows=flows, document_order=tuple(document_order))


def topology(model: ProcessModel, node_id: str) -> tuple[list[str], list[str]]:
    """Incoming and outgoing flow ids of a node, in document order."""
    return model.incoming(node_id), model.outgoing(node_id)


# --- parsing ----------------------------------------------------------------

_NODE_TAGS = {k.value: k for k in NodeKind}
# BPMN children that carry no semantics for this palette
_IGNORED_BPMN = {"documentation", "extensionElements", "incoming", "outgoing", "textAnnotation", "association"}


class _El:
    __slots__ = ("ns", "tag", "attrs", "children", "text", "raw_start", "raw_end", "line")

    def __init__(self, ns, tag, attrs, line):
        self.ns, self.tag, self.attrs, self.line = ns, tag, attrs, line
        self.children: list[_El] = []
        self.text: list[str] = []
        self.raw_start: int | None = None
        self.raw_end: int | None = None


def _split(name: str) -> tuple[str, str]:
    if " " in name:
        ns, local = name.split(" ", 1)
        return ns, local
    return "", name


def _read_tree(data: bytes) -> _El:
    parser = expat.ParserCreate(namespace_separator=" ")
    stack: list[_El] = []
    root: list[_El] = []

    def start(name, attrs):
        ns, tag = _split(name)
        plain = {}
        for k, v in attrs.items():
            _, local = _split(k)
            plain.setdefault(local, v)
        el = _El(ns, tag, plain, parser.CurrentLineNumber)
        if stack:
            stack[-1].children.append(el)
        else:
            root.append(el)
        stack.append(el)

    def end(name):
        el = stack.pop()
        if el.raw_start is not None:
            el.raw_end = parser.CurrentByteIndex

    def chars(text):
        el = stack[-1]
        if el.raw_start is None:
            el.raw_start = parser.CurrentByteIndex
        el.text.append(text)

    def cdata_start():
        el = stack[-1]
        if el.raw_start is None:
            el.raw_start = parser.CurrentByteIndex

    parser.StartElementHandler = start
    parser.EndElementHandler = end
    parser.CharacterDataHandler = chars
    parser.StartCdataSectionHandler = cdata_start
    try:
        parser.Parse(data, True)
    except expat.ExpatError as exc:
        raise MalformedXml(str(exc)) from None
    return root[0]


def parse_bpmn(xml_text: str | bytes) -> ProcessModel:
    """Parse BPMN 2.0 XML into a ProcessModel, rejecting anything outside the palette."""
    data = xml_text.encode("utf-8") if isinstance(xml_text, str) else xml_text
    root = _read_tree(data)
    if root.ns != BPMN_NS or root.tag != "definitions":
        raise MalformedXml("root element must be BPMN 2.0 <definitions>")
    processes = []
    for child in root.children:
        if child.ns == BPMN_NS and child.tag == "process":
            processes.append(child)
        elif child.ns == BPMNDI_NS or (child.ns == BPMN_NS and child.tag in _IGNORED_BPMN):
            continue
        elif child.ns != BPMN_NS:
            continue  # vendor extensions at definitions level
        else:
            raise UnsupportedElement(child.tag)
    if not processes:
        raise MalformedXml("no <process> element")
    if len(processes) > 1:
        log.warning("definitions contains %d processes; only the first is used", len(processes))
    proc = processes[0]

    nodes: list[FlowNode] = []
    flows: list[SequenceFlow] = []
    order: list[str] = []
    seen: set[str] = set()
    for el in proc.children:
        if el.ns != BPMN_NS:
            raise UnsupportedElement(f"{{{el.ns}}}{el.tag}")
        if el.tag in _IGNORED_BPMN:
            continue
        eid = el.attrs.get("id", "")
        if not eid:
            raise MalformedXml(f"<{el.tag}> on line {el.line} has no id")
        if eid in seen:
            raise DuplicateId(eid)
        seen.add(eid)
        if el.tag in _NODE_TAGS:
            kind = _NODE_TAGS[el.tag]
            script = None
            for sub in el.children:
                if sub.ns == BPMN_NS and sub.tag in _IGNORED_BPMN:
                    continue
                if kind is NodeKind.SCRIPT_TASK and sub.ns == BPMN_NS and sub.tag == "script":
                    script = "".join(sub.text)
                    continue
                if sub.ns != BPMN_NS:
                    continue
                raise UnsupportedElement(sub.tag)
            if kind is NodeKind.SCRIPT_TASK and script is None:
                script = ""
            default = el.attrs.get("default") if kind is NodeKind.EXCLUSIVE_GATEWAY else None
            nodes.append(FlowNode(eid, kind, el.attrs.get("name", ""), script, default or None))
        elif el.tag == "sequenceFlow":
            cond = None
            for sub in el.children:
                if sub.ns == BPMN_NS and sub.tag == "conditionExpression":
                    if sub.raw_start is None:
                        cond = ""
                    else:
                        cond = data[sub.raw_start:sub.raw_end].decode("utf-8")
                elif sub.ns == BPMN_NS and sub.tag not in _IGNORED_BPMN:
                    raise UnsupportedElement(sub.tag)
            src, tgt = el.attrs.get("sourceRef", ""), el.attrs.get("targetRef", "")
            if not src or not tgt:
                raise DanglingFlowEndpoint(eid, src or tgt)
            flows.append(SequenceFlow(eid, src, tgt, cond))
        else:
            raise UnsupportedElement(el.tag)
        order.append(eid)
    return ProcessModel(proc.attrs.get("id", "Process_1"), tuple(nodes), tuple(flows), tuple(order),
                        proc.attrs.get("name", ""))


# --- serialization ----------------------------------------------------------

_SIZES = {
    NodeKind.START_EVENT: (36, 36),
    NodeKind.END_EVENT: (36, 36),
    NodeKind.EXCLUSIVE_GATEWAY: (50, 50),
}


def _attr(value: str) -> str:
    return encode_entities(value).replace("\n", "&#10;").replace("\t", "&#9;").replace("\r", "&#13;")


def _content(raw: str) -> str:
    """Raw condition text is kept verbatim when it is valid XML content; otherwise it is encoded."""
    if xml_text_value(raw) is not None:
        return raw
    return encode_entities(raw)


def layout(model: ProcessModel) -> dict[str, tuple[int, int, int, int]]:
    """Deterministic left-to-right layered layout: (x, y, width, height) per node."""
    layer: dict[str, int] = {}
    starts = [n.id for n in model.nodes if not model.incoming(n.id)] or [model.nodes[0].id]
    frontier = list(starts)
    for s in starts:
        layer[s] = 0
    # longest-path layering, bounded so cycles cannot loop forever
    for _ in range(len(model.nodes)):
        nxt = []
        for nid in frontier:
            for fid in model.outgoing(nid):
                t = model.flow(fid).target
                if layer.get(t, -1) < layer[nid] + 1 and layer[nid] + 1 < len(model.nodes):
                    layer[t] = layer[nid] + 1
                    nxt.append(t)
        if not nxt:
            break
        frontier = list(dict.fromkeys(nxt))
    for n in model.nodes:
        layer.setdefault(n.id, 0)
    rows: dict[int, int] = {}
    boxes = {}
    for n in model.nodes:
        col = layer[n.id]
        row = rows.get(col, 0)
        rows[col] = row + 1
        w, h = _SIZES.get(n.kind, (100, 80))
        cx, cy = 150 + 180 * col, 120 + 140 * row
        boxes[n.id] = (cx - w // 2, cy - h // 2, w, h)
    return boxes


def serialize_bpmn(model: ProcessModel, with_diagram: bool = True) -> str:
    out = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<bpmn:definitions xmlns:bpmn="{BPMN_NS}" xmlns:bpmndi="{BPMNDI_NS}" '
        f'xmlns:dc="{DC_NS}" xmlns:di="{DI_NS}" xmlns:xsi="{XSI_NS}" '
        'id="Definitions_1" targetNamespace="http://bpmn.io/schema/bpmn">',
    ]
    pname = f' name="{_attr(model.name)}"' if model.name else ""
    out.append(f'  <bpmn:process id="{_attr(model.process_id)}"{pname} isExecutable="true">')
    for eid in model.document_order:
        if model.has_node(eid):
            n = model.node(eid)
            attrs = f'id="{_attr(n.id)}" name="{_attr(n.name)}"'
            if n.default_flow:
                attrs += f' default="{_attr(n.default_flow)}"'
            body = []
            for fid in model.incoming(n.id):
                body.append(f"      <bpmn:incoming>{_attr(fid)}</bpmn:incoming>")
            for fid in model.outgoing(n.id):
                body.append(f"      <bpmn:outgoing>{_attr(fid)}</bpmn:outgoing>")
            if n.kind is NodeKind.SCRIPT_TASK:
                body.append(f"      <bpmn:script>{encode_entities(n.script or '')}</bpmn:script>")
            tag = f"bpmn:{n.kind.value}"
            if body:
                out.append(f"    <{tag} {attrs}>")
                out.extend(body)
                out.append(f"    </{tag}>")
            else:
                out.append(f"    <{tag} {attrs} />")
        else:
            f = model.flow(eid)
            attrs = f'id="{_attr(f.id)}" sourceRef="{_attr(f.source)}" targetRef="{_attr(f.target)}"'
            if f.condition_text is None:
                out.append(f"    <bpmn:sequenceFlow {attrs} />")
            else:
                out.append(f"    <bpmn:sequenceFlow {attrs}>")
                out.append(
                    '      <bpmn:conditionExpression xsi:type="bpmn:tFormalExpression">'
                    f"{_content(f.condition_text)}</bpmn:conditionExpression>"
                )
                out.append("    </bpmn:sequenceFlow>")
    out.append("  </bpmn:process>")
    if with_diagram and model.nodes:
        boxes = layout(model)
        out.append('  <bpmndi:BPMNDiagram id="BPMNDiagram_1">')
        out.append(f'    <bpmndi:BPMNPlane id="BPMNPlane_1" bpmnElement="{_attr(model.process_id)}">')
        for n in model.nodes:
            x, y, w, h = boxes[n.id]
            out.append(f'      <bpmndi:BPMNShape id="{_attr(n.id)}_di" bpmnElement="{_attr(n.id)}">')
            out.append(f'        <dc:Bounds x="{x}" y="{y}" width="{w}" height="{h}" />')
            out.append("      </bpmndi:BPMNShape>")
        for f in model.flows:
            sx, sy, sw, sh = boxes[f.source]
            tx, ty, tw, th = boxes[f.target]
            out.append(f'      <bpmndi:BPMNEdge id="{_attr(f.id)}_di" bpmnElement="{_attr(f.id)}">')
            out.append(f'        <di:waypoint x="{sx + sw}" y="{sy + sh // 2}" />')
            out.append(f'        <di:waypoint x="{tx}" y="{ty + th // 2}" />')
            out.append("      </bpmndi:BPMNEdge>")
        out.append("    </bpmndi:BPMNPlane>")
        out.append("  </bpmndi:BPMNDiagram>")
    out.append("</bpmn:definitions>")
    return "\n".join(out) + "\n"
