"""The Boolean condition language used in gateway conditions and script tasks.

Surface grammar (keywords are case-insensitive)::

    expr       := or_expr
    or_expr    := and_expr ("or" and_expr)*
    and_expr   := unary ("and" unary)*
    unary      := "not" group | "not" unary_not | primary
    primary    := predicate | group
    group      := "(" expr ")"
    predicate  := operand [cmp_op operand]
    cmp_op     := "==" | "!=" | ">=" | "<=" | ">" | "<"
    operand    := IDENT | NUMBER | STRING | "True" | "False"

``not`` must be followed by a parenthesized group (or another ``not``); a bare
``not x >= 5`` is rejected. Comparisons only ever relate two operands, so
``not`` > comparison > ``and`` > ``or``.
"""

from __future__ import annotations

import math
import re
from collections.abc import Mapping
from dataclasses import dataclass, field
from typing import Any, Iterable, Iterator, Sequence, Union

from .errors import (
    ExpressionError,
    LexError,
    MalformedEntity,
    ParseError,
    TypeMismatch,
    UnboundVariable,
)
from .schema import PatientSchema, ValueKind, kind_of

Value = Union[bool, float, str]

COMPARISON_OPS = ("==", "!=", ">=", "<=", ">", "<")
_OP_ALIASES = {"≥": ">=", "≤": "<=", "≠": "!="}
_IDENT_RE = re.compile(r"[A-Za-z_][A-Za-z0-9_]*\Z")


# --- AST --------------------------------------------------------------------


@dataclass(frozen=True)
class Literal:
    value: Value
    kind: ValueKind = field(init=False)

    def __post_init__(self):
        k = kind_of(self.value)
        if k is ValueKind.NUMBER:
            v = float(self.value)
            if not math.isfinite(v):
                raise ValueError("numeric literals must be finite")
            object.__setattr__(self, "value", v)
        object.__setattr__(self, "kind", k)


@dataclass(frozen=True)
class Variable:
    name: str

    def __post_init__(self):
        if not _IDENT_RE.match(self.name) or self.name.lower() in _KEYWORDS:
            raise ValueError(f"invalid variable name: {self.name!r}")


@dataclass(frozen=True)
class Compare:
    op: str
    left: "Operand"
    right: "Operand"

    def __post_init__(self):
        if self.op not in COMPARISON_OPS:
            raise ValueError(f"unknown comparison operator: {self.op!r}")
        for side in (self.left, self.right):
            if not isinstance(side, (Literal, Variable)):
                raise ValueError("comparison operands must be variables or literals")


@dataclass(frozen=True)
class Not:
    child: "Expr"


@dataclass(frozen=True)
class And:
    left: "Expr"
    right: "Expr"


@dataclass(frozen=True)
class Or:
    left: "Expr"
    right: "Expr"


Operand = Union[Literal, Variable]
Expr = Union[Literal, Variable, Compare, Not, And, Or]
TRUE = Literal(True)
FALSE = Literal(False)


def children(node: Expr) -> tuple[Expr, ...]:
    if isinstance(node, Compare):
        return (node.left, node.right)
    if isinstance(node, Not):
        return (node.child,)
    if isinstance(node, (And, Or)):
        return (node.left, node.right)
    return ()


def walk(node: Expr) -> Iterator[Expr]:
    """Pre-order traversal."""
    stack = [node]
    while stack:
        n = stack.pop()
        yield n
        stack.extend(reversed(children(n)))


def variables(node: Expr) -> list[str]:
    """Variable names in first-occurrence order."""
    seen: dict[str, None] = {}
    for n in walk(node):
        if isinstance(n, Variable):
            seen.setdefault(n.name, None)
    return list(seen)


def count_conjuncts(node: Expr | None) -> int:
    """AND-node count plus one; a missing condition counts as zero."""
    if node is None:
        return 0
    return 1 + sum(isinstance(n, And) for n in walk(node))


def conjoin(nodes: Sequence[Expr]) -> Expr:
    if not nodes:
        return TRUE
    out = nodes[0]
    for n in nodes[1:]:
        out = And(out, n)
    return out


def disjoin(nodes: Sequence[Expr]) -> Expr:
    if not nodes:
        return FALSE
    out = nodes[0]
    for n in nodes[1:]:
        out = Or(out, n)
    return out


# --- tokens -----------------------------------------------------------------


@dataclass(frozen=True)
class Predicate:
    expr: Expr
    pos: int = field(default=0, compare=False)


@dataclass(frozen=True)
class Connective:
    op: str  # "AND" | "OR" | "NOT"
    pos: int = field(default=0, compare=False)


@dataclass(frozen=True)
class GroupOpen:
    pos: int = field(default=0, compare=False)


@dataclass(frozen=True)
class GroupClose:
    pos: int = field(default=0, compare=False)


CriterionToken = Union[Predicate, Connective, GroupOpen, GroupClose]

AND_TOKEN = Connective("AND")
OR_TOKEN = Connective("OR")
NOT_TOKEN = Connective("NOT")

_KEYWORDS = {"and", "or", "not"}
_BOOLS = {"True": True, "False": False, "true": True, "false": False}
_NUMBER_RE = re.compile(r"(\d+\.?\d*|\.\d+)([eE][+-]?\d+)?")
_OP_CHARS = set("<>=!≥≤≠")


def _lex(text: str) -> list[tuple[str, Any, int]]:
    """Split text into (kind, payload, position) lexemes."""
    out: list[tuple[str, Any, int]] = []
    i, n = 0, len(text)
    while i < n:
        c = text[i]
        if c.isspace():
            i += 1
            continue
        if c == "(":
            out.append(("(", None, i))
            i += 1
            continue
        if c == ")":
            out.append((")", None, i))
            i += 1
            continue
        if c in _OP_CHARS:
            j = i
            while j < n and text[j] in _OP_CHARS:
                j += 1
            run = text[i:j]
            op = _OP_ALIASES.get(run, run)
            if op not in COMPARISON_OPS:
                raise LexError(i, run)
            out.append(("op", op, i))
            i = j
            continue
        prev_is_operand = bool(out) and out[-1][0] in ("operand", ")")
        if c.isdigit() or c == "." or (c in "+-" and not prev_is_operand and i + 1 < n
                                        and (text[i + 1].isdigit() or text[i + 1] == ".")):
            sign = 1.0
            j = i
            if c in "+-":
                sign = -1.0 if c == "-" else 1.0
                j += 1
            m = _NUMBER_RE.match(text, j)
            if not m:
                raise LexError(i, text[i:i + 8])
            end = m.end()
            if end < n and (text[end].isalnum() or text[end] in "_."):
                raise LexError(i, text[i:end + 1])
            out.append(("operand", Literal(sign * float(m.group(0))), i))
            i = end
            continue
        if c.isalpha() or c == "_":
            j = i
            while j < n and (text[j].isalnum() or text[j] == "_") and text[j].isascii():
                j += 1
            if j == i:
                raise LexError(i, c)
            word = text[i:j]
            if word.lower() in _KEYWORDS:
                out.append(("kw", word.upper(), i))
            elif word in _BOOLS:
                out.append(("operand", Literal(_BOOLS[word]), i))
            else:
                out.append(("operand", Variable(word), i))
            i = j
            continue
        if c in "'\"":
            j = text.find(c, i + 1)
            if j < 0:
                raise LexError(i, text[i:])
            out.append(("operand", Literal(text[i + 1:j]), i))
            i = j + 1
            continue
        raise LexError(i, c)
    return out


def tokenize(criterion_text: str) -> list[CriterionToken]:
    """Turn criterion text into predicates, connectives and group markers."""
    lexemes = _lex(criterion_text)
    tokens: list[CriterionToken] = []
    i = 0
    while i < len(lexemes):
        kind, payload, pos = lexemes[i]
        if kind == "(":
            tokens.append(GroupOpen(pos))
        elif kind == ")":
            tokens.append(GroupClose(pos))
        elif kind == "kw":
            tokens.append(Connective(payload, pos))
        elif kind == "op":
            raise LexError(pos, payload)
        else:
            if i + 1 < len(lexemes) and lexemes[i + 1][0] == "op":
                op_pos = lexemes[i + 1][2]
                if i + 2 >= len(lexemes) or lexemes[i + 2][0] != "operand":
                    end = lexemes[i + 2][2] if i + 2 < len(lexemes) else len(criterion_text)
                    raise LexError(op_pos, criterion_text[pos:end].strip())
                tokens.append(Predicate(Compare(lexemes[i + 1][1], payload, lexemes[i + 2][1]), pos))
                i += 3
                continue
            tokens.append(Predicate(payload, pos))
        i += 1
    return tokens


# --- parsing ----------------------------------------------------------------


class _Parser:
    def __init__(self, tokens: Sequence[CriterionToken], loose: str, tight: str):
        self.tokens = list(tokens)
        self.i = 0
        self.loose = loose
        self.tight = tight

    def peek(self) -> CriterionToken | None:
        return self.tokens[self.i] if self.i < len(self.tokens) else None

    def where(self) -> int:
        tok = self.peek()
        if tok is not None:
            return tok.pos
        return (self.tokens[-1].pos + 1) if self.tokens else 0

    def is_conn(self, op: str) -> bool:
        tok = self.peek()
        return isinstance(tok, Connective) and tok.op == op

    def parse(self) -> Expr:
        if not self.tokens:
            raise ParseError(0, "an expression")
        node = self.level(self.loose)
        if self.peek() is not None:
            raise ParseError(self.where(), "'and', 'or' or end of input")
        return node

    def level(self, op: str) -> Expr:
        sub = (lambda: self.level(self.tight)) if op == self.loose else self.unary
        node = sub()
        while self.is_conn(op):
            self.i += 1
            right = sub()
            node = And(node, right) if op == "AND" else Or(node, right)
        return node

    def unary(self) -> Expr:
        tok = self.peek()
        if isinstance(tok, Connective) and tok.op == "NOT":
            self.i += 1
            nxt = self.peek()
            if isinstance(nxt, GroupOpen) or (isinstance(nxt, Connective) and nxt.op == "NOT"):
                return Not(self.unary())
            raise ParseError(self.where(), "'(' after 'not'")
        return self.primary()

    def primary(self) -> Expr:
        tok = self.peek()
        if isinstance(tok, Predicate):
            self.i += 1
            return tok.expr
        if isinstance(tok, GroupOpen):
            self.i += 1
            node = self.level(self.loose)
            if not isinstance(self.peek(), GroupClose):
                raise ParseError(self.where(), "')'")
            self.i += 1
            return node
        raise ParseError(self.where(), "a predicate or '('")


def parse(tokens: Sequence[CriterionToken]) -> Expr:
    """Standard precedence: ``not`` > comparison > ``and`` > ``or``, left-associative."""
    return _Parser(tokens, "OR", "AND").parse()


def parse_expression(text: str) -> Expr:
    return parse(tokenize(text))


def resolve_scope(tokens: Sequence[CriterionToken], grouping_hint=None) -> Expr:
    """Pick a reading for narrative criteria that mix ``and`` with ``or`` without parentheses.

    With no hint the conjunctive (narrower) reading is used: ``or`` groups nest
    under the ``and`` spine, so ``A and B or C`` becomes ``A and (B or C)``.
    ``grouping_hint`` may be ``"disjunctive"`` (standard precedence), or a
    sequence of ``(start, stop)`` token-index spans that document formatting
    marks as groups; spans are parenthesized and the rest parsed with standard
    precedence.
    """
    if grouping_hint is None or grouping_hint == "conjunctive":
        return _Parser(tokens, "AND", "OR").parse()
    if grouping_hint in ("disjunctive", "standard"):
        return parse(tokens)
    opens: dict[int, int] = {}
    closes: dict[int, int] = {}
    for start, stop in grouping_hint:
        if not 0 <= start < stop <= len(tokens):
            raise ParseError(start, "a grouping span inside the token list")
        opens[start] = opens.get(start, 0) + 1
        closes[stop] = closes.get(stop, 0) + 1
    grouped: list[CriterionToken] = []
    for idx in range(len(tokens) + 1):
        grouped.extend(GroupClose(tokens[idx - 1].pos) for _ in range(closes.get(idx, 0)))
        if idx < len(tokens):
            grouped.extend(GroupOpen(tokens[idx].pos) for _ in range(opens.get(idx, 0)))
            grouped.append(tokens[idx])
    return parse(grouped)


# --- printing ---------------------------------------------------------------


def format_number(x: float) -> str:
    x = float(x)
    if x.is_integer() and abs(x) < 1e15:
        return str(int(x))
    return repr(x)


def _atom(node: Operand) -> str:
    if isinstance(node, Variable):
        return node.name
    v = node.value
    if isinstance(v, bool):
        return "True" if v else "False"
    if isinstance(v, float):
        return format_number(v)
    if "'" not in v:
        return f"'{v}'"
    if '"' not in v:
        return f'"{v}"'
    raise ValueError(f"category literal cannot contain both quote characters: {v!r}")


def generate_expression_text(ast: Expr) -> str:
    """Depth-first rendering; mixed and/or scopes are always parenthesized."""
    if isinstance(ast, (Literal, Variable)):
        return _atom(ast)
    if isinstance(ast, Compare):
        return f"{_atom(ast.left)} {ast.op} {_atom(ast.right)}"
    if isinstance(ast, Not):
        return f"not ({generate_expression_text(ast.child)})"
    word = "and" if isinstance(ast, And) else "or"

    def side(child: Expr, right: bool) -> str:
        text = generate_expression_text(child)
        if isinstance(child, (And, Or)) and (type(child) is not type(ast) or right):
            return f"({text})"
        return text

    return f"{side(ast.left, False)} {word} {side(ast.right, True)}"


_FLIP = {"==": "==", "!=": "!=", ">=": "<=", "<=": ">=", ">": "<", "<": ">"}


def normalize(ast: Expr) -> str:
    """Canonical string: fully parenthesized, single-spaced, and/or operands sorted.

    The format is compared byte-wise by the augmentation invariant; keep it stable.
    """
    if isinstance(ast, (Literal, Variable)):
        return _atom(ast)
    if isinstance(ast, Compare):
        left, op, right = ast.left, ast.op, ast.right
        if isinstance(left, Literal) and isinstance(right, Variable):
            left, op, right = right, _FLIP[op], left
        return f"({_atom(left)} {op} {_atom(right)})"
    if isinstance(ast, Not):
        inner = normalize(ast.child)
        return f"(not {inner})" if inner.startswith("(") else f"(not ({inner}))"
    kind = type(ast)
    parts: list[str] = []
    stack = [ast]
    while stack:
        n = stack.pop()
        if type(n) is kind:
            stack.extend((n.right, n.left))
        else:
            parts.append(normalize(n))
    word = " and " if kind is And else " or "
    return "(" + word.join(sorted(parts)) + ")"


# --- evaluation -------------------------------------------------------------


def _kind_name(v: Any) -> str:
    try:
        return kind_of(v).value
    except TypeError:
        return type(v).__name__


def _ordered_column(node: Compare, schema: PatientSchema | None):
    if schema is None:
        return None
    for side in (node.left, node.right):
        if isinstance(side, Variable):
            col = schema.get(side.name)
            if col is not None and col.ordered:
                return col
    return None


def _compare(op: str, a: Any, b: Any) -> bool:
    if op == "==":
        return a == b
    if op == "!=":
        return a != b
    if op == ">=":
        return a >= b
    if op == "<=":
        return a <= b
    if op == ">":
        return a > b
    return a < b


def evaluate(ast: Expr, record: Any, schema: PatientSchema | None = None) -> Value:
    """Evaluate with strict semantics; every operand is evaluated, nothing is coerced.

    ``record`` is any mapping of names to values, or an object with a ``values``
    mapping. ``schema`` supplies grade orderings for ordered categories.
    """
    env = record if isinstance(record, Mapping) else record.values
    return _eval(ast, env, schema)


def _eval(node: Expr, env: Mapping[str, Any], schema: PatientSchema | None) -> Value:
    if isinstance(node, Literal):
        return node.value
    if isinstance(node, Variable):
        try:
            return env[node.name]
        except KeyError:
            raise UnboundVariable(node.name) from None
    if isinstance(node, Compare):
        a = _eval(node.left, env, schema)
        b = _eval(node.right, env, schema)
        ka, kb = _kind_name(a), _kind_name(b)
        if ka != kb or ka not in ("number", "boolean", "category"):
            raise TypeMismatch(node.op, ka, kb)
        if ka == "number":
            return _compare(node.op, float(a), float(b))
        if node.op in ("==", "!="):
            return _compare(node.op, a, b)
        if ka == "category":
            col = _ordered_column(node, schema)
            if col is not None:
                ra, rb = col.grade_rank(a), col.grade_rank(b)
                if ra is not None and rb is not None:
                    return _compare(node.op, ra, rb)
        raise TypeMismatch(node.op, ka, kb)
    if isinstance(node, Not):
        v = _eval(node.child, env, schema)
        if not isinstance(v, bool):
            raise TypeMismatch("not", _kind_name(v))
        return not v
    if isinstance(node, (And, Or)):
        a = _eval(node.left, env, schema)
        b = _eval(node.right, env, schema)
        word = "and" if isinstance(node, And) else "or"
        if not isinstance(a, bool) or not isinstance(b, bool):
            raise TypeMismatch(word, _kind_name(a), _kind_name(b))
        return (a and b) if word == "and" else (a or b)
    raise ExpressionError(f"not an expression node: {node!r}")


# --- XML entities -----------------------------------------------------------

_ENCODE = {"&": "&amp;", "<": "&lt;", ">": "&gt;", '"': "&quot;", "'": "&apos;"}
_NAMED = {"amp": "&", "lt": "<", "gt": ">", "quot": '"', "apos": "'"}
_ENTITY_RE = re.compile(r"&(?:(amp|lt|gt|quot|apos)|#([0-9]+)|#x([0-9a-fA-F]+));")


def encode_entities(text: str) -> str:
    return "".join(_ENCODE.get(c, c) for c in text)


def decode_entities(text: str) -> str:
    out: list[str] = []
    i = 0
    while True:
        j = text.find("&", i)
        if j < 0:
            out.append(text[i:])
            return "".join(out)
        out.append(text[i:j])
        m = _ENTITY_RE.match(text, j)
        if m is None:
            end = text.find(";", j)
            frag = text[j:end + 1] if 0 <= end < j + 12 else text[j:j + 8]
            raise MalformedEntity(j, frag)
        if m.group(1):
            out.append(_NAMED[m.group(1)])
        else:
            code = int(m.group(2)) if m.group(2) else int(m.group(3), 16)
            try:
                out.append(chr(code))
            except (ValueError, OverflowError):
                raise MalformedEntity(j, m.group(0)) from None
        i = m.end()


def is_entity_encoded(raw: str) -> bool:
    """True when raw XML text escapes every markup-significant character (<, >, &)."""
    if "<" in raw or ">" in raw:
        return False
    try:
        decode_entities(raw)
    except MalformedEntity:
        return False
    return True


# --- plausibility -----------------------------------------------------------


def check_threshold_plausibility(ast: Expr, schema: PatientSchema) -> list[str]:
    """Warn about numeric literals compared against a column outside its plausible range."""
    warnings: list[str] = []
    for node in walk(ast):
        if not isinstance(node, Compare):
            continue
        pairs = ((node.left, node.right), (node.right, node.left))
        for var, lit in pairs:
            if not (isinstance(var, Variable) and isinstance(lit, Literal)):
                continue
            if lit.kind is not ValueKind.NUMBER:
                continue
            col = schema.get(var.name)
            if col is None or col.plausible_range is None:
                continue
            lo, hi = col.plausible_range
            if not lo <= lit.value <= hi:
                warnings.append(
                    f"{var.name} {node.op} {format_number(lit.value)}: threshold outside "
                    f"plausible range [{format_number(lo)}, {format_number(hi)}]; flag for manual review"
                )
    return warnings


def substitute(ast: Expr, mapping: Mapping[str, Expr | Iterable[str]]) -> Expr:
    """Replace variables; a name mapped to several columns becomes an OR of copies of its comparison."""
    def targets(name: str) -> list[str] | None:
        v = mapping.get(name)
        if v is None:
            return None
        return [v] if isinstance(v, str) else list(v)

    def rec(node: Expr) -> Expr:
        if isinstance(node, Variable):
            names = targets(node.name)
            return disjoin([Variable(n) for n in names]) if names else node
        if isinstance(node, Compare):
            out: list[Compare] = [node]
            for attr in ("left", "right"):
                side = getattr(node, attr)
                if isinstance(side, Variable) and targets(side.name):
                    out = [
                        Compare(c.op, Variable(n), c.right) if attr == "left" else Compare(c.op, c.left, Variable(n))
                        for c in out
                        for n in targets(side.name)
                    ]
            return disjoin(out)
        if isinstance(node, Not):
            return Not(rec(node.child))
        if isinstance(node, And):
            return And(rec(node.left), rec(node.right))
        if isinstance(node, Or):
            return Or(rec(node.left), rec(node.right))
        return node

    return rec(ast)


def drop_conjunct(ast: Expr, name: str) -> Expr | None:
    """Delete the smallest enclosing conjunct mentioning ``name``.

    Returns None when the variable is not nested under any ``and`` (the whole
    expression is the conjunct).
    """
    if name not in variables(ast):
        return ast
    if isinstance(ast, And):
        left_has = name in variables(ast.left)
        right_has = name in variables(ast.right)
        left = drop_conjunct(ast.left, name) if left_has else ast.left
        right = drop_conjunct(ast.right, name) if right_has else ast.right
        if left is None and right is None:
            return None
        if left is None:
            return right
        if right is None:
            return left
        return And(left, right)
    if isinstance(ast, (Or, Not)):
        # descend only if an inner conjunction can absorb the deletion
        if isinstance(ast, Not):
            inner = drop_conjunct(ast.child, name) if _has_and_above(ast.child, name) else None
            return Not(inner) if inner is not None else None
        parts = []
        for side in (ast.left, ast.right):
            if name in variables(side):
                if not _has_and_above(side, name):
                    return None
                side = drop_conjunct(side, name)
                if side is None:
                    return None
            parts.append(side)
        return Or(parts[0], parts[1])
    return None


def _has_and_above(ast: Expr, name: str) -> bool:
    """Whether every occurrence of ``name`` in ``ast`` sits under some ``and`` node."""
    if isinstance(ast, And):
        return True
    if isinstance(ast, Not):
        return _has_and_above(ast.child, name)
    if isinstance(ast, Or):
        return all(_has_and_above(s, name) for s in (ast.left, ast.right) if name in variables(s))
    return False
