"""Script-task programs: straight-line assignments such as ``eligible = HbA1c >= 6.5``."""

from __future__ import annotations

import re
from dataclasses import dataclass

from .errors import ExpressionSyntaxError, ParseError
from .expression import Expr, generate_expression_text, parse_expression, variables

_ASSIGN_RE = re.compile(r"\s*([A-Za-z_][A-Za-z0-9_]*)\s*=(?!=)(.*)\Z", re.S)


@dataclass(frozen=True)
class Assign:
    target: str
    rhs: Expr


@dataclass(frozen=True)
class ScriptProgram:
    statements: tuple[Assign, ...] = ()

    @property
    def targets(self) -> list[str]:
        return list(dict.fromkeys(s.target for s in self.statements))

    def reads(self) -> list[str]:
        seen: dict[str, None] = {}
        for s in self.statements:
            for v in variables(s.rhs):
                seen.setdefault(v, None)
        return list(seen)


def parse_script(text: str | None) -> ScriptProgram:
    """One assignment per line (or per ``;``); blank lines and ``#`` comments are skipped."""
    statements = []
    offset = 0
    for line in (text or "").replace(";", "\n").split("\n"):
        stripped = line.split("#", 1)[0]
        if stripped.strip():
            m = _ASSIGN_RE.match(stripped)
            if not m or m.group(1) in ("and", "or", "not", "True", "False"):
                raise ParseError(offset, "an assignment 'name = expression'")
            try:
                rhs = parse_expression(m.group(2))
            except ExpressionSyntaxError as exc:
                raise ParseError(offset + m.start(2) + exc.position, "a valid expression") from exc
            statements.append(Assign(m.group(1), rhs))
        offset += len(line) + 1
    return ScriptProgram(tuple(statements))


def render_script(program: ScriptProgram) -> str:
    return "\n".join(f"{s.target} = {generate_expression_text(s.rhs)}" for s in program.statements)
