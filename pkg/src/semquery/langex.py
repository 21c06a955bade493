"""Parameterized natural-language expressions with column placeholders.

Syntax: ``{column}`` substitutes a cell, ``{column:left}`` / ``{column:right}``
pick a side in join expressions, ``{{`` and ``}}`` escape literal braces.
"""
from __future__ import annotations

from dataclasses import dataclass

from .errors import LangexSyntaxError, LangexValidationError, NullCellError
from .table import render_cell

SIDES = ("none", "left", "right")


@dataclass(frozen=True)
class Literal:
    text: str


@dataclass(frozen=True)
class Placeholder:
    column: str
    side: str = "none"


@dataclass(frozen=True)
class Langex:
    source: str
    segments: tuple

    @property
    def placeholders(self) -> list[Placeholder]:
        return [s for s in self.segments if isinstance(s, Placeholder)]

    def stripped(self) -> str:
        """Source text with all placeholders removed (used as an index query)."""
        return " ".join(
            part
            for seg in self.segments
            if isinstance(seg, Literal)
            for part in seg.text.split()
        )


def parse(src: str) -> Langex:
    segments = []
    literal: list[str] = []
    i = 0
    n = len(src)
    while i < n:
        ch = src[i]
        if ch == "{":
            if i + 1 < n and src[i + 1] == "{":
                literal.append("{")
                i += 2
                continue
            end = src.find("}", i + 1)
            if end < 0:
                raise LangexSyntaxError("unbalanced '{' at position %d in %r" % (i, src))
            body = src[i + 1 : end]
            if ":" in body:
                name, _, side = body.partition(":")
                if side not in ("left", "right"):
                    raise LangexSyntaxError("invalid side tag %r in %r" % (side, src))
            else:
                name, side = body, "none"
            name = name.strip()
            if not name:
                raise LangexSyntaxError("empty placeholder name in %r" % src)
            if literal:
                segments.append(Literal("".join(literal)))
                literal = []
            segments.append(Placeholder(name, side))
            i = end + 1
        elif ch == "}":
            if i + 1 < n and src[i + 1] == "}":
                literal.append("}")
                i += 2
                continue
            raise LangexSyntaxError("unbalanced '}' at position %d in %r" % (i, src))
        else:
            literal.append(ch)
            i += 1
    if literal:
        segments.append(Literal("".join(literal)))
    return Langex(src, tuple(segments))


def unparse(l: Langex) -> str:
    """Re-serialize segments; inverse of parse modulo escape normalization."""
    out = []
    for seg in l.segments:
        if isinstance(seg, Literal):
            out.append(seg.text.replace("{", "{{").replace("}", "}}"))
        elif seg.side == "none":
            out.append("{%s}" % seg.column)
        else:
            out.append("{%s:%s}" % (seg.column, seg.side))
    return "".join(out)


def validate(l: Langex, schema, mode: str = "single", schema_right=None) -> None:
    """Check placeholder columns against the schema(s).

    mode "single": all placeholders side=none and present in `schema`.
    mode "join": ≥1 left and ≥1 right placeholder; left names checked against
    `schema`, right names against `schema_right`.
    """
    if mode not in ("single", "join"):
        raise ValueError("unknown mode %r" % mode)
    names = {n for n, _ in schema}
    if mode == "single":
        for ph in l.placeholders:
            if ph.side != "none":
                raise LangexValidationError(
                    "side tag %r on {%s} is only legal in join expressions" % (ph.side, ph.column)
                )
            if ph.column not in names:
                raise LangexValidationError("unknown column %r (schema: %s)" % (ph.column, sorted(names)))
        return
    right_names = {n for n, _ in (schema_right or ())}
    sides = {ph.side for ph in l.placeholders}
    if "none" in sides:
        raise LangexValidationError("join expression placeholders must carry a :left or :right tag")
    if "left" not in sides:
        raise LangexValidationError("join expression references no :left column")
    if "right" not in sides:
        raise LangexValidationError("join expression references no :right column")
    for ph in l.placeholders:
        pool = names if ph.side == "left" else right_names
        if ph.column not in pool:
            raise LangexValidationError(
                "unknown %s column %r (schema: %s)" % (ph.side, ph.column, sorted(pool))
            )


def render(l: Langex, row: dict, row_right: dict | None = None, row_id: int | None = None) -> str:
    """Substitute placeholders with cell text; null cells fail fast."""
    out = []
    for seg in l.segments:
        if isinstance(seg, Literal):
            out.append(seg.text)
            continue
        cells = row_right if seg.side == "right" else row
        if cells is None or seg.column not in cells:
            raise LangexValidationError("no value for placeholder {%s}" % seg.column)
        value = cells[seg.column]
        if value is None:
            raise NullCellError(
                "null cell in column %r while rendering %r" % (seg.column, l.source), row_id
            )
        out.append(render_cell(value))
    return "".join(out)
