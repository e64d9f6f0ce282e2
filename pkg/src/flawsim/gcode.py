"""Lossless g-code line parsing.

A parsed line keeps the original text and byte spans of everything it
understood, so unedited lines re-serialize byte-for-byte and edits are
local string surgery.  The grammar is the strict slicer dialect the
streaming interceptor also speaks: one command per line, parameters as
LETTER immediately followed by a decimal value, tokens separated by runs
of spaces, ';' starts a comment that runs to end of line.

Lines that are not commands (blank, comment-only) or whose parameter
region does not fit the grammar are classified OTHER and passed through
untouched.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

from .fixedpoint import FixedPoint, FixedPointOverflow, FixedPointSyntax

_CMD_RE = re.compile(r"^(?P<lead> *)(?P<letter>[A-Z])(?P<number>\d+)")
_PARAM_RE = re.compile(r"(?P<ws> +)(?P<letter>[A-Z])(?P<value>[-+]?(?:\d+\.?\d*|\.\d+))")


@dataclass(frozen=True)
class Param:
    letter: str
    value: FixedPoint
    ws_start: int  # offset of the separating spaces before the letter
    value_start: int  # offset of the first value character
    value_end: int  # one past the last value character


@dataclass
class ParsedLine:
    """One source line: body text (no newline) plus its line terminator."""

    body: str
    eol: str
    letter: str | None = None
    number: int | None = None
    number_span: tuple[int, int] | None = None
    params: list[Param] = field(default_factory=list)
    comment_start: int | None = None
    malformed: bool = False  # looked like a command but params did not parse

    @property
    def is_command(self) -> bool:
        return self.letter is not None

    def command(self) -> str | None:
        if self.letter is None:
            return None
        return f"{self.letter}{self.number}"

    def param(self, letter: str) -> Param | None:
        for p in self.params:
            if p.letter == letter:
                return p
        return None

    def text(self) -> str:
        return self.body + self.eol


def split_lines(doc: str) -> list[tuple[str, str]]:
    """Split into (body, terminator) pairs, preserving LF/CRLF/ragged EOF."""
    out = []
    start = 0
    n = len(doc)
    while start < n:
        nl = doc.find("\n", start)
        if nl < 0:
            out.append((doc[start:], ""))
            break
        body_end = nl
        eol = "\n"
        if body_end > start and doc[body_end - 1] == "\r":
            body_end -= 1
            eol = "\r\n"
        out.append((doc[start:body_end], eol))
        start = nl + 1
    return out


def parse_line(body: str, eol: str = "\n") -> ParsedLine:
    line = ParsedLine(body, eol)
    comment = body.find(";")
    code = body if comment < 0 else body[:comment]
    if comment >= 0:
        line.comment_start = comment
    m = _CMD_RE.match(code)
    if not m:
        return line
    pos = m.end()
    params: list[Param] = []
    while pos < len(code):
        pm = _PARAM_RE.match(code, pos)
        if not pm:
            if code[pos:].strip() == "":
                break
            line.malformed = True
            return line  # malformed parameter region: treat as OTHER
        try:
            value = FixedPoint.parse(pm.group("value"))
        except (FixedPointSyntax, FixedPointOverflow):
            line.malformed = True
            return line
        params.append(
            Param(
                letter=pm.group("letter"),
                value=value,
                ws_start=pm.start("ws"),
                value_start=pm.start("value"),
                value_end=pm.end("value"),
            )
        )
        pos = pm.end()
    line.letter = m.group("letter")
    line.number = int(m.group("number"))
    line.number_span = (m.start("number"), m.end("number"))
    line.params = params
    return line


def parse_document(doc: str) -> list[ParsedLine]:
    return [parse_line(body, eol) for body, eol in split_lines(doc)]


def replace_param_value(line: ParsedLine, param: Param, new_text: str) -> str:
    """Body text with one parameter's value text swapped out."""
    return line.body[: param.value_start] + new_text + line.body[param.value_end :]


def drop_param_convert_travel(line: ParsedLine, param: Param) -> str:
    """Body text converted to a travel move: command number's last digit
    becomes 0 and the parameter is removed along with exactly one
    separating space (the same surgery the in-stream editor performs)."""
    _, num_end = line.number_span
    body = line.body
    letter_pos = param.value_start - 1
    return body[: num_end - 1] + "0" + body[num_end : letter_pos - 1] + body[param.value_end :]
