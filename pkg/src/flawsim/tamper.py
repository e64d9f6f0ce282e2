"""The two print-sabotage payloads as whole-file text transforms, plus the
equivalence harness that checks the streaming interceptor against them.

The transforms are the readable reference semantics; the interceptor in
uart.py implements the same edits one character at a time under its
15-byte state budget.  Both paths share the fixed-point arithmetic in
fixedpoint.py, so on documents written in the canonical dialect their
outputs are byte-identical - which is exactly what
run_pipeline_equivalence asserts.

Material reduction scales every extrusion value of every extruding move
by (1 - fraction), unconditionally.  Material relocation converts every
n-th extruding move inside the progress window to a travel move with the
extrusion dropped; with absolute extrusion values the following move
deposits the difference, so total material is conserved.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

from .errors import FlawsimError
from .gcode import ParsedLine, drop_param_convert_travel, parse_document
from .policy import Mode, TamperPolicy
from .uart import UartSimulation


class RelativeExtrusionDetected(FlawsimError):
    """Relative extrusion mode seen before the window closed; conversions
    would no longer conserve total material, so the transform refuses."""


def _scale_params(line: ParsedLine, letter: str, numerator: int, denominator: int) -> str:
    body = line.body
    # right to left so earlier spans stay valid
    for param in reversed([p for p in line.params if p.letter == letter]):
        new_text = param.value.scale_by(numerator, denominator).to_text()
        body = body[: param.value_start] + new_text + body[param.value_end :]
    return body


def transform_reduction(doc: str, fraction) -> str:
    """Scale the extrusion value of every extruding move by (1 - fraction).

    Everything else - other parameters, other lines, comments, whitespace,
    line endings - is reproduced byte-for-byte.  Edited values are written
    in canonical minimal form (trailing zeros trimmed, <= 4 decimals).
    """
    frac = Fraction(fraction)
    if not 0 <= frac <= 1:
        raise ValueError("fraction must be in [0, 1]")
    numerator = frac.denominator - frac.numerator
    denominator = frac.denominator
    out = []
    for line in parse_document(doc):
        if line.letter == "G" and line.number == 1 and line.param("E") is not None:
            out.append(_scale_params(line, "E", numerator, denominator) + line.eol)
        else:
            out.append(line.text())
    return "".join(out)


class _Window:
    """Progress-window tracker fed by M73 P percentages."""

    def __init__(self, lo: int, hi: int):
        self.lo_raw = lo * 10_000
        self.hi_raw = hi * 10_000
        self.active = False
        self.done = False

    def update(self, percent_raw: int):
        if self.done:
            return
        if percent_raw >= self.hi_raw:
            self.active = False
            self.done = True
        elif percent_raw >= self.lo_raw:
            self.active = True
        else:
            self.active = False


def transform_relocation(doc: str, n: int, window_lo: int = 25, window_hi: int = 75) -> str:
    """Convert every n-th extruding move inside the window to a travel move.

    Requires absolute extrusion: a relative-extrusion switch before the
    window has closed raises RelativeExtrusionDetected.  The eligible-move
    counter starts at the window and the n-th, 2n-th, ... eligible moves
    are converted; feedrate and coordinates are preserved, only the
    extrusion parameter (and one separating space) is dropped.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    window = _Window(window_lo, window_hi)
    counter = 0
    out = []
    for line in parse_document(doc):
        if line.letter == "M" and line.number == 73:
            p = line.param("P")
            if p is not None:
                window.update(p.value.raw)
        elif line.letter == "M" and line.number == 83:
            if not window.done:
                raise RelativeExtrusionDetected(
                    "relative extrusion before the window closed"
                )
        elif (
            line.letter == "G"
            and line.number == 1
            and line.param("E") is not None
            and window.active
        ):
            counter += 1
            if counter >= n:
                counter = 0
                out.append(drop_param_convert_travel(line, line.param("E")) + line.eol)
                continue
        out.append(line.text())
    return "".join(out)


def apply_policy(doc: str, policy: TamperPolicy) -> str:
    """Whole-file reference semantics for a policy."""
    if policy.mode is Mode.REDUCTION:
        return transform_reduction(doc, policy.reduction_fraction)
    if policy.mode is Mode.RELOCATION:
        return transform_relocation(doc, policy.relocation_n, policy.window_lo, policy.window_hi)
    return doc


@dataclass
class EquivalenceReport:
    identical: bool
    divergence_offset: int | None
    sim_output: str
    ref_output: str

    def describe(self) -> str:
        if self.identical:
            return "identical"
        off = self.divergence_offset
        ctx = slice(max(0, off - 20), off + 20)
        return (
            f"first divergence at byte {off}: "
            f"stream {self.sim_output[ctx]!r} != reference {self.ref_output[ctx]!r}"
        )


def run_pipeline_equivalence(
    doc: str, policy: TamperPolicy, rx_buffer_size: int = 128
) -> EquivalenceReport:
    """Stream doc through the interceptor and diff against the transform.

    The consumer drains aggressively (after every character), the most
    adversarial schedule for the hide/rewrite machinery.  Reports the
    first diverging byte offset, or identity.
    """
    sim = UartSimulation(policy, rx_buffer_size=rx_buffer_size)
    pieces = []
    for ch in doc:
        sim.feed_char(ch)
        pieces.extend(sim.drain())
    pieces.append(sim.flush_residual())
    sim_output = "".join(pieces)
    ref_output = apply_policy(doc, policy)
    if sim_output == ref_output:
        return EquivalenceReport(True, None, sim_output, ref_output)
    offset = next(
        (i for i, (a, b) in enumerate(zip(sim_output, ref_output)) if a != b),
        min(len(sim_output), len(ref_output)),
    )
    return EquivalenceReport(False, offset, sim_output, ref_output)
