"""G-code forensics: deposition accounting and tamper-signature detection.

Total deposited material (the sum of positive extrusion deltas, in mm of
filament) is the desk-scale stand-in for weighing a printed part.  The
relocation detector looks for the attack's hydraulic signature: a travel
move that deposits nothing, immediately followed by an extruding move
whose flow (filament per mm of travel) is far above the document median,
because the absolute extrusion axis makes the next move catch up.
"""

from __future__ import annotations

import json
import math
import re
import statistics
from dataclasses import dataclass, field

from .errors import FlawsimError
from .fixedpoint import FixedPoint
from .gcode import ParsedLine, parse_document

RELOCATION_SIGNATURE = "RelocationSignature"
FLOW_OUTLIER = "FlowOutlier"

DEFAULT_FLOW_THRESHOLD = 1.8  # x median; below the 2x of 1-in-2 relocation
DEFAULT_FILAMENT_DIAMETER_MM = 2.85
DEFAULT_DENSITY_G_CM3 = 1.24  # PLA


class ParseError(FlawsimError):
    def __init__(self, line_no: int, body: str):
        super().__init__(f"line {line_no}: cannot parse {body!r}")
        self.line_no = line_no


class InsufficientData(FlawsimError):
    pass


class ZeroReferenceTotal(FlawsimError):
    pass


@dataclass(frozen=True)
class SegmentRecord:
    index: int
    kind: str  # G0 / G1
    start: tuple[float, float, float]
    end: tuple[float, float, float]
    travel: float  # mm
    delta_e: FixedPoint  # mm of filament
    flow: float | None  # delta_e / travel, None when travel is ~zero

    def to_dict(self) -> dict:
        return {
            "index": self.index,
            "kind": self.kind,
            "start": list(self.start),
            "end": list(self.end),
            "travel": round(self.travel, 6),
            "delta_e": self.delta_e.to_text(),
            "flow": None if self.flow is None else round(self.flow, 6),
        }


@dataclass(frozen=True)
class Anomaly:
    index: int  # segment index the finding anchors to
    kind: str
    ratio: float  # catch-up flow / median flow

    def to_dict(self) -> dict:
        return {"index": self.index, "kind": self.kind, "ratio": round(self.ratio, 4)}


@dataclass
class AuditReport:
    total_extrusion: FixedPoint
    segments: list[SegmentRecord]
    anomalies: list[Anomaly] = field(default_factory=list)
    comparison: dict | None = None

    def extruding_segments(self) -> list[SegmentRecord]:
        return [s for s in self.segments if s.delta_e.raw > 0]

    def mass_grams(
        self,
        filament_diameter_mm: float = DEFAULT_FILAMENT_DIAMETER_MM,
        density_g_cm3: float = DEFAULT_DENSITY_G_CM3,
    ) -> float:
        """Optional conversion of the length proxy to grams."""
        area_mm2 = math.pi * (filament_diameter_mm / 2) ** 2
        volume_cm3 = float(self.total_extrusion) * area_mm2 / 1000.0
        return volume_cm3 * density_g_cm3

    def to_dict(self) -> dict:
        out = {
            "total_extrusion_mm": self.total_extrusion.to_text(),
            "mass_grams": round(self.mass_grams(), 4),
            "segments": [s.to_dict() for s in self.segments],
            "anomalies": [a.to_dict() for a in self.anomalies],
        }
        if self.comparison is not None:
            out["comparison"] = self.comparison
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def to_csv(self) -> str:
        rows = ["index,kind,start_x,start_y,start_z,end_x,end_y,end_z,travel,delta_e,flow"]
        for s in self.segments:
            flow = "" if s.flow is None else f"{s.flow:.6f}"
            rows.append(
                f"{s.index},{s.kind},"
                f"{s.start[0]:.4f},{s.start[1]:.4f},{s.start[2]:.4f},"
                f"{s.end[0]:.4f},{s.end[1]:.4f},{s.end[2]:.4f},"
                f"{s.travel:.6f},{s.delta_e.to_text()},{flow}"
            )
        return "\n".join(rows) + "\n"


_MOVE_NUMBERS = (0, 1)
_TRAVEL_EPS = 1e-9
_MOVE_PREFIX = re.compile(r" *G(?:0|1|92)(?!\d)")


def _looks_like_move(line: ParsedLine) -> bool:
    return line.malformed and _MOVE_PREFIX.match(line.body) is not None


def account(doc: str) -> AuditReport:
    """Walk a document and record one segment per linear move.

    Extrusion deltas honour absolute/relative mode (M82/M83) and G92
    re-zeroing.  Raises ParseError for a move line that does not fit the
    grammar; non-move noise (comments, status commands) is skipped.
    """
    x = y = z = 0.0
    e_logical = FixedPoint(0)
    relative_e = False
    segments: list[SegmentRecord] = []
    total_raw = 0
    for line_no, line in enumerate(parse_document(doc), 1):
        if not line.is_command:
            if _looks_like_move(line):
                raise ParseError(line_no, line.body)
            continue
        if line.letter == "M":
            if line.number == 82:
                relative_e = False
            elif line.number == 83:
                relative_e = True
            continue
        if line.letter != "G":
            continue
        if line.number == 92:
            px, py, pz = line.param("X"), line.param("Y"), line.param("Z")
            if px is not None:
                x = float(px.value)
            if py is not None:
                y = float(py.value)
            if pz is not None:
                z = float(pz.value)
            pe = line.param("E")
            if pe is not None:
                e_logical = pe.value
            continue
        if line.number not in _MOVE_NUMBERS:
            continue
        start = (x, y, z)
        px, py, pz = line.param("X"), line.param("Y"), line.param("Z")
        if px is not None:
            x = float(px.value)
        if py is not None:
            y = float(py.value)
        if pz is not None:
            z = float(pz.value)
        end = (x, y, z)
        travel = math.dist(start, end)
        pe = line.param("E")
        if pe is None:
            delta_e = FixedPoint(0)
        elif relative_e:
            delta_e = pe.value
        else:
            delta_e = pe.value - e_logical
            e_logical = pe.value
        flow = float(delta_e) / travel if travel > _TRAVEL_EPS else None
        segments.append(
            SegmentRecord(
                index=len(segments),
                kind=f"G{line.number}",
                start=start,
                end=end,
                travel=travel,
                delta_e=delta_e,
                flow=flow,
            )
        )
        if delta_e.raw > 0:
            total_raw += delta_e.raw
    return AuditReport(total_extrusion=FixedPoint(total_raw), segments=segments)


def detect_relocation(
    report: AuditReport, threshold: float = DEFAULT_FLOW_THRESHOLD
) -> list[Anomaly]:
    """Flag travel segments whose immediate successor extrudes at
    >= threshold x the median flow (the catch-up signature), plus any
    unexplained flow outliers.  Needs >= 8 extruding segments for the
    median to mean anything."""
    extruding = [s for s in report.segments if s.delta_e.raw > 0 and s.flow is not None]
    if len(extruding) < 8:
        raise InsufficientData(f"{len(extruding)} extruding segments; need >= 8")
    median_flow = statistics.median(s.flow for s in extruding)
    if median_flow <= 0:
        raise InsufficientData("median flow is not positive")
    anomalies: list[Anomaly] = []
    flagged_successors = set()
    for seg in report.segments:
        if seg.delta_e.raw > 0 or seg.travel <= _TRAVEL_EPS:
            continue
        nxt_i = seg.index + 1
        if nxt_i >= len(report.segments):
            continue
        nxt = report.segments[nxt_i]
        if nxt.delta_e.raw > 0 and nxt.flow is not None and nxt.flow >= threshold * median_flow:
            anomalies.append(Anomaly(seg.index, RELOCATION_SIGNATURE, nxt.flow / median_flow))
            flagged_successors.add(nxt_i)
    for seg in extruding:
        if seg.index in flagged_successors:
            continue
        if seg.flow >= threshold * median_flow:
            anomalies.append(Anomaly(seg.index, FLOW_OUTLIER, seg.flow / median_flow))
    anomalies.sort(key=lambda a: a.index)
    report.anomalies = anomalies
    return anomalies


def compare(reference: AuditReport, suspect: AuditReport) -> float:
    """Reduction percentage of suspect relative to reference (by the
    deposited-length mass proxy)."""
    if reference.total_extrusion.raw == 0:
        raise ZeroReferenceTotal("reference deposits no material")
    percent = 100.0 * (1.0 - suspect.total_extrusion.raw / reference.total_extrusion.raw)
    suspect.comparison = {
        "reference_total_mm": reference.total_extrusion.to_text(),
        "suspect_total_mm": suspect.total_extrusion.to_text(),
        "reduction_percent": round(percent, 4),
        "normalized_percent": round(100.0 - percent, 4),
    }
    return percent


def normalized_curve_csv(reference: AuditReport, suspects: list[tuple[str, AuditReport]]) -> str:
    """Mass-proxy curve as CSV: one row per suspect, normalized against the
    reference - the axes used to plot reduction sweeps."""
    rows = ["label,reduction_percent,normalized_percent"]
    for label, suspect in suspects:
        percent = compare(reference, suspect)
        rows.append(f"{label},{percent:.4f},{100.0 - percent:.4f}")
    return "\n".join(rows) + "\n"
