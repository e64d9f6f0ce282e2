from fractions import Fraction

import pytest

from flawsim import fixtures
from flawsim.audit import account
from flawsim.gcode import parse_document, parse_line
from flawsim.policy import TamperPolicy
from flawsim.tamper import (
    RelativeExtrusionDetected,
    run_pipeline_equivalence,
    transform_reduction,
    transform_relocation,
)

THREE_MOVES = "G1 X1 Y2 E3\nG1 X2 Y3 E4\nG1 X3 Y4 E5\n"


# --- lossless parsing ----------------------------------------------------------


def test_unedited_lines_reserialize_byte_for_byte(gcode_corpus):
    for name, doc in gcode_corpus.items():
        assert "".join(line.text() for line in parse_document(doc)) == doc, name


def test_parse_line_structure():
    line = parse_line("G1 X2.5 Y-3 E4.1234 ; shell", "\n")
    assert line.command() == "G1"
    assert [p.letter for p in line.params] == ["X", "Y", "E"]
    assert line.param("E").value.raw == 41_234
    assert line.body[line.comment_start :] == "; shell"


def test_parse_line_malformed_params():
    line = parse_line("G1 E4 X@3")
    assert not line.is_command
    assert line.malformed


# --- reduction -------------------------------------------------------------------


def test_reduction_worked_example():
    assert transform_reduction("G1 X2 Y3 E4", Fraction(1, 2)) == "G1 X2 Y3 E2"


def test_reduction_fraction_zero_is_identity(gcode_corpus):
    for name, doc in gcode_corpus.items():
        assert transform_reduction(doc, 0) == doc, name


def test_reduction_only_touches_extruding_moves():
    doc = "G0 X1 E5\nM204 E900\nG92 E0\nG1 Z2 F600\n; E9 comment\n"
    assert transform_reduction(doc, Fraction(1, 2)) == doc


def test_reduction_scales_audited_total_exactly():
    doc = fixtures.generate_gcode(segments=6, m73_step=None)
    reduced = transform_reduction(doc, Fraction(1, 10))
    assert account(reduced).total_extrusion.raw * 10 == account(doc).total_extrusion.raw * 9


def test_reduction_total_within_one_ulp_per_edited_line():
    # arbitrary-precision values: rounding error is bounded by one raw
    # unit per edited move, so the audited total stays inside that band
    lines = [f"G1 X{i} E{i}.00007" for i in range(1, 40)]
    doc = "\n".join(lines) + "\n"
    for num, den in ((1, 3), (1, 7), (13, 100)):
        reduced = transform_reduction(doc, Fraction(num, den))
        exact = account(doc).total_extrusion.raw * Fraction(den - num, den)
        got = account(reduced).total_extrusion.raw
        assert abs(got - exact) <= len(lines)


def test_reduction_preserves_non_target_bytes():
    doc = "G1  X2   Y3 E4 ; note\r\nG1 E8\n"
    out = transform_reduction(doc, Fraction(1, 2))
    assert out == "G1  X2   Y3 E2 ; note\r\nG1 E4\n"


# --- relocation ------------------------------------------------------------------


def in_window(doc: str) -> str:
    return f"M73 P30\n{doc}M73 P80\n"


def test_relocation_conserves_three_move_example():
    doc = in_window(THREE_MOVES)
    out = transform_relocation(doc, 2)
    assert "G0 X2 Y3\n" in out
    report = account(out)
    deposits = [s.delta_e.raw for s in report.segments]
    assert deposits == [30_000, 0, 20_000]  # 3mm, 0mm, 2mm caught up
    assert report.total_extrusion.raw == 50_000  # total stays 5mm
    assert account(doc).total_extrusion.raw == 50_000


def test_relocation_window_excludes_everything():
    doc = "M73 P10\n" + THREE_MOVES + "M73 P80\n" + "G1 X9 Y9 E9\n"
    assert transform_relocation(doc, 2) == doc


def test_relocation_counts_only_in_window():
    lines = [f"G1 X{i} E{i}" for i in range(1, 11)]
    doc = in_window("\n".join(lines) + "\n")
    out = transform_relocation(doc, 2)
    converted = [i for i, ln in enumerate(out.splitlines()) if ln.startswith("G0")]
    # eligible positions 2,4,6,8,10 -> doc lines 2,4,6,8,10 (body offset +1 for marker)
    assert converted == [2, 4, 6, 8, 10]
    assert len(converted) == 10 // 2


@pytest.mark.parametrize("n", [2, 3, 4])
def test_relocation_counter_rule_brute_force(n):
    lines = [f"G1 X{i} E{i}" for i in range(1, 24)]
    doc = in_window("\n".join(lines) + "\n")
    out_lines = transform_relocation(doc, n).splitlines()
    eligible = 0
    expected_converted = []
    for i, body in enumerate(doc.splitlines()):
        if body.startswith("G1") and " E" in body:
            eligible += 1
            if eligible % n == 0:
                expected_converted.append(i)
    assert [i for i, ln in enumerate(out_lines) if ln.startswith("G0")] == expected_converted


def test_relocation_refuses_relative_extrusion():
    doc = "M83\n" + in_window(THREE_MOVES)
    with pytest.raises(RelativeExtrusionDetected):
        transform_relocation(doc, 2)


def test_relocation_allows_m83_after_window_closed():
    doc = in_window(THREE_MOVES) + "M83\nG1 E1\n"
    out = transform_relocation(doc, 2)
    assert out.endswith("M83\nG1 E1\n")


def test_relocation_total_conserved_on_uniform_fixture():
    doc = fixtures.generate_gcode(segments=100, m73_step=5)
    for n in (2, 3, 4):
        out = transform_relocation(doc, n)
        assert account(out).total_extrusion.raw == account(doc).total_extrusion.raw


# --- equivalence oracle -------------------------------------------------------------


POLICIES = [
    TamperPolicy.off(),
    TamperPolicy.reduction(Fraction(1, 2)),
    TamperPolicy.reduction(Fraction(3, 10)),
    TamperPolicy.relocation(2),
    TamperPolicy.relocation(3),
    TamperPolicy.relocation(4),
]


def test_equivalence_off_policy_is_identity(gcode_corpus):
    for name, doc in gcode_corpus.items():
        report = run_pipeline_equivalence(doc, TamperPolicy.off())
        assert report.identical, f"{name}: {report.describe()}"
        assert report.sim_output == doc


@pytest.mark.parametrize("policy", POLICIES, ids=lambda p: f"{p.mode.value}-{p.param_byte()}")
def test_equivalence_across_corpus(policy, gcode_corpus):
    for name, doc in gcode_corpus.items():
        report = run_pipeline_equivalence(doc, policy)
        assert report.identical, f"{name} under {policy.mode}: {report.describe()}"


def test_equivalence_relative_mode_reduction():
    doc = "M83\nG1 E0.5\nG1 E-1.5\nG1 E0.5\n"
    report = run_pipeline_equivalence(doc, TamperPolicy.reduction(Fraction(1, 2)))
    assert report.identical
    assert report.sim_output == "M83\nG1 E0.25\nG1 E-0.75\nG1 E0.25\n"


def test_equivalence_degenerate_double_extrusion_param():
    # not legal slicer output, but both paths must still agree on it
    doc = "G1 E4 E8\n"
    report = run_pipeline_equivalence(doc, TamperPolicy.reduction(Fraction(1, 2)))
    assert report.identical
    assert report.sim_output == "G1 E2 E4\n"


@pytest.mark.parametrize("doc", [
    "G1 E-\n",
    "G1 E- \n",
    "G1 E. X5\n",
    "G1 E+ F100\n",
    "G1 X1 E;c\n",
])
def test_equivalence_valueless_tokens_pass_untouched(doc):
    # a target letter with no digits never becomes a value: both paths
    # leave the line byte-identical and do not count it as eligible
    for policy in (TamperPolicy.reduction(Fraction(1, 2)), TamperPolicy.relocation(2)):
        report = run_pipeline_equivalence(doc, policy)
        assert report.identical, report.describe()
        assert report.sim_output == doc


def test_degenerate_token_does_not_shift_relocation_phase():
    doc = "M73 P30\nG1 X1 E1\nG1 E-\nG1 X2 E2\nG1 X3 E3\nM73 P80\n"
    report = run_pipeline_equivalence(doc, TamperPolicy.relocation(2))
    assert report.identical
    lines = report.sim_output.splitlines()
    assert lines[2] == "G1 E-"  # malformed: not converted, not counted
    assert lines[3] == "G0 X2"  # second *well-formed* value converts


def test_equivalence_report_pinpoints_divergence():
    # different policies give different bytes: compare manually via the report
    doc = "G1 E4\n"
    ref = run_pipeline_equivalence(doc, TamperPolicy.reduction(Fraction(1, 2)))
    assert ref.identical
    assert ref.sim_output != doc
