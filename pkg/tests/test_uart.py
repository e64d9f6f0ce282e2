from fractions import Fraction

import pytest

from flawsim.avr import RingBufferInfo
from flawsim.policy import TamperPolicy
from flawsim.tamper import apply_policy
from flawsim.uart import (
    BufferFull,
    RingBufferState,
    TrojanState,
    UartSimulation,
    consumer_readline,
    marlin_rx_isr,
    trojan_epilogue,
)

OFF = TamperPolicy.off()
HALF = TamperPolicy.reduction(Fraction(1, 2))


# --- ring buffer / ISR -------------------------------------------------------


def test_isr_stores_and_advances():
    ring = RingBufferState(128)
    marlin_rx_isr(ring, "G")
    assert ring.head == 1 and ring.storage[0] == ord("G")


def test_isr_wraps_at_end():
    ring = RingBufferState(128, head=127, tail=10)
    marlin_rx_isr(ring, "x")
    assert ring.head == 0
    assert ring.storage[127] == ord("x")


def test_capacity_is_size_minus_one():
    ring = RingBufferState(128)
    for i in range(127):
        marlin_rx_isr(ring, "a")
    with pytest.raises(BufferFull):
        marlin_rx_isr(ring, "b")  # the 128th unconsumed write drops
    consumer_readline(ring)  # no newline: frees nothing
    with pytest.raises(BufferFull):
        marlin_rx_isr(ring, "b")


def test_readline_complete_line():
    ring = RingBufferState(128)
    for ch in "G0\n":
        marlin_rx_isr(ring, ch)
    assert consumer_readline(ring) == "G0\n"
    assert ring.tail == 3
    assert consumer_readline(ring) == ""


def test_readline_fifo_order():
    ring = RingBufferState(128)
    for ch in "G0\nG1\n":
        marlin_rx_isr(ring, ch)
    assert consumer_readline(ring) == "G0\n"
    assert consumer_readline(ring) == "G1\n"


def test_readline_across_wrap():
    ring = RingBufferState(8, head=6, tail=6)
    for ch in "ab\n":
        marlin_rx_isr(ring, ch)
    assert consumer_readline(ring) == "ab\n"


# --- state budget -------------------------------------------------------------


def test_trojan_state_serializes_to_fifteen_bytes():
    state = TrojanState.for_policy(HALF, RingBufferInfo(0x324, 0x323, 0x2A3))
    blob = state.to_bytes()
    assert len(blob) == 15
    assert state.head_copy == 0x324 and state.tail_copy == 0x323 and state.root_addr == 0x2A3


def test_budget_holds_after_every_char():
    sim = UartSimulation(TamperPolicy.relocation(2))
    doc = "M73 P30\n" + "".join(f"G1 X{i} E{i}.125\n" for i in range(1, 30)) + "M73 P80\n"
    for ch in doc:
        sim.feed_char(ch)
        assert len(sim.trojan.to_bytes()) <= 15
        sim.drain()


# --- interception: reduction ---------------------------------------------------


def test_reduction_worked_example():
    sim = UartSimulation(HALF)
    assert sim.feed("G1 X2 Y3 E4\n") == ["G1 X2 Y3 E2\n"]


def test_reduction_rounding_example():
    sim = UartSimulation(TamperPolicy.reduction(Fraction(1, 10)))
    assert sim.feed("G1 E4.1234\n") == ["G1 E3.7111\n"]


def test_reduction_negative_value():
    sim = UartSimulation(HALF)
    assert sim.feed("G1 E-1.5 F2400\n") == ["G1 E-0.75 F2400\n"]


def test_reduction_param_after_target_and_crlf():
    sim = UartSimulation(HALF)
    assert sim.feed("G1 E4 F200\r\nG1 E6;c\n") == ["G1 E2 F200\r\n", "G1 E3;c\n"]


def test_reduction_leaves_g0_and_others_alone():
    sim = UartSimulation(HALF)
    doc = "G0 X1 E4\nM73 P10\nG92 E8\n;c E4\nN7 G1 E4\n"
    assert "".join(sim.feed(doc)) == doc


def test_zero_percent_reduction_engages_but_conserves():
    sim = UartSimulation(TamperPolicy.reduction(0))
    doc = "G1 X2 Y3 E4\nG1 E4.1234\nG1 E-0.5\n"
    assert "".join(sim.feed(doc)) == doc
    assert sim.stats.edits == 3  # machinery ran on every value


def test_pass_through_off_policy_trajectories():
    doc = "G1 X2 Y3 E4\nG1 E4.1234\n"
    sim = UartSimulation(OFF)
    plain = RingBufferState(128)
    for ch in doc:
        sim.feed_char(ch)
        marlin_rx_isr(plain, ch)
        assert (sim.ring.head, sim.ring.tail) == (plain.head, plain.tail)
    assert "".join(sim.drain()) == doc


# --- interception: relocation ---------------------------------------------------


def test_relocation_middle_command_example():
    doc = "M73 P30\nG1 X1 Y2 E3\nG1 X2 Y3 E4\nG1 X3 Y4 E5\nM73 P80\n"
    sim = UartSimulation(TamperPolicy.relocation(2))
    out = sim.feed(doc)
    assert out == ["M73 P30\n", "G1 X1 Y2 E3\n", "G0 X2 Y3\n", "G1 X3 Y4 E5\n", "M73 P80\n"]


def test_relocation_inactive_outside_window():
    doc = "M73 P10\nG1 E1\nG1 E2\nM73 P80\nG1 E3\nG1 E4\n"
    sim = UartSimulation(TamperPolicy.relocation(2))
    assert "".join(sim.feed(doc)) == doc


def test_relocation_preserves_feedrate_and_following_params():
    doc = "M73 P30\nG1 X1 E3 F100\nG1 X2 E4 F100\n"
    sim = UartSimulation(TamperPolicy.relocation(2))
    assert sim.feed(doc)[-1] == "G0 X2 F100\n"


def test_relocation_m83_goes_dormant():
    doc = "M83\nM73 P30\nG1 E1\nG1 E2\nG1 E3\nG1 E4\n"
    sim = UartSimulation(TamperPolicy.relocation(2))
    assert "".join(sim.feed(doc)) == doc
    assert sim.stats.dormant_events == 1


def test_relocation_window_reactivation_blocked_after_done():
    doc = "M73 P30\nG1 E1\nG1 E2\nM73 P80\nM73 P40\nG1 E3\nG1 E4\n"
    sim = UartSimulation(TamperPolicy.relocation(2))
    out = "".join(sim.feed(doc))
    assert "G0" in out.splitlines()[2]  # second eligible converted in window
    assert out.splitlines()[5] == "G1 E3"  # no edits after the window closed
    assert out.splitlines()[6] == "G1 E4"


# --- hiding contract -----------------------------------------------------------


def test_partial_target_token_never_observable():
    sim = UartSimulation(HALF)
    observed = []
    for ch in "G1 E4":
        sim.feed_char(ch)
        observed.append(sim.ring.visible().decode())
    assert observed == ["G", "G1", "G1 ", "G1 E", "G1 E"]  # the digit is hidden
    assert consumer_readline(sim.ring) == ""


def test_consumer_atomicity_aggressive_drain():
    doc = "G1 X2 Y3 E4\nG1 E4.1234\nM73 P50\nG1 E-1.5\n"
    expected = apply_policy(doc, HALF).splitlines(keepends=True)
    sim = UartSimulation(HALF)
    seen = []
    for ch in doc:
        sim.feed_char(ch)
        line = consumer_readline(sim.ring)
        if line:
            seen.append(line)
    assert seen == expected


def test_visible_bytes_never_show_partially_edited_token():
    doc = "G1 X1 E41.25\n"
    sim = UartSimulation(HALF)
    for ch in doc:
        sim.feed_char(ch)
        visible = sim.ring.visible().decode()
        assert "E4" not in visible or visible.endswith("E") or "E20.625" in visible


def test_consumer_atomicity_exhaustive_schedules():
    # every subset of read positions over a short stream sees the same,
    # fully edited lines in order - never a partial token
    doc = "G1 E4\nG1 E-2\n"
    expected = apply_policy(doc, HALF).splitlines(keepends=True)
    n = len(doc)
    for schedule in range(1 << n):
        sim = UartSimulation(HALF)
        seen = []
        for i, ch in enumerate(doc):
            sim.feed_char(ch)
            if schedule & (1 << i):
                line = consumer_readline(sim.ring)
                if line:
                    seen.append(line)
        seen.extend(sim.drain())
        assert seen == expected, f"schedule {schedule:#x}"


# --- failure modes ---------------------------------------------------------------


def test_accumulator_overflow_goes_dormant_for_session():
    sim = UartSimulation(HALF)
    sim.feed("G1 E99999999999999\n")
    assert sim.stats.overflows == 1
    assert "".join(sim.feed("G1 E4\n")) == "G1 E4\n"  # untouched: dormant


def test_edit_skipped_when_no_room_to_rewrite():
    sim = UartSimulation(HALF, rx_buffer_size=8)
    out = sim.feed("G1 E123.4567\n")  # edited text would need 8 bytes; ring is full
    assert sim.stats.edits_skipped == 1
    assert out == ["G1 E\n"]


def test_epilogue_requires_per_char_contract():
    # calling epilogue without a new ISR char gives stale reads; the driver
    # enforces the pairing, this test just pins the public entry points
    ring = RingBufferState(128)
    trojan = TrojanState.for_policy(OFF)
    marlin_rx_isr(ring, "G")
    assert trojan_epilogue(trojan, ring, OFF) is None  # off: no state change
    assert trojan.parser_state == 0


def test_ring_size_cap():
    with pytest.raises(ValueError):
        UartSimulation(HALF, rx_buffer_size=512)


def test_trace_records_per_char_events():
    trace = []
    sim = UartSimulation(HALF, trace=trace)
    sim.feed("G1 E4\n")
    assert [t["char"] for t in trace] == list("G1 E4\n")
    assert all({"char", "head", "tail", "parser_state"} <= set(t) for t in trace)
