"""Serial-side simulation: the firmware's receive ring buffer and the
injected interceptor that edits g-code in flight.

The receive ISR stores one character and advances head; the interceptor
epilogue then runs atomically with it (the real injection disables
interrupts across the pair, so the simulation exposes them as one
producer step).  The consumer drains whole lines from tail.

Hiding works by rewinding head: a character the interceptor wants to
swallow is un-published immediately after the ISR stored it, so the next
arrival overwrites the same cell.  Digits of a targeted value are never
buffered anywhere - they are folded into the 4-byte fixed-point
accumulator on arrival and the edited text is written back through the
normal path once the value's delimiter shows up.  Because the consumer
only ever dequeues complete lines, rewriting earlier cells of the
line-in-progress (the move-command digit, for travel conversion) is safe.

All interceptor persistence lives in TrojanState, which serializes to 15
bytes: the memory the stack-steal patch carved out.  There is no room for
anything else, which is why the payload mode itself is not state (the two
payloads are separate builds) and why the eligible-move counter is one
byte.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

from .avr import RingBufferInfo
from .errors import FlawsimError
from .fixedpoint import MAX_RAW, SCALE, div_round_half_away, format_raw
from .policy import Mode, TamperPolicy


class BufferFull(FlawsimError):
    pass


class AccumulatorOverflow(FlawsimError):
    """Numeric capture exceeded 32 bits; the interceptor goes dormant."""


# parser states (low nibble of parser_state)
ST_LINE_START = 0
ST_G_NUM = 1
ST_M_NUM = 2
ST_G1_MID = 3  # inside a G1 line, mid-token
ST_G1_TOK = 4  # inside a G1 line, previous char was a space
ST_E_SIGN = 5
ST_E_INT = 6
ST_E_FRAC = 7
ST_M73_MID = 8
ST_M73_TOK = 9
ST_P_SIGN = 10
ST_P_INT = 11
ST_P_FRAC = 12
ST_SKIP = 13

# flag bits (flags_window)
F_WINDOW_ACTIVE = 0x01
F_WINDOW_DONE = 0x02
F_DORMANT = 0x04
F_HIDING = 0x08
F_NEG = 0x10
F_CONVERT = 0x20
F_PENDING = 0x40  # saw the target letter; no digit yet, nothing committed
F_SIGN_SEEN = 0x80

EV_EDIT = "edit"
EV_CONVERT = "convert"
EV_EDIT_SKIPPED = "edit_skipped"
EV_OVERFLOW = "accumulator_overflow"
EV_DORMANT_M83 = "dormant_relative_extrusion"


@dataclass
class RingBufferState:
    """Power-of-two circular buffer; empty iff head == tail (capacity size-1)."""

    size: int
    head: int = 0
    tail: int = 0
    root_addr: int = 0
    storage: bytearray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if self.size < 2 or self.size & (self.size - 1):
            raise ValueError("ring size must be a power of two")
        if self.storage is None:
            self.storage = bytearray(self.size)

    @property
    def mask(self) -> int:
        return self.size - 1

    def is_full(self) -> bool:
        return ((self.head + 1) & self.mask) == self.tail

    def free_space(self) -> int:
        return (self.tail - self.head - 1) & self.mask

    def visible(self) -> bytes:
        out = bytearray()
        i = self.tail
        while i != self.head:
            out.append(self.storage[i])
            i = (i + 1) & self.mask
        return bytes(out)


def marlin_rx_isr(ring: RingBufferState, char: int | str) -> None:
    """Store one received character at head.  Raises BufferFull when the
    buffer cannot take another character (that character is dropped)."""
    byte = ord(char) if isinstance(char, str) else char
    if ring.is_full():
        raise BufferFull(f"dropped {byte:#04x}")
    ring.storage[ring.head] = byte
    ring.head = (ring.head + 1) & ring.mask


def consumer_readline(ring: RingBufferState) -> str:
    """Dequeue one complete newline-terminated line, or '' if none is
    fully visible between tail and head."""
    i = ring.tail
    while i != ring.head:
        if ring.storage[i] == 0x0A:
            out = bytearray()
            j = ring.tail
            while True:
                out.append(ring.storage[j])
                j = (j + 1) & ring.mask
                if j == ((i + 1) & ring.mask):
                    break
            ring.tail = (i + 1) & ring.mask
            return out.decode("latin-1")
        i = (i + 1) & ring.mask
    return ""


@dataclass
class TrojanState:
    """Interceptor persistence; serializes to exactly 15 bytes.

    head_copy/tail_copy/root_addr hold the discovered addresses of the
    firmware's ring-buffer bookkeeping.  cmd_slot is the ring index of the
    current line's command-number digit, kept so a selected move can be
    rewritten to a travel in place.
    """

    head_copy: int = 0
    tail_copy: int = 0
    root_addr: int = 0
    parser_state: int = ST_LINE_START
    accumulator: int = 0
    flags_window: int = 0
    gcode_counter: int = 0
    policy_param: int = 0
    cmd_slot: int = 0

    @classmethod
    def for_policy(cls, policy: TamperPolicy, ring_info: RingBufferInfo | None = None) -> "TrojanState":
        state = cls(policy_param=policy.param_byte())
        if ring_info is not None:
            state.head_copy = ring_info.head_addr
            state.tail_copy = ring_info.tail_addr
            state.root_addr = ring_info.root_addr
        return state

    def to_bytes(self) -> bytes:
        return struct.pack(
            "<HHHBiBBBB",
            self.head_copy,
            self.tail_copy,
            self.root_addr,
            self.parser_state,
            self.accumulator,
            self.flags_window,
            self.gcode_counter,
            self.policy_param,
            self.cmd_slot,
        )

    def flag(self, bit: int) -> bool:
        return bool(self.flags_window & bit)

    def set_flag(self, bit: int, on: bool = True):
        if on:
            self.flags_window |= bit
        else:
            self.flags_window &= ~bit & 0xFF

    @property
    def state_id(self) -> int:
        return self.parser_state & 0x0F

    @property
    def frac_count(self) -> int:
        return self.parser_state >> 4

    def set_state(self, state_id: int, frac: int = 0):
        self.parser_state = (frac << 4) | state_id


def _hide(ring: RingBufferState):
    ring.head = (ring.head - 1) & ring.mask


def _emit(ring: RingBufferState, byte: int):
    ring.storage[ring.head] = byte
    ring.head = (ring.head + 1) & ring.mask


def _accumulate(acc: int, digit: int) -> int:
    acc = acc * 10 + digit
    if acc > MAX_RAW:
        raise AccumulatorOverflow(str(acc))
    return acc


def _state_after_delim(delim: int) -> int:
    if delim == 0x0A:
        return ST_LINE_START
    if delim == 0x3B:  # ';'
        return ST_SKIP
    if delim == 0x20:
        return ST_G1_TOK
    return ST_G1_MID


def _go_dormant(trojan: TrojanState):
    trojan.set_flag(F_DORMANT)
    trojan.set_flag(F_HIDING, False)
    trojan.set_flag(F_CONVERT, False)


def _pass_finish(trojan: TrojanState, delim: int):
    """A target token ended before any digit arrived: it was never hidden
    and is not eligible, so it simply stays as received."""
    trojan.set_flag(F_PENDING, False)
    trojan.set_flag(F_NEG, False)
    trojan.set_flag(F_SIGN_SEEN, False)
    trojan.accumulator = 0
    trojan.set_state(_state_after_delim(delim))


def _decide_on_first_digit(
    trojan: TrojanState, ring: RingBufferState, policy: TamperPolicy, digit: int, in_frac: bool
):
    """The first digit makes the token a well-formed value: commit to an
    edit (reduction), a conversion or a verbatim pass (relocation).

    Any sign or decimal point that already passed through is taken back
    here; until this moment nothing was hidden, so a token that never
    produces a digit leaves no trace.
    """
    visible_prefix = 1 + (1 if trojan.flag(F_SIGN_SEEN) else 0) + (1 if in_frac else 0)
    trojan.set_flag(F_PENDING, False)
    if policy.mode is Mode.REDUCTION:
        ring.head = (ring.head - visible_prefix) & ring.mask
        trojan.set_flag(F_HIDING)
        trojan.accumulator = digit
        trojan.set_state(ST_E_FRAC if in_frac else ST_E_INT, 1 if in_frac else 0)
        return
    if trojan.flag(F_WINDOW_ACTIVE):
        trojan.gcode_counter += 1
        if trojan.gcode_counter >= trojan.policy_param:
            trojan.gcode_counter = 0
            # unpublish the whole token so far plus the letter and its space
            ring.head = (ring.head - visible_prefix - 2) & ring.mask
            ring.storage[trojan.cmd_slot] = ord("0")
            trojan.set_flag(F_CONVERT)
            trojan.set_flag(F_HIDING)
            trojan.set_state(ST_E_FRAC if in_frac else ST_E_INT)
            return
    # kept: the value stays exactly as received, later chars are ordinary
    trojan.set_flag(F_NEG, False)
    trojan.set_flag(F_SIGN_SEEN, False)
    trojan.set_state(ST_G1_MID)


def _scaled_value(trojan: TrojanState) -> int:
    """Close out value capture: accumulator scaled to 10^4, signed."""
    frac = trojan.frac_count
    raw = trojan.accumulator
    if frac < 4:
        raw *= 10 ** (4 - frac)
    if raw > MAX_RAW:
        raise AccumulatorOverflow(str(raw))
    return -raw if trojan.flag(F_NEG) else raw


def _finish_target(trojan: TrojanState, ring: RingBufferState, delim: int) -> str | None:
    """The delimiter of a targeted extrusion value just arrived."""
    event = None
    if trojan.flag(F_CONVERT):
        # Value discarded; the delimiter the ISR just stored already sits
        # exactly where the removed token began.  Nothing to write back.
        trojan.set_flag(F_CONVERT, False)
        trojan.set_flag(F_HIDING, False)
        event = EV_CONVERT
    else:
        _hide(ring)  # take back the delimiter; re-emitted after the value
        try:
            value = _scaled_value(trojan)
        except AccumulatorOverflow:
            _go_dormant(trojan)
            _emit(ring, delim)
            trojan.set_flag(F_NEG, False)
            trojan.set_state(_state_after_delim(delim))
            return EV_OVERFLOW
        percent = trojan.policy_param
        edited = div_round_half_away(value * (100 - percent), 100)
        text = format_raw(edited)
        if ring.free_space() >= len(text) + 1:
            for ch in text:
                _emit(ring, ord(ch))
            event = EV_EDIT
        else:
            event = EV_EDIT_SKIPPED
        _emit(ring, delim)
        trojan.set_flag(F_HIDING, False)
    trojan.set_flag(F_NEG, False)
    trojan.set_flag(F_SIGN_SEEN, False)
    trojan.accumulator = 0
    trojan.set_state(_state_after_delim(delim))
    return event


def _finish_progress(trojan: TrojanState, policy: TamperPolicy, delim: int):
    """A progress-report percentage finished arriving; update the window."""
    try:
        value = _scaled_value(trojan)
    except AccumulatorOverflow:
        _go_dormant(trojan)
        trojan.set_state(ST_SKIP if delim != 0x0A else ST_LINE_START)
        return EV_OVERFLOW
    if not trojan.flag(F_WINDOW_DONE):
        if value >= policy.window_hi * SCALE:
            trojan.set_flag(F_WINDOW_ACTIVE, False)
            trojan.set_flag(F_WINDOW_DONE)
        elif value >= policy.window_lo * SCALE:
            trojan.set_flag(F_WINDOW_ACTIVE)
        else:
            trojan.set_flag(F_WINDOW_ACTIVE, False)
    trojan.set_flag(F_NEG, False)
    trojan.accumulator = 0
    trojan.set_state(ST_LINE_START if delim == 0x0A else ST_SKIP)
    return None


def trojan_epilogue(trojan: TrojanState, ring: RingBufferState, policy: TamperPolicy) -> str | None:
    """Run the interceptor for the character the ISR just stored.

    Must be called exactly once after every successful marlin_rx_isr; the
    pair models one uninterruptible ISR execution.  Returns an event tag
    for the simulation driver (None for the common pass-through case).
    """
    if policy.mode is Mode.OFF or trojan.flag(F_DORMANT):
        return None

    byte = ring.storage[(ring.head - 1) & ring.mask]
    ch = chr(byte)
    state = trojan.state_id
    newline = byte == 0x0A

    if state == ST_LINE_START:
        if ch == "G":
            trojan.accumulator = 0
            trojan.set_state(ST_G_NUM)
        elif ch == "M":
            trojan.accumulator = 0
            trojan.set_state(ST_M_NUM)
        elif ch in ("\n", "\r", " "):
            pass
        else:
            trojan.set_state(ST_SKIP)
        return None

    if state == ST_G_NUM:
        if ch.isdigit():
            try:
                trojan.accumulator = _accumulate(trojan.accumulator, byte - 48)
            except AccumulatorOverflow:
                _go_dormant(trojan)
                return EV_OVERFLOW
            trojan.cmd_slot = (ring.head - 1) & ring.mask
        else:
            number = trojan.accumulator
            trojan.accumulator = 0
            if newline:
                trojan.set_state(ST_LINE_START)
            elif number == 1:
                if ch == " ":
                    trojan.set_state(ST_G1_TOK)
                elif ch == ";":
                    trojan.set_state(ST_SKIP)
                else:
                    trojan.set_state(ST_G1_MID)
            else:
                trojan.set_state(ST_SKIP)
        return None

    if state == ST_M_NUM:
        if ch.isdigit():
            try:
                trojan.accumulator = _accumulate(trojan.accumulator, byte - 48)
            except AccumulatorOverflow:
                _go_dormant(trojan)
                return EV_OVERFLOW
            return None
        number = trojan.accumulator
        trojan.accumulator = 0
        if policy.mode is Mode.RELOCATION and number == 83:
            # Relative extrusion would break the conservation property;
            # the interceptor quietly stands down for the session.
            _go_dormant(trojan)
            return EV_DORMANT_M83
        if policy.mode is Mode.RELOCATION and number == 73 and not newline:
            if ch == " ":
                trojan.set_state(ST_M73_TOK)
            elif ch == ";":
                trojan.set_state(ST_SKIP)
            else:
                trojan.set_state(ST_M73_MID)
        else:
            trojan.set_state(ST_LINE_START if newline else ST_SKIP)
        return None

    if state in (ST_G1_MID, ST_G1_TOK):
        if newline:
            trojan.set_state(ST_LINE_START)
            return None
        if ch == ";":
            trojan.set_state(ST_SKIP)
            return None
        if ch == "E" and state == ST_G1_TOK:
            # A target might be starting; nothing is committed (or hidden)
            # until a digit proves the value well-formed.
            trojan.accumulator = 0
            trojan.set_flag(F_PENDING)
            trojan.set_flag(F_NEG, False)
            trojan.set_flag(F_SIGN_SEEN, False)
            trojan.set_state(ST_E_SIGN)
            return None
        trojan.set_state(ST_G1_TOK if ch == " " else ST_G1_MID)
        return None

    if state == ST_E_SIGN:  # pending by construction: no digit yet
        if ch in "+-":
            trojan.set_flag(F_NEG, ch == "-")
            trojan.set_flag(F_SIGN_SEEN)
            trojan.set_state(ST_E_INT)
            return None
        if ch.isdigit():
            _decide_on_first_digit(trojan, ring, policy, byte - 48, in_frac=False)
            return None
        if ch == ".":
            trojan.set_state(ST_E_FRAC, frac=0)
            return None
        _pass_finish(trojan, byte)
        return None

    if state == ST_E_INT:
        if ch.isdigit():
            if trojan.flag(F_PENDING):
                _decide_on_first_digit(trojan, ring, policy, byte - 48, in_frac=False)
                return None
            if not trojan.flag(F_CONVERT):
                try:
                    trojan.accumulator = _accumulate(trojan.accumulator, byte - 48)
                except AccumulatorOverflow:
                    _go_dormant(trojan)
                    return EV_OVERFLOW
            _hide(ring)
            return None
        if ch == ".":
            if not trojan.flag(F_PENDING):
                _hide(ring)
            trojan.set_state(ST_E_FRAC, frac=0)
            return None
        if trojan.flag(F_PENDING):
            _pass_finish(trojan, byte)
            return None
        return _finish_target(trojan, ring, byte)

    if state == ST_E_FRAC:
        if ch.isdigit():
            if trojan.flag(F_PENDING):
                _decide_on_first_digit(trojan, ring, policy, byte - 48, in_frac=True)
                return None
            if not trojan.flag(F_CONVERT):
                frac = trojan.frac_count
                if frac < 4:
                    try:
                        trojan.accumulator = _accumulate(trojan.accumulator, byte - 48)
                    except AccumulatorOverflow:
                        _go_dormant(trojan)
                        return EV_OVERFLOW
                    trojan.set_state(ST_E_FRAC, frac + 1)
                elif frac == 4:
                    if byte - 48 >= 5:
                        trojan.accumulator += 1
                    trojan.set_state(ST_E_FRAC, 5)
            _hide(ring)
            return None
        if trojan.flag(F_PENDING):
            _pass_finish(trojan, byte)
            return None
        return _finish_target(trojan, ring, byte)

    if state in (ST_M73_MID, ST_M73_TOK):
        if newline:
            trojan.set_state(ST_LINE_START)
        elif ch == ";":
            trojan.set_state(ST_SKIP)
        elif ch == "P" and state == ST_M73_TOK:
            trojan.accumulator = 0
            trojan.set_state(ST_P_SIGN)
        else:
            trojan.set_state(ST_M73_TOK if ch == " " else ST_M73_MID)
        return None

    if state == ST_P_SIGN:
        if ch in "+-":
            trojan.set_flag(F_NEG, ch == "-")
            trojan.set_state(ST_P_INT)
            return None
        if ch.isdigit():
            trojan.accumulator = byte - 48
            trojan.set_state(ST_P_INT)
            return None
        if ch == ".":
            trojan.set_state(ST_P_FRAC, frac=0)
            return None
        return _finish_progress(trojan, policy, byte)

    if state == ST_P_INT:
        if ch.isdigit():
            try:
                trojan.accumulator = _accumulate(trojan.accumulator, byte - 48)
            except AccumulatorOverflow:
                _go_dormant(trojan)
                return EV_OVERFLOW
            return None
        if ch == ".":
            trojan.set_state(ST_P_FRAC, frac=0)
            return None
        return _finish_progress(trojan, policy, byte)

    if state == ST_P_FRAC:
        if ch.isdigit():
            frac = trojan.frac_count
            if frac < 4:
                try:
                    trojan.accumulator = _accumulate(trojan.accumulator, byte - 48)
                except AccumulatorOverflow:
                    _go_dormant(trojan)
                    return EV_OVERFLOW
                trojan.set_state(ST_P_FRAC, frac + 1)
            elif frac == 4:
                if byte - 48 >= 5:
                    trojan.accumulator += 1
                trojan.set_state(ST_P_FRAC, 5)
            return None
        return _finish_progress(trojan, policy, byte)

    # ST_SKIP
    if newline:
        trojan.set_state(ST_LINE_START)
    return None


@dataclass
class SimStats:
    chars_in: int = 0
    dropped: int = 0
    edits: int = 0
    conversions: int = 0
    edits_skipped: int = 0
    overflows: int = 0
    dormant_events: int = 0


class UartSimulation:
    """Wires the ring buffer, the interceptor and a line consumer together.

    Single-threaded by contract: feed_char / read_line must not be called
    concurrently.  An optional trace list records one entry per delivered
    character (the debugger's-eye view of the interception).
    """

    def __init__(
        self,
        policy: TamperPolicy,
        rx_buffer_size: int = 128,
        ring_info: RingBufferInfo | None = None,
        trace: list | None = None,
    ):
        if rx_buffer_size > 256:
            raise ValueError("one-byte slot bookkeeping needs a ring of <= 256 bytes")
        self.policy = policy
        self.ring = RingBufferState(
            rx_buffer_size, root_addr=ring_info.root_addr if ring_info else 0
        )
        self.trojan = TrojanState.for_policy(policy, ring_info)
        self.stats = SimStats()
        self.trace = trace

    def feed_char(self, char: int | str) -> None:
        self.stats.chars_in += 1
        try:
            marlin_rx_isr(self.ring, char)
        except BufferFull:
            self.stats.dropped += 1
            return
        event = trojan_epilogue(self.trojan, self.ring, self.policy)
        if event == EV_EDIT:
            self.stats.edits += 1
        elif event == EV_CONVERT:
            self.stats.conversions += 1
        elif event == EV_EDIT_SKIPPED:
            self.stats.edits_skipped += 1
        elif event == EV_OVERFLOW:
            self.stats.overflows += 1
            self.stats.dormant_events += 1
        elif event == EV_DORMANT_M83:
            self.stats.dormant_events += 1
        if self.trace is not None:
            self.trace.append(
                {
                    "char": char if isinstance(char, str) else chr(char),
                    "head": self.ring.head,
                    "tail": self.ring.tail,
                    "parser_state": self.trojan.parser_state,
                }
            )

    def read_line(self) -> str:
        return consumer_readline(self.ring)

    def drain(self) -> list[str]:
        lines = []
        while True:
            line = self.read_line()
            if not line:
                return lines
            lines.append(line)

    def feed(self, text: str) -> list[str]:
        """Feed a whole document, draining complete lines as they form."""
        out = []
        for ch in text:
            self.feed_char(ch)
            out.extend(self.drain())
        return out

    def flush_residual(self) -> str:
        """Visible but line-incomplete bytes left at end of stream."""
        rest = self.ring.visible().decode("latin-1")
        self.ring.tail = self.ring.head
        return rest
