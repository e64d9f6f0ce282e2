"""Framed programming protocol: a five-command subset of the STK500v2
wire format, a bootloader-side session that can patch firmware on upload
and spoof the read-back, and the naive programmer client that uploads,
downloads and verifies through it.

Frame layout (all integers big-endian):

    0x1B  sequence  size_hi size_lo  0x0E  body...  checksum

where checksum is the XOR of every preceding byte.  Responses echo the
request sequence number.  Command bodies:

    SIGN_ON         01                     -> 01 00 08 'AVRISP_2'
    LOAD_ADDRESS    06 a3 a2 a1 a0         -> 06 status      (byte address)
    PROGRAM_FLASH   13 n_hi n_lo data...   -> 13 status
    READ_FLASH      14 n_hi n_lo           -> 14 00 data... 00
    LEAVE_PROGMODE  11                     -> 11 00

The transport is any byte stream; the reader never assumes message
boundaries line up with reads.  One session is strictly lockstep
request/response; independent sessions share nothing.
"""

from __future__ import annotations

import socket
import socketserver
import threading
from dataclasses import dataclass, field

from . import avr
from .avr import SpInitSite, apply_stack_steal
from .errors import FlawsimError
from .memory import FlashImage, MemoryLayout

MESSAGE_START = 0x1B
TOKEN = 0x0E

CMD_SIGN_ON = 0x01
CMD_LOAD_ADDRESS = 0x06
CMD_LEAVE_PROGMODE = 0x11
CMD_PROGRAM_FLASH = 0x13
CMD_READ_FLASH = 0x14

STATUS_CMD_OK = 0x00
STATUS_CMD_FAILED = 0xC0

SIGNATURE = b"AVRISP_2"


class FrameError(FlawsimError):
    pass


class BadStart(FrameError):
    pass


class BadToken(FrameError):
    pass


class ChecksumMismatch(FrameError):
    pass


class Truncated(FrameError):
    pass


class TrailingBytes(FrameError):
    pass


class ProtocolError(FlawsimError):
    pass


@dataclass(frozen=True)
class Stk500Frame:
    sequence: int
    body: bytes

    def encode(self) -> bytes:
        return frame_encode(self.body, self.sequence)


def frame_encode(body: bytes, sequence: int = 0) -> bytes:
    if len(body) > 0xFFFF:
        raise ValueError("body exceeds 65535 bytes")
    head = bytes([MESSAGE_START, sequence & 0xFF, len(body) >> 8, len(body) & 0xFF, TOKEN])
    payload = head + bytes(body)
    checksum = 0
    for b in payload:
        checksum ^= b
    return payload + bytes([checksum])


def frame_decode(data: bytes) -> Stk500Frame:
    """Decode exactly one frame occupying the whole buffer."""
    frame, used = _decode_prefix(data)
    if used != len(data):
        raise TrailingBytes(f"{len(data) - used} bytes after frame end")
    return frame


def _decode_prefix(data: bytes) -> tuple[Stk500Frame, int]:
    if len(data) < 6:
        raise Truncated("frame header incomplete")
    if data[0] != MESSAGE_START:
        raise BadStart(f"expected {MESSAGE_START:#04x}, got {data[0]:#04x}")
    size = (data[2] << 8) | data[3]
    if data[4] != TOKEN:
        raise BadToken(f"expected {TOKEN:#04x}, got {data[4]:#04x}")
    total = 6 + size
    if len(data) < total:
        raise Truncated(f"need {total} bytes, have {len(data)}")
    checksum = 0
    for b in data[: total - 1]:
        checksum ^= b
    if checksum != data[total - 1]:
        raise ChecksumMismatch(f"computed {checksum:#04x}, frame says {data[total - 1]:#04x}")
    return Stk500Frame(sequence=data[1], body=bytes(data[5 : total - 1])), total


class FrameReader:
    """Incremental reassembly over an arbitrarily-chunked byte stream."""

    def __init__(self):
        self._buf = bytearray()

    def feed(self, data: bytes) -> list[Stk500Frame]:
        self._buf += data
        frames = []
        while True:
            try:
                frame, used = _decode_prefix(bytes(self._buf))
            except Truncated:
                return frames
            del self._buf[:used]
            frames.append(frame)


class _IntervalSet:
    """Sorted disjoint half-open intervals; tracks which flash bytes a
    session has actually received."""

    def __init__(self):
        self.spans: list[tuple[int, int]] = []

    def add(self, start: int, end: int):
        if end <= start:
            return
        merged = []
        for s, e in self.spans:
            if e < start or s > end:
                merged.append((s, e))
            else:
                start = min(start, s)
                end = max(end, e)
        merged.append((start, end))
        merged.sort()
        self.spans = merged

    def covers(self, start: int, end: int) -> bool:
        return any(s <= start and end <= e for s, e in self.spans)


@dataclass
class BootSession:
    """One bootloader programming session over a fresh or preloaded image.

    With trojan_enabled the session scans each arriving page (plus a
    7-byte fringe into previously received bytes) for the stack-pointer
    init sequence and lowers the SPL immediate by steal_n the moment the
    whole 8-byte pattern is resident.  Read-back requests overlapping the
    patched word are reverted on the fly, so a verify pass sees exactly
    the uploaded bytes.  If the immediate cannot take the subtraction the
    session stays dormant and nothing is patched or spoofed.
    """

    image: FlashImage
    trojan_enabled: bool = False
    steal_n: int = avr.DEFAULT_STEAL_BYTES
    load_address: int = 0
    sp_site: SpInitSite | None = None
    _received: _IntervalSet = field(default_factory=_IntervalSet)

    @property
    def layout(self) -> MemoryLayout:
        return self.image.layout

    # -- command handlers --

    def _handle_load_address(self, body: bytes) -> bytes:
        if len(body) != 5:
            return bytes([CMD_LOAD_ADDRESS, STATUS_CMD_FAILED])
        addr = int.from_bytes(body[1:5], "big")
        if addr >= self.layout.flash_size:
            return bytes([CMD_LOAD_ADDRESS, STATUS_CMD_FAILED])
        self.load_address = addr
        return bytes([CMD_LOAD_ADDRESS, STATUS_CMD_OK])

    def _handle_program_flash(self, body: bytes) -> bytes:
        if len(body) < 3:
            return bytes([CMD_PROGRAM_FLASH, STATUS_CMD_FAILED])
        size = (body[1] << 8) | body[2]
        data = body[3:]
        if len(data) != size:
            return bytes([CMD_PROGRAM_FLASH, STATUS_CMD_FAILED])
        start = self.load_address
        end = start + size
        if end > self.layout.boot_start:  # the bootloader protects itself
            return bytes([CMD_PROGRAM_FLASH, STATUS_CMD_FAILED])
        self.image.write(start, data)
        self._received.add(start, end)
        self.load_address = end
        if self.trojan_enabled and self.sp_site is None:
            self._scan_for_sp_init(start, end)
        return bytes([CMD_PROGRAM_FLASH, STATUS_CMD_OK])

    def _scan_for_sp_init(self, page_start: int, page_end: int):
        # The pattern must include at least one byte of the new page, so a
        # 7-byte fringe on each side covers page-straddling layouts.
        lo = max(0, page_start - 7)
        lo += lo % 2
        hi = min(self.layout.boot_start, page_end + 7)
        for offset in range(lo, hi - 7, 2):
            if not self._received.covers(offset, offset + 8):
                continue
            site = avr._match_sp_init(self.image, offset)
            if site is None:
                continue
            try:
                self.image = apply_stack_steal(self.image, site, self.steal_n)
            except avr.UnderflowWouldBorrow:
                return  # dormant: immediate too small to take the theft
            self.sp_site = site
            return

    def _handle_read_flash(self, body: bytes) -> bytes:
        if len(body) != 3:
            return bytes([CMD_READ_FLASH, STATUS_CMD_FAILED])
        size = (body[1] << 8) | body[2]
        start = self.load_address
        if start + size > self.layout.flash_size:
            return bytes([CMD_READ_FLASH, STATUS_CMD_FAILED])
        data = bytearray(self.image.read(start, size))
        if self.trojan_enabled and self.sp_site is not None:
            self._spoof_window(data, start)
        self.load_address = start + size
        return bytes([CMD_READ_FLASH, STATUS_CMD_OK]) + bytes(data) + bytes([STATUS_CMD_OK])

    def _spoof_window(self, data: bytearray, start: int):
        """Present the pre-patch bytes wherever the window overlaps the
        patched instruction word.  If that word was overwritten since the
        patch (it no longer decodes as the expected load) the read is
        passed through untouched rather than inventing bytes."""
        site = self.sp_site
        word = self.image.read_word(site.offset)
        if (word & 0xF0F0) != 0xE0C0:  # not an ldi r28 any more
            return
        current = ((word >> 4) & 0xF0) | (word & 0x0F)
        if current + self.steal_n > 0xFF:
            return
        original = avr.enc_ldi(28, current + self.steal_n)
        original_bytes = (original & 0xFF, (original >> 8) & 0xFF)
        for i, addr in enumerate((site.offset, site.offset + 1)):
            pos = addr - start
            if 0 <= pos < len(data):
                data[pos] = original_bytes[i]

    def handle(self, body: bytes) -> bytes:
        if not body:
            return bytes([0x00, STATUS_CMD_FAILED])
        cmd = body[0]
        if cmd == CMD_SIGN_ON:
            return bytes([CMD_SIGN_ON, STATUS_CMD_OK, len(SIGNATURE)]) + SIGNATURE
        if cmd == CMD_LOAD_ADDRESS:
            return self._handle_load_address(body)
        if cmd == CMD_PROGRAM_FLASH:
            return self._handle_program_flash(body)
        if cmd == CMD_READ_FLASH:
            return self._handle_read_flash(body)
        if cmd == CMD_LEAVE_PROGMODE:
            return bytes([CMD_LEAVE_PROGMODE, STATUS_CMD_OK])
        return bytes([cmd, STATUS_CMD_FAILED])


def serve(session: BootSession, request: Stk500Frame) -> Stk500Frame:
    """One request/response exchange; the response echoes the sequence."""
    return Stk500Frame(sequence=request.sequence, body=session.handle(request.body))


# --- transports -------------------------------------------------------------


class PipeTransport:
    """In-process byte-stream transport to a session.

    Writes are parsed incrementally; responses queue up and are read back
    in deliberately awkward chunks so nothing downstream can rely on
    message boundaries surviving the pipe.
    """

    def __init__(self, session: BootSession, read_chunk: int = 7, transcript: list | None = None):
        self.session = session
        self.reader = FrameReader()
        self.read_chunk = read_chunk
        self.pending = bytearray()
        self.transcript = transcript

    def write(self, data: bytes):
        if self.transcript is not None:
            self.transcript.append((">>", bytes(data)))
        for frame in self.reader.feed(data):
            response = serve(self.session, frame).encode()
            if self.transcript is not None:
                self.transcript.append(("<<", response))
            self.pending += response

    def read(self, n: int) -> bytes:
        take = min(n, self.read_chunk, len(self.pending))
        out = bytes(self.pending[:take])
        del self.pending[:take]
        return out


class SocketTransport:
    def __init__(self, sock: socket.socket):
        self.sock = sock

    def write(self, data: bytes):
        self.sock.sendall(data)

    def read(self, n: int) -> bytes:
        return self.sock.recv(n)


class Stk500TcpServer(socketserver.ThreadingTCPServer):
    """Optional TCP front end; binds only where explicitly asked."""

    allow_reuse_address = True
    daemon_threads = True

    def __init__(self, address: tuple[str, int], session_factory):
        self.session_factory = session_factory
        super().__init__(address, _TcpHandler)

    def serve_in_background(self) -> threading.Thread:
        thread = threading.Thread(target=self.serve_forever, daemon=True)
        thread.start()
        return thread


class _TcpHandler(socketserver.BaseRequestHandler):
    def handle(self):
        session = self.server.session_factory()
        reader = FrameReader()
        while True:
            data = self.request.recv(4096)
            if not data:
                return
            for frame in reader.feed(data):
                self.request.sendall(serve(session, frame).encode())


# --- programmer client ------------------------------------------------------


@dataclass
class VerifyOutcome:
    verified: bool  # read-back matched what the tool uploaded
    stored_differs: bool  # session flash actually differs from read-back
    mismatches: list[tuple[int, int, int]] = field(default_factory=list)  # vs stored


class ProgrammerClient:
    """A deliberately naive programming tool: upload, read back, compare.

    It trusts the bootloader for both directions, exactly like the stock
    toolchains do.
    """

    def __init__(self, transport):
        self.transport = transport
        self.reader = FrameReader()
        self.sequence = 0

    def roundtrip(self, body: bytes) -> bytes:
        seq = self.sequence
        self.sequence = (self.sequence + 1) & 0xFF
        self.transport.write(frame_encode(body, seq))
        while True:
            chunk = self.transport.read(4096)
            if not chunk:
                raise ProtocolError("transport closed mid-response")
            frames = self.reader.feed(chunk)
            if frames:
                if len(frames) != 1 or frames[0].sequence != seq:
                    raise ProtocolError("response sequence mismatch")
                return frames[0].body

    def expect_ok(self, body: bytes) -> bytes:
        response = self.roundtrip(body)
        if len(response) < 2 or response[1] != STATUS_CMD_OK:
            raise ProtocolError(f"command {body[0]:#04x} failed: {response.hex()}")
        return response

    def sign_on(self) -> bytes:
        return self.expect_ok(bytes([CMD_SIGN_ON]))[3:]

    def load_address(self, addr: int):
        self.expect_ok(bytes([CMD_LOAD_ADDRESS]) + addr.to_bytes(4, "big"))

    def program_flash(self, data: bytes):
        self.expect_ok(bytes([CMD_PROGRAM_FLASH, len(data) >> 8, len(data) & 0xFF]) + data)

    def read_flash(self, size: int) -> bytes:
        response = self.expect_ok(bytes([CMD_READ_FLASH, size >> 8, size & 0xFF]))
        return response[2:-1]

    def leave_progmode(self):
        self.expect_ok(bytes([CMD_LEAVE_PROGMODE]))


def used_span(firmware: FlashImage, page_size: int | None = None) -> tuple[int, int]:
    """[start, end) of the non-erased content, aligned to page_size."""
    if page_size is None:
        page_size = firmware.layout.page_size
    data = firmware.data
    first = next((i for i, b in enumerate(data) if b != 0xFF), None)
    if first is None:
        return (0, 0)
    last = len(data) - 1
    while data[last] == 0xFF:
        last -= 1
    start = (first // page_size) * page_size
    end = ((last // page_size) + 1) * page_size
    return start, end


def program_and_verify(
    firmware: FlashImage,
    session: BootSession,
    page_size: int | None = None,
    transcript: list | None = None,
) -> VerifyOutcome:
    """Full naive install cycle against a session: upload every used page,
    read the same span back, compare.

    verified: read-back equals the uploaded bytes (the tool's view).
    stored_differs: read-back differs from the session's actual flash.
    """
    if page_size is None:
        page_size = session.layout.page_size
    start, end = used_span(firmware, page_size)
    if end > session.layout.boot_start:
        raise ProtocolError("firmware does not fit in the application region")
    client = ProgrammerClient(PipeTransport(session, transcript=transcript))
    client.sign_on()
    for page in range(start, end, page_size):
        client.load_address(page)
        client.program_flash(firmware.read(page, min(page_size, end - page)))
    client.load_address(start)
    readback = bytearray()
    for page in range(start, end, page_size):
        readback += client.read_flash(min(page_size, end - page))
    client.leave_progmode()
    uploaded = firmware.read(start, end - start)
    stored = session.image.read(start, end - start)
    mismatches = [
        (start + i, readback[i], stored[i])
        for i in range(len(readback))
        if readback[i] != stored[i]
    ]
    return VerifyOutcome(
        verified=bytes(readback) == uploaded,
        stored_differs=bool(mismatches),
        mismatches=mismatches,
    )
