"""Controller memory model: flash layout, flash images, Intel HEX I/O.

Addresses in every public API are byte addresses.  Word addresses (the
AVR's program-counter unit) appear only inside instruction decode and are
converted explicitly there.

Erased flash reads 0xFF (NOR convention); dump_ihex elides rows that are
entirely erased, so fixtures stay small and load(dump(img)) == img.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .errors import FlawsimError


class IntelHexError(FlawsimError):
    pass


class MalformedRecord(IntelHexError):
    def __init__(self, line_no: int, reason: str):
        super().__init__(f"line {line_no}: {reason}")
        self.line_no = line_no


class ChecksumMismatch(IntelHexError):
    def __init__(self, line_no: int):
        super().__init__(f"line {line_no}: record checksum mismatch")
        self.line_no = line_no


class UnsupportedRecordType(IntelHexError):
    def __init__(self, line_no: int, rectype: int):
        super().__init__(f"line {line_no}: unsupported record type {rectype:02X}")
        self.line_no = line_no
        self.rectype = rectype


class AddressOutOfRange(FlawsimError):
    pass


class RegionOutOfRange(FlawsimError):
    pass


@dataclass(frozen=True)
class MemoryLayout:
    """Geometry of the modeled controller (defaults: a 256 KiB-flash AVR).

    The boot section occupies the top of flash; everything below it is
    application space.  rx_buffer_size must be a power of two because the
    serial ring buffer wraps with a bit mask.
    """

    flash_size: int = 256 * 1024
    boot_section_size: int = 8192
    app_vector_base: int = 0x0000
    data_memory_size: int = 0x2200  # 256 B register/IO space + 8 KiB SRAM
    rx_buffer_size: int = 128
    page_size: int = 256

    def __post_init__(self):
        if self.flash_size <= 0 or self.flash_size % 2:
            raise ValueError("flash_size must be positive and even")
        if not 0 < self.boot_section_size < self.flash_size:
            raise ValueError("boot_section_size must be in (0, flash_size)")
        if self.rx_buffer_size < 2 or self.rx_buffer_size & (self.rx_buffer_size - 1):
            raise ValueError("rx_buffer_size must be a power of two")
        if self.page_size <= 0:
            raise ValueError("page_size must be positive")
        if self.data_memory_size <= 0:
            raise ValueError("data_memory_size must be positive")

    @property
    def boot_start(self) -> int:
        return self.flash_size - self.boot_section_size

    def in_flash(self, addr: int) -> bool:
        return 0 <= addr < self.flash_size

    def in_app_region(self, addr: int) -> bool:
        return 0 <= addr < self.boot_start

    def in_boot_region(self, addr: int) -> bool:
        return self.boot_start <= addr < self.flash_size

    def in_data_memory(self, addr: int) -> bool:
        return 0 <= addr < self.data_memory_size


@dataclass
class FlashImage:
    """A full flash image: plain value, no hidden state.

    Reads and writes are strictly bounds-checked and never wrap.  Share
    freely read-only; copy() before mutating a shared image.
    """

    layout: MemoryLayout
    data: bytearray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if self.data is None:
            self.data = bytearray(b"\xff" * self.layout.flash_size)
        elif len(self.data) != self.layout.flash_size:
            raise ValueError("image data must be exactly flash_size bytes")

    def copy(self) -> "FlashImage":
        return FlashImage(self.layout, bytearray(self.data))

    def _check(self, addr: int, count: int):
        if addr < 0 or count < 0 or addr + count > self.layout.flash_size:
            raise AddressOutOfRange(
                f"[{addr:#06x}, {addr + count:#06x}) outside flash of "
                f"{self.layout.flash_size:#x} bytes"
            )

    def read(self, addr: int, count: int) -> bytes:
        self._check(addr, count)
        return bytes(self.data[addr : addr + count])

    def write(self, addr: int, payload: bytes):
        self._check(addr, len(payload))
        self.data[addr : addr + len(payload)] = payload

    def read_word(self, addr: int) -> int:
        """Little-endian 16-bit read (flash stores instruction words LE)."""
        self._check(addr, 2)
        return self.data[addr] | (self.data[addr + 1] << 8)

    def write_word(self, addr: int, word: int):
        self._check(addr, 2)
        self.data[addr] = word & 0xFF
        self.data[addr + 1] = (word >> 8) & 0xFF

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, FlashImage)
            and self.layout == other.layout
            and self.data == other.data
        )


def diff_images(a: FlashImage, b: FlashImage, limit: int = 64) -> list[tuple[int, int, int]]:
    """Byte-level diff [(addr, a_byte, b_byte), ...], truncated at limit."""
    out = []
    for addr, (x, y) in enumerate(zip(a.data, b.data)):
        if x != y:
            out.append((addr, x, y))
            if len(out) >= limit:
                break
    return out


# --- Intel HEX ----------------------------------------------------------

_REC_DATA = 0x00
_REC_EOF = 0x01
_REC_EXT_SEGMENT = 0x02
_REC_EXT_LINEAR = 0x04


def load_ihex(text: str, layout: MemoryLayout) -> FlashImage:
    """Parse an Intel HEX document into a fresh (erased) image.

    Record types 00/01/02/04 only.  Per-record checksums are verified;
    a bad checksum reports the offending line number.
    """
    image = FlashImage(layout)
    base = 0
    for line_no, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line:
            continue
        if not line.startswith(":"):
            raise MalformedRecord(line_no, "missing ':' start code")
        try:
            rec = bytes.fromhex(line[1:])
        except ValueError:
            raise MalformedRecord(line_no, "invalid hex digits") from None
        if len(rec) < 5:
            raise MalformedRecord(line_no, "record too short")
        count, addr_hi, addr_lo, rectype = rec[0], rec[1], rec[2], rec[3]
        if len(rec) != count + 5:
            raise MalformedRecord(line_no, "length field disagrees with record size")
        if sum(rec) & 0xFF:
            raise ChecksumMismatch(line_no)
        payload = rec[4 : 4 + count]
        offset = (addr_hi << 8) | addr_lo
        if rectype == _REC_DATA:
            addr = base + offset
            if addr + count > layout.flash_size:
                raise AddressOutOfRange(
                    f"line {line_no}: data record ends at {addr + count:#x}, "
                    f"flash is {layout.flash_size:#x}"
                )
            image.write(addr, payload)
        elif rectype == _REC_EOF:
            break
        elif rectype == _REC_EXT_SEGMENT:
            if count != 2:
                raise MalformedRecord(line_no, "type-02 record needs 2 data bytes")
            base = ((payload[0] << 8) | payload[1]) << 4
        elif rectype == _REC_EXT_LINEAR:
            if count != 2:
                raise MalformedRecord(line_no, "type-04 record needs 2 data bytes")
            base = ((payload[0] << 8) | payload[1]) << 16
        else:
            raise UnsupportedRecordType(line_no, rectype)
    return image


def _record(offset: int, rectype: int, payload: bytes) -> str:
    body = bytes([len(payload), (offset >> 8) & 0xFF, offset & 0xFF, rectype]) + payload
    checksum = (-sum(body)) & 0xFF
    return ":" + (body + bytes([checksum])).hex().upper()


def dump_ihex(image: FlashImage, start: int = 0, end: int | None = None) -> str:
    """Serialize [start, end) as canonical 16-byte data records.

    Rows on the absolute 16-byte grid that are entirely 0xFF are elided.
    A type-04 extended linear address record precedes the first data
    record of every 64 KiB segment that contains data.  Always ends with
    the type-01 EOF record and a trailing newline.
    """
    if end is None:
        end = image.layout.flash_size
    if not (0 <= start <= end <= image.layout.flash_size):
        raise RegionOutOfRange(f"[{start:#x}, {end:#x}) outside flash")
    lines = []
    segment = None
    row = start - (start % 16)
    while row < end:
        lo = max(row, start)
        hi = min(row + 16, end)
        chunk = image.data[lo:hi]
        if chunk.strip(b"\xff"):
            seg = lo >> 16
            if seg != segment:
                lines.append(_record(0, _REC_EXT_LINEAR, bytes([(seg >> 8) & 0xFF, seg & 0xFF])))
                segment = seg
            lines.append(_record(lo & 0xFFFF, _REC_DATA, bytes(chunk)))
        row += 16
    lines.append(":00000001FF")
    return "\n".join(lines) + "\n"
