"""Minimal AVR instruction decode plus every binary pattern operation:
stack-pointer-init patching and reversal, serial ring-buffer discovery by
control-flow walk, and the defensive bootloader audit.

Only the handful of encodings the tooling needs are decoded; everything
else is classified OTHER16/OTHER32 so walkers still advance correctly.
Instruction words are little-endian in flash.  Jump/call targets are word
addresses in the encoding and are converted to byte addresses here.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum

from .errors import FlawsimError
from .memory import FlashImage

SPL_IO_ADDR = 0x3D
SPH_IO_ADDR = 0x3E
MCUCR_IO_ADDR = 0x35
IVCE_BIT = 0x01
IVSEL_BIT = 0x02

DEFAULT_RX_VECTOR_INDEX = 20  # UART0 RX complete on the modeled chip
DEFAULT_STEAL_BYTES = 15
RING_WALK_BUDGET = 256
HEAD_TAIL_TO_ROOT = 128


class OffsetOutOfRange(FlawsimError):
    pass


class OddOffset(FlawsimError):
    pass


class PatternNotFound(FlawsimError):
    pass


class UnderflowWouldBorrow(FlawsimError):
    pass


class DormantAbort(FlawsimError):
    pass


class AddressImplausible(FlawsimError):
    pass


class Kind(Enum):
    LDI = "ldi"
    OUT = "out"
    LDS = "lds"
    STS = "sts"
    JMP = "jmp"
    RJMP = "rjmp"
    CALL = "call"
    CLI = "cli"
    RETI = "reti"
    OTHER16 = "other16"
    OTHER32 = "other32"


@dataclass(frozen=True)
class DecodedInsn:
    kind: Kind
    byte_offset: int
    length: int  # 2 or 4
    reg: int | None = None
    value: int | None = None  # LDI immediate
    io_addr: int | None = None  # OUT port
    mem_addr: int | None = None  # LDS/STS data address
    target: int | None = None  # JMP/RJMP/CALL byte address


@dataclass(frozen=True)
class SpInitSite:
    """Location of the startup LDI/LDI/OUT-SPH/OUT-SPL sequence (8 bytes)."""

    offset: int
    spl_immediate: int
    sph_immediate: int


@dataclass(frozen=True)
class RingBufferInfo:
    head_addr: int
    tail_addr: int
    root_addr: int


# --- encoders (used by fixtures and by the patch/revert operations) ------


def enc_ldi(reg: int, value: int) -> int:
    if not 16 <= reg <= 31:
        raise ValueError("ldi needs r16..r31")
    return 0xE000 | ((value & 0xF0) << 4) | ((reg - 16) << 4) | (value & 0x0F)


def enc_out(io_addr: int, reg: int) -> int:
    return 0xB800 | ((io_addr & 0x30) << 5) | ((reg & 0x1F) << 4) | (io_addr & 0x0F)


def enc_lds(reg: int, mem_addr: int) -> tuple[int, int]:
    return 0x9000 | ((reg & 0x1F) << 4), mem_addr & 0xFFFF


def enc_sts(mem_addr: int, reg: int) -> tuple[int, int]:
    return 0x9200 | ((reg & 0x1F) << 4), mem_addr & 0xFFFF


def _enc_22bit(base: int, byte_target: int) -> tuple[int, int]:
    word_addr = byte_target >> 1
    hi = base | (((word_addr >> 17) & 0x1F) << 4) | ((word_addr >> 16) & 1)
    return hi, word_addr & 0xFFFF


def enc_jmp(byte_target: int) -> tuple[int, int]:
    return _enc_22bit(0x940C, byte_target)


def enc_call(byte_target: int) -> tuple[int, int]:
    return _enc_22bit(0x940E, byte_target)


def enc_rjmp(word_displacement: int) -> int:
    if not -2048 <= word_displacement <= 2047:
        raise ValueError("rjmp displacement out of range")
    return 0xC000 | (word_displacement & 0xFFF)


CLI_WORD = 0x94F8
RETI_WORD = 0x9518


def words_to_bytes(*words: int) -> bytes:
    out = bytearray()
    for w in words:
        out += bytes([w & 0xFF, (w >> 8) & 0xFF])
    return bytes(out)


def encode_insn(insn: DecodedInsn) -> bytes:
    """Re-encode a decoded instruction; inverse of decode for known kinds."""
    k = insn.kind
    if k is Kind.LDI:
        return words_to_bytes(enc_ldi(insn.reg, insn.value))
    if k is Kind.OUT:
        return words_to_bytes(enc_out(insn.io_addr, insn.reg))
    if k is Kind.LDS:
        return words_to_bytes(*enc_lds(insn.reg, insn.mem_addr))
    if k is Kind.STS:
        return words_to_bytes(*enc_sts(insn.mem_addr, insn.reg))
    if k is Kind.JMP:
        return words_to_bytes(*enc_jmp(insn.target))
    if k is Kind.CALL:
        return words_to_bytes(*enc_call(insn.target))
    if k is Kind.CLI:
        return words_to_bytes(CLI_WORD)
    if k is Kind.RETI:
        return words_to_bytes(RETI_WORD)
    raise ValueError(f"cannot re-encode {k}")


# --- decode ---------------------------------------------------------------


def decode(image: FlashImage, offset: int) -> DecodedInsn:
    """Decode one instruction at an even byte offset."""
    if offset % 2:
        raise OddOffset(f"instruction offset {offset:#x} is odd")
    if not 0 <= offset <= image.layout.flash_size - 2:
        raise OffsetOutOfRange(f"offset {offset:#x} outside flash")
    word = image.read_word(offset)

    def second_word() -> int:
        if offset + 4 > image.layout.flash_size:
            raise OffsetOutOfRange(f"32-bit insn at {offset:#x} runs past flash end")
        return image.read_word(offset + 2)

    if (word & 0xF000) == 0xE000:
        reg = 16 + ((word >> 4) & 0x0F)
        value = ((word >> 4) & 0xF0) | (word & 0x0F)
        return DecodedInsn(Kind.LDI, offset, 2, reg=reg, value=value)
    if (word & 0xF800) == 0xB800:
        io_addr = ((word >> 5) & 0x30) | (word & 0x0F)
        reg = (word >> 4) & 0x1F
        return DecodedInsn(Kind.OUT, offset, 2, reg=reg, io_addr=io_addr)
    if (word & 0xFE0F) == 0x9000:
        return DecodedInsn(Kind.LDS, offset, 4, reg=(word >> 4) & 0x1F, mem_addr=second_word())
    if (word & 0xFE0F) == 0x9200:
        return DecodedInsn(Kind.STS, offset, 4, reg=(word >> 4) & 0x1F, mem_addr=second_word())
    if (word & 0xFE0E) == 0x940C or (word & 0xFE0E) == 0x940E:
        kind = Kind.JMP if (word & 0xFE0E) == 0x940C else Kind.CALL
        word_addr = ((((word >> 4) & 0x1F) << 17) | ((word & 1) << 16) | second_word())
        return DecodedInsn(kind, offset, 4, target=word_addr * 2)
    if (word & 0xF000) == 0xC000:
        disp = word & 0xFFF
        if disp >= 0x800:
            disp -= 0x1000
        return DecodedInsn(Kind.RJMP, offset, 2, target=offset + 2 + disp * 2)
    if word == CLI_WORD:
        return DecodedInsn(Kind.CLI, offset, 2)
    if word == RETI_WORD:
        return DecodedInsn(Kind.RETI, offset, 2)
    return DecodedInsn(Kind.OTHER16, offset, 2)


def format_insn(insn: DecodedInsn) -> str:
    k = insn.kind
    if k is Kind.LDI:
        return f"ldi r{insn.reg}, 0x{insn.value:02X}"
    if k is Kind.OUT:
        return f"out 0x{insn.io_addr:02x}, r{insn.reg}"
    if k is Kind.LDS:
        return f"lds r{insn.reg}, 0x{insn.mem_addr:04X}"
    if k is Kind.STS:
        return f"sts 0x{insn.mem_addr:04X}, r{insn.reg}"
    if k in (Kind.JMP, Kind.CALL, Kind.RJMP):
        return f"{k.value} 0x{insn.target:x}"
    if k in (Kind.CLI, Kind.RETI):
        return k.value
    return f".word ; {k.value}"


# --- stack-steal pattern ---------------------------------------------------

_OUT_SPH_R29 = enc_out(SPH_IO_ADDR, 29)
_OUT_SPL_R28 = enc_out(SPL_IO_ADDR, 28)


def _match_sp_init(image: FlashImage, offset: int) -> SpInitSite | None:
    w0 = image.read_word(offset)
    if (w0 & 0xF0F0) != 0xE0C0:  # ldi r28, <any>
        return None
    w1 = image.read_word(offset + 2)
    if (w1 & 0xF0F0) != 0xE0D0:  # ldi r29, <any>
        return None
    if image.read_word(offset + 4) != _OUT_SPH_R29:
        return None
    if image.read_word(offset + 6) != _OUT_SPL_R28:
        return None
    spl = ((w0 >> 4) & 0xF0) | (w0 & 0x0F)
    sph = ((w1 >> 4) & 0xF0) | (w1 & 0x0F)
    return SpInitSite(offset, spl, sph)


def find_sp_init(image: FlashImage, start: int = 0, end: int | None = None) -> SpInitSite:
    """Locate the first stack-pointer-init sequence in [start, end).

    The two LDI immediates are wildcards (compilers vary them by RAM
    size); the register/port shape is exact.  Lowest even offset wins.
    """
    if end is None:
        end = image.layout.flash_size
    lo = start + (start % 2)
    for offset in range(lo, end - 7, 2):
        site = _match_sp_init(image, offset)
        if site is not None:
            return site
    raise PatternNotFound("no stack-pointer init sequence found")


def _shift_spl(image: FlashImage, site: SpInitSite, delta: int) -> FlashImage:
    word = image.read_word(site.offset)
    if (word & 0xF0F0) != 0xE0C0:
        raise PatternNotFound(f"no ldi r28 at {site.offset:#x}; stale site?")
    current = ((word >> 4) & 0xF0) | (word & 0x0F)
    updated = current + delta
    if not 0 <= updated <= 0xFF:
        raise UnderflowWouldBorrow(
            f"SPL immediate {current:#04x} {'+' if delta > 0 else '-'} "
            f"{abs(delta)} would borrow into SPH"
        )
    patched = image.copy()
    patched.write_word(site.offset, enc_ldi(28, updated))
    return patched


def apply_stack_steal(image: FlashImage, site: SpInitSite, n: int = DEFAULT_STEAL_BYTES) -> FlashImage:
    """Lower the initial SPL immediate by n, freeing n bytes above the stack.

    Only the immediate nibbles of the first LDI word change.  Refuses to
    borrow into SPH (the caller treats that as dormancy).
    """
    if n < 0:
        raise ValueError("n must be non-negative")
    return _shift_spl(image, site, -n)


def revert_stack_steal(image: FlashImage, site: SpInitSite, n: int = DEFAULT_STEAL_BYTES) -> FlashImage:
    """Exact inverse of apply_stack_steal."""
    if n < 0:
        raise ValueError("n must be non-negative")
    return _shift_spl(image, site, n)


# --- ring-buffer discovery -------------------------------------------------


def find_ring_buffer(
    image: FlashImage,
    rx_vector_index: int = DEFAULT_RX_VECTOR_INDEX,
) -> RingBufferInfo:
    """Walk the serial-receive ISR looking for back-to-back LDS loads.

    The vector slot must hold a JMP; the walk follows JMP/RJMP, steps over
    CALL, and falls through everything else.  Two consecutive LDS give the
    head/tail pointer addresses; the buffer root sits 128 bytes below the
    smaller one.  Budget: 256 decoded instructions, then DormantAbort.
    """
    vector_offset = rx_vector_index * 4
    try:
        entry = decode(image, vector_offset)
    except (OffsetOutOfRange, OddOffset) as exc:
        raise DormantAbort(f"vector slot {rx_vector_index} unreadable: {exc}") from exc
    if entry.kind is not Kind.JMP:
        raise DormantAbort(f"vector slot {rx_vector_index} is not a jmp")

    pc = entry.target
    prev: DecodedInsn | None = None
    for _ in range(RING_WALK_BUDGET):
        try:
            insn = decode(image, pc)
        except (OffsetOutOfRange, OddOffset) as exc:
            raise DormantAbort(f"walk left flash at {pc:#x}") from exc
        if insn.kind is Kind.LDS and prev is not None and prev.kind is Kind.LDS:
            head, tail = prev.mem_addr, insn.mem_addr
            root = min(head, tail) - HEAD_TAIL_TO_ROOT
            layout = image.layout
            if not (
                layout.in_data_memory(head)
                and layout.in_data_memory(tail)
                and layout.in_data_memory(root)
            ):
                raise AddressImplausible(
                    f"head {head:#06x} / tail {tail:#06x} / root {root:#06x} "
                    f"not all inside {layout.data_memory_size:#x} bytes of data memory"
                )
            return RingBufferInfo(head_addr=head, tail_addr=tail, root_addr=root)
        prev = insn
        if insn.kind in (Kind.JMP, Kind.RJMP):
            pc = insn.target
        else:  # CALL assumed to return; conditional branches fall through
            pc = insn.byte_offset + insn.length
    raise DormantAbort(f"no LDS pair within {RING_WALK_BUDGET} instructions")


# --- defensive bootloader audit ---------------------------------------------

IVSEL_TAKEOVER = "IvselTakeover"
ISR_TRAMPOLINE = "IsrTrampoline"

_AUDIT_WINDOW = 16  # max instructions between the paired MCUCR writes


@dataclass(frozen=True)
class Finding:
    kind: str
    offset: int
    related_offset: int
    snippet: str

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "offset": self.offset,
            "related_offset": self.related_offset,
            "snippet": self.snippet,
        }


def findings_to_json(findings: list[Finding]) -> str:
    return json.dumps([f.to_dict() for f in findings], indent=2)


def audit_bootloader(image: FlashImage, mcucr_io_addr: int = MCUCR_IO_ADDR) -> list[Finding]:
    """Statically audit the boot region for takeover signatures.

    IvselTakeover: consecutive stores to MCUCR where the first written
    value has the vector-change-enable bit set and the second the
    vector-select bit, at most 16 instructions apart.  Written values are
    resolved through the most recent LDI into the source register.

    IsrTrampoline: a CALL into the application region immediately
    followed by CLI (the wrapped-ISR idiom).

    Empty list means clean.  Linear sweep; data embedded in code can in
    principle desync it, which is acceptable for fixture-scale audits.
    """
    layout = image.layout
    insns: list[DecodedInsn] = []
    offset = layout.boot_start
    while offset <= layout.flash_size - 2:
        insn = decode(image, offset)
        if offset + insn.length > layout.flash_size:
            break
        insns.append(insn)
        offset += insn.length

    findings: list[Finding] = []
    reg_imm: dict[int, int] = {}
    mcucr_writes: list[tuple[int, int, int]] = []  # (insn index, offset, value)
    for idx, insn in enumerate(insns):
        if insn.kind is Kind.LDI:
            reg_imm[insn.reg] = insn.value
        elif insn.kind is Kind.OUT and insn.io_addr == mcucr_io_addr:
            if insn.reg in reg_imm:
                mcucr_writes.append((idx, insn.byte_offset, reg_imm[insn.reg]))
        if (
            insn.kind is Kind.CLI
            and idx > 0
            and insns[idx - 1].kind is Kind.CALL
            and layout.in_app_region(insns[idx - 1].target)
        ):
            call = insns[idx - 1]
            findings.append(
                Finding(
                    ISR_TRAMPOLINE,
                    call.byte_offset,
                    insn.byte_offset,
                    f"{format_insn(call)} ; {format_insn(insn)}",
                )
            )

    for (i1, off1, val1), (i2, off2, val2) in zip(mcucr_writes, mcucr_writes[1:]):
        if i2 - i1 <= _AUDIT_WINDOW and (val1 & IVCE_BIT) and (val2 & IVSEL_BIT):
            findings.append(
                Finding(
                    IVSEL_TAKEOVER,
                    off1,
                    off2,
                    f"out 0x{mcucr_io_addr:02x}, #0x{val1:02X} ; "
                    f"out 0x{mcucr_io_addr:02x}, #0x{val2:02X}",
                )
            )

    findings.sort(key=lambda f: f.offset)
    return findings
