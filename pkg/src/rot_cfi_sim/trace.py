"""Retired-instruction traces and control-flow extraction.

A trace is a text file with one retired instruction per line::

    # CYCLE PC RAW NPC
    10 0x80000000 0x008000EF 0x80000008

CYCLE is decimal, the other fields are ``0x``-prefixed hex. RAW holds either
a full 32-bit encoding or a 16-bit compressed (RVC) encoding zero-extended to
32 bits. NPC is the address of the next retired instruction.

Only control-flow instructions produce a :class:`CommitLog`; compressed forms
are expanded first so the log always carries the 32-bit encoding.
"""

from __future__ import annotations

import enum
import functools
import io
from dataclasses import dataclass
from typing import Iterable, Iterator, Sequence, TextIO

__all__ = [
    "COMMIT_LOG_BITS",
    "CommitLog",
    "ControlFlowKind",
    "DecodeError",
    "TraceFormatError",
    "TraceRecord",
    "classify",
    "encode_c_j",
    "encode_c_jal",
    "encode_c_jalr",
    "encode_c_jr",
    "encode_jal",
    "encode_jalr",
    "expand_compressed",
    "instruction_length",
    "iter_trace",
    "make_commit_log",
    "parse_trace",
    "serialize_trace",
]

COMMIT_LOG_BITS = 224
MAX_COMMITS_PER_CYCLE = 2

MASK32 = (1 << 32) - 1
MASK64 = (1 << 64) - 1

OPCODE_JAL = 0x6F
OPCODE_JALR = 0x67
LINK_REGISTERS = frozenset({1, 5})

NOP = 0x00000013
C_NOP = 0x0001


class TraceFormatError(ValueError):
    """A trace line could not be parsed or violates the trace invariants."""

    def __init__(self, message: str, lineno: int | None = None):
        self.lineno = lineno
        if lineno is not None:
            message = f"line {lineno}: {message}"
        super().__init__(message)


class DecodeError(ValueError):
    """Reserved or illegal compressed encoding."""

    def __init__(self, raw: int, reason: str = "reserved encoding"):
        self.raw = raw
        super().__init__(f"cannot expand RVC instruction 0x{raw:04x}: {reason}")


class ControlFlowKind(enum.Enum):
    CALL = "Call"
    RETURN = "Return"
    INDIRECT_JUMP = "IndirectJump"
    COROUTINE_SWAP = "CoroutineSwap"
    NOT_CONTROL_FLOW = "NotControlFlow"

    def __str__(self) -> str:
        return self.value


@dataclass(frozen=True, slots=True)
class TraceRecord:
    cycle: int
    pc: int
    raw: int
    npc: int

    @property
    def compressed(self) -> bool:
        return self.raw & 0b11 != 0b11

    def to_line(self) -> str:
        width = 4 if self.compressed else 8
        return f"{self.cycle} 0x{self.pc:08X} 0x{self.raw:0{width}X} 0x{self.npc:08X}"


@dataclass(frozen=True, slots=True)
class CommitLog:
    """The 224-bit packet a CFI filter emits for one control-flow retire."""

    pc: int
    encoding: int
    next_addr: int
    target_addr: int
    kind: ControlFlowKind

    @property
    def length(self) -> int:
        return self.next_addr - self.pc


# -- parsing -----------------------------------------------------------------


def _parse_hex(token: str, field: str, bits: int, lineno: int) -> int:
    if not token.lower().startswith("0x"):
        raise TraceFormatError(f"{field} must be 0x-prefixed hex, got {token!r}", lineno)
    try:
        value = int(token, 16)
    except ValueError:
        raise TraceFormatError(f"bad hex value for {field}: {token!r}", lineno) from None
    if value >> bits:
        raise TraceFormatError(f"{field} does not fit in {bits} bits: {token}", lineno)
    return value


def _parse_line(line: str, lineno: int) -> TraceRecord:
    fields = line.split()
    if len(fields) != 4:
        raise TraceFormatError(f"expected 4 fields (CYCLE PC RAW NPC), got {len(fields)}", lineno)
    if not fields[0].isdigit():
        raise TraceFormatError(f"CYCLE must be a decimal integer, got {fields[0]!r}", lineno)
    cycle = int(fields[0])
    pc = _parse_hex(fields[1], "PC", 64, lineno)
    raw = _parse_hex(fields[2], "RAW", 32, lineno)
    npc = _parse_hex(fields[3], "NPC", 64, lineno)
    if pc & 1:
        raise TraceFormatError(f"PC 0x{pc:x} is not 2-byte aligned", lineno)
    if raw & 0b11 != 0b11 and raw > 0xFFFF:
        raise TraceFormatError(f"compressed RAW 0x{raw:x} has bits above 15 set", lineno)
    return TraceRecord(cycle, pc, raw, npc)


def iter_trace(source: str | TextIO | Iterable[str]) -> Iterator[TraceRecord]:
    """Lazily parse and validate a trace, yielding records in file order."""
    if isinstance(source, str):
        source = io.StringIO(source)
    last_cycle = -1
    same_cycle = 0
    for lineno, line in enumerate(source, start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        rec = _parse_line(line, lineno)
        if rec.cycle < last_cycle:
            raise TraceFormatError(
                f"cycle index decreases from {last_cycle} to {rec.cycle}", lineno
            )
        if rec.cycle == last_cycle:
            same_cycle += 1
            if same_cycle > MAX_COMMITS_PER_CYCLE:
                raise TraceFormatError(
                    f"more than {MAX_COMMITS_PER_CYCLE} commits in cycle {rec.cycle}", lineno
                )
        else:
            last_cycle, same_cycle = rec.cycle, 1
        yield rec


def parse_trace(source: str | TextIO | Iterable[str]) -> list[TraceRecord]:
    return list(iter_trace(source))


def serialize_trace(records: Iterable[TraceRecord], header: bool = True) -> str:
    lines = ["# CYCLE PC RAW NPC"] if header else []
    lines.extend(rec.to_line() for rec in records)
    return "\n".join(lines) + "\n"


# -- decoding ----------------------------------------------------------------


def instruction_length(raw: int) -> int:
    return 4 if raw & 0b11 == 0b11 else 2


def _bit(value: int, pos: int) -> int:
    return (value >> pos) & 1


def _sign_extend(value: int, bits: int) -> int:
    sign = 1 << (bits - 1)
    return (value & (sign - 1)) - (value & sign)


def _cj_offset(raw: int) -> int:
    # CJ format: inst[12:2] = offset[11|4|9:8|10|6|7|3:1|5]
    imm = (
        (_bit(raw, 12) << 11)
        | (_bit(raw, 11) << 4)
        | (((raw >> 9) & 0b11) << 8)
        | (_bit(raw, 8) << 10)
        | (_bit(raw, 7) << 6)
        | (_bit(raw, 6) << 7)
        | (((raw >> 3) & 0b111) << 1)
        | (_bit(raw, 2) << 5)
    )
    return _sign_extend(imm, 12)


def encode_jal(rd: int, offset: int) -> int:
    if offset & 1 or not -(1 << 20) <= offset < (1 << 20):
        raise ValueError(f"JAL offset out of range: {offset}")
    imm = offset & ((1 << 21) - 1)
    return (
        (((imm >> 20) & 1) << 31)
        | (((imm >> 1) & 0x3FF) << 21)
        | (((imm >> 11) & 1) << 20)
        | (((imm >> 12) & 0xFF) << 12)
        | (rd << 7)
        | OPCODE_JAL
    )


def encode_jalr(rd: int, rs1: int, imm: int = 0) -> int:
    if not -2048 <= imm < 2048:
        raise ValueError(f"JALR immediate out of range: {imm}")
    return ((imm & 0xFFF) << 20) | (rs1 << 15) | (rd << 7) | OPCODE_JALR


def _encode_cj(funct3: int, offset: int) -> int:
    if offset & 1 or not -2048 <= offset < 2048:
        raise ValueError(f"compressed jump offset out of range: {offset}")
    o = offset & 0xFFF
    body = (
        (((o >> 11) & 1) << 12)
        | (((o >> 4) & 1) << 11)
        | (((o >> 8) & 0b11) << 9)
        | (((o >> 10) & 1) << 8)
        | (((o >> 6) & 1) << 7)
        | (((o >> 7) & 1) << 6)
        | (((o >> 1) & 0b111) << 3)
        | (((o >> 5) & 1) << 2)
    )
    return (funct3 << 13) | body | 0b01


def encode_c_j(offset: int) -> int:
    return _encode_cj(0b101, offset)


def encode_c_jal(offset: int) -> int:
    """RV32-only; the same bits are ``c.addiw`` on RV64."""
    return _encode_cj(0b001, offset)


def encode_c_jr(rs1: int) -> int:
    if rs1 == 0:
        raise ValueError("c.jr x0 is reserved")
    return 0x8002 | (rs1 << 7)


def encode_c_jalr(rs1: int) -> int:
    if rs1 == 0:
        raise ValueError("c.jalr x0 is c.ebreak")
    return 0x9002 | (rs1 << 7)


def expand_compressed(raw16: int, xlen: int = 64) -> int:
    """Expand the control-flow RVC forms to their 32-bit equivalents.

    ``c.j``, ``c.jal`` (RV32 only), ``c.jr`` and ``c.jalr`` are expanded.
    Every other compressed encoding is returned unchanged, which classifies
    as NotControlFlow because its low two bits are not ``0b11``.

    Raises:
        DecodeError: for the all-zero illegal instruction and ``c.jr x0``.
    """
    raw16 &= 0xFFFF
    if raw16 & 0b11 == 0b11:
        raise ValueError(f"0x{raw16:04x} is not a compressed encoding")
    if raw16 == 0:
        raise DecodeError(raw16, "defined illegal instruction")
    quadrant = raw16 & 0b11
    funct3 = raw16 >> 13
    if quadrant == 0b01:
        if funct3 == 0b101:
            return encode_jal(0, _cj_offset(raw16))
        if funct3 == 0b001 and xlen == 32:
            return encode_jal(1, _cj_offset(raw16))
    elif quadrant == 0b10 and funct3 == 0b100:
        rs1 = (raw16 >> 7) & 0x1F
        rs2 = (raw16 >> 2) & 0x1F
        if rs2 == 0:
            if not _bit(raw16, 12):
                if rs1 == 0:
                    raise DecodeError(raw16, "c.jr with rs1=x0 is reserved")
                return encode_jalr(0, rs1)
            if rs1 != 0:
                return encode_jalr(1, rs1)
    return raw16


def classify(encoding32: int) -> ControlFlowKind:
    """Link-register hint classification of a 32-bit encoding."""
    opcode = encoding32 & 0x7F
    rd = (encoding32 >> 7) & 0x1F
    if opcode == OPCODE_JAL:
        return ControlFlowKind.CALL if rd in LINK_REGISTERS else ControlFlowKind.NOT_CONTROL_FLOW
    if opcode != OPCODE_JALR or (encoding32 >> 12) & 0b111:
        return ControlFlowKind.NOT_CONTROL_FLOW
    rs1 = (encoding32 >> 15) & 0x1F
    rd_link = rd in LINK_REGISTERS
    rs1_link = rs1 in LINK_REGISTERS
    if rd_link and rs1_link:
        # rd == rs1 is a plain push in the ISA hint table
        return ControlFlowKind.CALL if rd == rs1 else ControlFlowKind.COROUTINE_SWAP
    if rd_link:
        return ControlFlowKind.CALL
    if rs1_link:
        return ControlFlowKind.RETURN
    return ControlFlowKind.INDIRECT_JUMP


@functools.lru_cache(maxsize=4096)
def _decode(raw: int, xlen: int) -> tuple[int, ControlFlowKind]:
    encoding = expand_compressed(raw, xlen) if raw & 0b11 != 0b11 else raw
    return encoding, classify(encoding)


def make_commit_log(rec: TraceRecord, xlen: int = 64) -> CommitLog | None:
    encoding, kind = _decode(rec.raw, xlen)
    if kind is ControlFlowKind.NOT_CONTROL_FLOW:
        return None
    next_addr = (rec.pc + instruction_length(rec.raw)) & MASK64
    return CommitLog(rec.pc, encoding, next_addr, rec.npc, kind)


def commit_logs(records: Sequence[TraceRecord], xlen: int = 64) -> list[CommitLog | None]:
    return [make_commit_log(rec, xlen) for rec in records]
