"""CFI mailbox shared between the host commit stage and the RoT.

Register image (four 64-bit data registers)::

    data[0] = pc
    data[1] = encoding (bits 0..31) | kind tag (bits 32..35)
    data[2] = next_addr
    data[3] = target_addr

The kind tag is a simulator convenience. The RoT still classifies from the
encoding, and rejects a log whose tag disagrees.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

from .trace import COMMIT_LOG_BITS, MASK32, MASK64, CommitLog, ControlFlowKind, classify

__all__ = [
    "Mailbox",
    "ProtocolError",
    "ProtocolMonitor",
    "beats_for",
    "pack_log",
    "payload_chunks",
    "unpack_log",
]

DATA_REGISTERS = 4
REGISTER_BITS = 64

KIND_TAGS = {
    ControlFlowKind.CALL: 1,
    ControlFlowKind.RETURN: 2,
    ControlFlowKind.INDIRECT_JUMP: 3,
    ControlFlowKind.COROUTINE_SWAP: 4,
}
_TAG_KINDS = {tag: kind for kind, tag in KIND_TAGS.items()}

# non-architectural bits of data[1]; skipped on buses narrower than a register
_TAG_SPAN = (96, 128)


class ProtocolError(RuntimeError):
    """Mailbox access that violates the doorbell/completion handshake."""


def pack_log(log: CommitLog) -> list[int]:
    return [
        log.pc & MASK64,
        (log.encoding & MASK32) | (KIND_TAGS[log.kind] << 32),
        log.next_addr & MASK64,
        log.target_addr & MASK64,
    ]


def unpack_log(data: list[int]) -> CommitLog:
    encoding = data[1] & MASK32
    kind = classify(encoding)
    tag = (data[1] >> 32) & 0xF
    if tag and _TAG_KINDS.get(tag) is not kind:
        raise ProtocolError(f"kind tag {tag} disagrees with encoding 0x{encoding:08x}")
    if kind is ControlFlowKind.NOT_CONTROL_FLOW:
        raise ProtocolError(f"mailbox holds a non-control-flow encoding 0x{encoding:08x}")
    return CommitLog(data[0], encoding, data[2], data[3], kind)


def beats_for(bus_width_bits: int) -> int:
    return -(-COMMIT_LOG_BITS // bus_width_bits)


def payload_chunks(log: CommitLog, bus_width_bits: int = 64) -> list[tuple[int, int]]:
    """Split a packed log into ``(chunk_index, value)`` bus beats.

    Chunk ``i`` covers bits ``[i*w, (i+1)*w)`` of the 256-bit register image.
    A 32-bit bus skips the word holding only the kind tag, so every bus width
    moves exactly ``beats_for(w)`` chunks.
    """
    regs = pack_log(log)
    if bus_width_bits == REGISTER_BITS:
        return list(enumerate(regs))
    image = 0
    for i, reg in enumerate(regs):
        image |= reg << (i * REGISTER_BITS)
    w = bus_width_bits
    total = DATA_REGISTERS * REGISTER_BITS // w
    chunks = []
    for i in range(total):
        lo, hi = i * w, (i + 1) * w
        if lo >= _TAG_SPAN[0] and hi <= _TAG_SPAN[1]:
            continue
        chunks.append((i, (image >> lo) & ((1 << w) - 1)))
    assert len(chunks) == beats_for(w)
    return chunks


@dataclass
class Mailbox:
    """Doorbell/completion mailbox with an optional event log for monitoring."""

    bus_width_bits: int = REGISTER_BITS
    record_events: bool = True
    data: list[int] = field(default_factory=lambda: [0] * DATA_REGISTERS)
    doorbell: bool = False
    completion: bool = False
    ready: bool = True
    events: list[str] = field(default_factory=list)
    results_read: int = 0
    _writing: bool = False

    def _emit(self, event: str) -> None:
        if self.record_events:
            self.events.append(event)

    def write_chunk(self, index: int, value: int, is_last: bool) -> None:
        if self.doorbell or self.completion:
            raise ProtocolError("chunk write while a check is pending")
        if not (self.ready or self._writing):
            raise ProtocolError("chunk write before the previous result was consumed")
        w = self.bus_width_bits
        if not 0 <= index < DATA_REGISTERS * REGISTER_BITS // w:
            raise ProtocolError(f"chunk index {index} out of range for a {w}-bit bus")
        if w == REGISTER_BITS:
            self.data[index] = value & MASK64
        else:
            reg, offset = divmod(index * w, REGISTER_BITS)
            width = min(w, REGISTER_BITS)
            for k in range(max(1, w // REGISTER_BITS)):
                part = (value >> (k * REGISTER_BITS)) & ((1 << width) - 1)
                mask = ((1 << width) - 1) << offset
                self.data[reg + k] = (self.data[reg + k] & ~mask) | (part << offset)
        self.ready = False
        self._writing = True
        self._emit("chunk")
        if is_last:
            self._writing = False
            self.doorbell = True
            self._emit("doorbell")

    def rot_read_log(self) -> CommitLog:
        if not self.doorbell:
            raise ProtocolError("RoT read without a pending doorbell")
        self.doorbell = False
        self._emit("rot_read")
        return unpack_log(self.data)

    def rot_write_result(self, violation: bool) -> None:
        if self.doorbell or self.completion or self._writing or self.ready:
            raise ProtocolError("result written outside a check")
        self.data[0] = int(violation)
        self.completion = True
        self._emit("result")

    def host_read_result(self) -> bool:
        """Consume the completion bit and return the violation flag."""
        if not self.completion:
            raise ProtocolError("host read without completion")
        self.completion = False
        self.ready = True
        self.results_read += 1
        self._emit("host_read")
        return bool(self.data[0] & 1)


class ProtocolMonitor:
    """Checks a mailbox event log against the strict-alternation grammar."""

    _CODES = {"chunk": "c", "doorbell": "d", "rot_read": "r", "result": "w", "host_read": "h"}

    def __init__(self, beats: int):
        self.beats = beats
        self._grammar = re.compile(rf"(?:c{{{beats}}}drwh)*")

    def delivered(self, events: list[str]) -> int:
        """Number of delivered logs; raises ProtocolError on any deviation."""
        tokens = "".join(self._CODES[e] for e in events)
        if not self._grammar.fullmatch(tokens):
            raise ProtocolError(f"event sequence breaks alternation: ...{tokens[-40:]}")
        return tokens.count("d")
