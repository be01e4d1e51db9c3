"""Shadow-stack return-address protection running on the RoT.

On-chip storage is bounded. When a push finds it full, the oldest half is
spilled to untrusted main memory as a frame authenticated by a chained MAC::

    tag_j = MAC_key(entries_j || j || tag_{j-1}),   tag_{-1} = 0^128

Only the newest tag (the chain head) is kept on chip. Restoring frame ``j``
recomputes its MAC with the stored ``tag_{j-1}`` and compares it against the
trusted head, so any change to entries, index, tags, or frame order is caught
before an address from that frame is used.
"""

from __future__ import annotations

import enum
import hashlib
import hmac
import os
import struct
from dataclasses import dataclass, field

from .mailbox import Mailbox
from .profiles import FirmwareProfile, cost_of
from .trace import MASK64, CommitLog, ControlFlowKind

__all__ = [
    "CheckResult",
    "Detail",
    "MainMemory",
    "PolicyEngine",
    "RotFirmware",
    "ShadowStack",
    "SpillFrame",
    "SpillRegionExhausted",
    "frame_mac",
]

TAG_BYTES = 16
ZERO_TAG = bytes(TAG_BYTES)
DEFAULT_CAPACITY = 1024


class SpillRegionExhausted(MemoryError):
    pass


class Detail(enum.Enum):
    OK = "Ok"
    RETURN_MISMATCH = "ReturnMismatch"
    STACK_UNDERFLOW = "StackUnderflow"
    TAMPER_DETECTED = "TamperDetected"

    def __str__(self) -> str:
        return self.value


@dataclass(frozen=True)
class CheckResult:
    detail: Detail = Detail.OK
    cost_cycles: int = 0
    expected: int | None = None
    observed: int | None = None
    frame_index: int | None = None

    @property
    def violation(self) -> bool:
        return self.detail is not Detail.OK

    def describe(self) -> str:
        if self.detail is Detail.RETURN_MISMATCH:
            return f"ReturnMismatch(expected=0x{self.expected:x}, observed=0x{self.observed:x})"
        if self.detail is Detail.TAMPER_DETECTED:
            return f"TamperDetected(frame_index={self.frame_index})"
        return str(self.detail)


_OK = CheckResult()


def frame_mac(key: bytes, entries: list[int], frame_index: int, prev_tag: bytes) -> bytes:
    msg = struct.pack(f"<{len(entries)}QQ", *entries, frame_index) + prev_tag
    return hmac.new(key, msg, hashlib.sha256).digest()[:TAG_BYTES]


@dataclass
class SpillFrame:
    entries: list[int]
    frame_index: int
    tag: bytes


@dataclass
class MainMemory:
    """Untrusted spill region. Tests tamper with ``frames`` directly."""

    capacity_frames: int | None = None
    frames: list[SpillFrame] = field(default_factory=list)

    def store(self, slot: int, frame: SpillFrame) -> None:
        if self.capacity_frames is not None and slot >= self.capacity_frames:
            raise SpillRegionExhausted(f"spill region holds {self.capacity_frames} frames")
        del self.frames[slot:]
        self.frames.append(frame)

    def load(self, slot: int) -> SpillFrame | None:
        return self.frames[slot] if 0 <= slot < len(self.frames) else None


class ShadowStack:
    def __init__(
        self,
        capacity: int | None = DEFAULT_CAPACITY,
        frame_size: int | None = None,
        memory: MainMemory | None = None,
        key: bytes | None = None,
    ):
        if capacity is not None and capacity < 1:
            raise ValueError("capacity must be at least 1")
        self.capacity = capacity
        if capacity is None:
            self.frame_size = 0
        else:
            self.frame_size = frame_size if frame_size is not None else max(1, capacity // 2)
            if not 1 <= self.frame_size <= capacity:
                raise ValueError("frame_size must be in [1, capacity]")
        self.memory = memory if memory is not None else MainMemory()
        self._key = key if key is not None else os.urandom(32)
        self.on_chip: list[int] = []
        self.spilled_frames = 0
        self.chain_tag = ZERO_TAG

    def __len__(self) -> int:
        return len(self.on_chip) + self.spilled_frames * self.frame_size

    @property
    def depth(self) -> int:
        return len(self)

    def push(self, addr: int) -> None:
        if self.capacity is not None and len(self.on_chip) >= self.capacity:
            self.spill_frame()
        self.on_chip.append(addr & MASK64)

    def pop(self) -> tuple[int | None, CheckResult | None]:
        """Pop the top entry; on failure return ``(None, violation result)``."""
        if not self.on_chip:
            if not self.spilled_frames:
                return None, CheckResult(Detail.STACK_UNDERFLOW)
            index = self.spilled_frames - 1
            if not self.restore_frame():
                return None, CheckResult(Detail.TAMPER_DETECTED, frame_index=index)
        return self.on_chip.pop(), None

    def spill_frame(self) -> None:
        f = self.frame_size
        entries, self.on_chip = self.on_chip[:f], self.on_chip[f:]
        index = self.spilled_frames
        tag = frame_mac(self._key, entries, index, self.chain_tag)
        try:
            self.memory.store(index, SpillFrame(entries, index, tag))
        except SpillRegionExhausted:
            self.on_chip = entries + self.on_chip
            raise
        self.chain_tag = tag
        self.spilled_frames += 1

    def restore_frame(self) -> bool:
        """Reload the newest spilled frame after verifying it against the chain head.

        A frame that fails verification discards all spilled history, since
        nothing below a broken link can be trusted either.
        """
        index = self.spilled_frames - 1
        frame = self.memory.load(index)
        prev = self.memory.load(index - 1) if index else None
        prev_tag = prev.tag if prev is not None else ZERO_TAG
        ok = (
            frame is not None
            and (index == 0 or prev is not None)
            and frame.frame_index == index
            and len(frame.entries) == self.frame_size
            and hmac.compare_digest(frame.tag, self.chain_tag)
            and hmac.compare_digest(
                frame_mac(self._key, frame.entries, index, prev_tag), self.chain_tag
            )
        )
        if not ok:
            self.spilled_frames = 0
            self.chain_tag = ZERO_TAG
            return False
        self.on_chip = list(frame.entries) + self.on_chip
        self.spilled_frames = index
        self.chain_tag = prev_tag
        return True

    # policy entry points

    def on_call(self, log: CommitLog) -> None:
        self.push(log.next_addr)

    def on_return(self, log: CommitLog) -> CheckResult:
        expected, failure = self.pop()
        if failure is not None:
            return failure
        if expected != log.target_addr:
            return CheckResult(
                Detail.RETURN_MISMATCH, expected=expected, observed=log.target_addr
            )
        return _OK


class PolicyEngine:
    """Dispatches commit logs to the shadow stack and prices each check."""

    def __init__(
        self,
        profile: FirmwareProfile,
        stack: ShadowStack | None = None,
        averaged: bool = False,
    ):
        self.profile = profile
        self.stack = stack if stack is not None else ShadowStack()
        self.averaged = averaged

    def handle_event(self, log: CommitLog) -> CheckResult:
        kind = log.kind
        if kind is ControlFlowKind.NOT_CONTROL_FLOW:
            raise ValueError("non-control-flow instructions never reach the policy")
        if kind is ControlFlowKind.CALL:
            self.stack.on_call(log)
            result = _OK
        elif kind is ControlFlowKind.RETURN:
            result = self.stack.on_return(log)
        elif kind is ControlFlowKind.COROUTINE_SWAP:
            result = self.stack.on_return(log)
            self.stack.on_call(log)
        else:
            # forward edges are logged and priced, not checked
            result = _OK
        cost = cost_of(self.profile, kind, self.averaged)
        if result is _OK:
            return CheckResult(cost_cycles=cost)
        return CheckResult(result.detail, cost, result.expected, result.observed, result.frame_index)


class RotFirmware:
    """ISR model: read the doorbelled log, check it, post the result after its cost."""

    def __init__(self, engine: PolicyEngine):
        self.engine = engine
        self.due: int | None = None
        self.result: CheckResult | None = None
        self.log: CommitLog | None = None

    @property
    def busy(self) -> bool:
        return self.due is not None

    def step(self, cycle: int, mailbox: Mailbox) -> bool:
        progress = False
        if self.due is not None and self.due <= cycle:
            mailbox.rot_write_result(self.result.violation)
            self.due = None
            progress = True
        if self.due is None and mailbox.doorbell:
            self.log = mailbox.rot_read_log()
            self.result = self.engine.handle_event(self.log)
            self.due = cycle + self.result.cost_cycles
            progress = True
            if self.due <= cycle:
                mailbox.rot_write_result(self.result.violation)
                self.due = None
        return progress
