"""Host-side CFI hardware: per-port filters, the CFI queue, and the log writer."""

from __future__ import annotations

import enum
from collections import deque
from typing import Sequence

from .mailbox import Mailbox, beats_for, payload_chunks
from .trace import CommitLog, TraceRecord, make_commit_log

__all__ = [
    "CfiQueue",
    "CfiViolation",
    "LogWriter",
    "LogWriterState",
    "StallReason",
    "filter_ports",
    "log_writer_step",
    "queue_push",
]


class StallReason(enum.Enum):
    NONE = "None"
    QUEUE_FULL = "QueueFull"
    DUAL_CONTROL_FLOW_COMMIT = "DualControlFlowCommit"

    def __str__(self) -> str:
        return self.value


class CfiViolation(Exception):
    """The RoT reported a failed check for ``log``; detected at ``cycle``."""

    def __init__(self, log: CommitLog, cycle: int):
        self.log = log
        self.cycle = cycle
        super().__init__(f"CFI violation at cycle {cycle} for pc 0x{log.pc:x}")


def filter_ports(
    records: Sequence[TraceRecord], xlen: int = 64
) -> tuple[list[CommitLog], StallReason]:
    """Run the two commit-port filters over the records retiring in one cycle.

    At most one log can enter the queue per cycle, so when both ports retire a
    control-flow instruction the second log is pushed one cycle later and the
    commit stage stalls for that cycle.
    """
    if not 1 <= len(records) <= 2:
        raise ValueError("a cycle retires one or two records")
    logs = [log for log in (make_commit_log(r, xlen) for r in records) if log is not None]
    stall = StallReason.DUAL_CONTROL_FLOW_COMMIT if len(logs) == 2 else StallReason.NONE
    return logs, stall


class CfiQueue:
    def __init__(self, depth: int = 1):
        if depth < 1:
            raise ValueError("queue depth must be positive")
        self.depth = depth
        self.entries: deque[CommitLog] = deque()

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def full(self) -> bool:
        return len(self.entries) >= self.depth

    def push(self, log: CommitLog) -> StallReason:
        if self.full:
            return StallReason.QUEUE_FULL
        self.entries.append(log)
        return StallReason.NONE

    def pop(self) -> CommitLog:
        return self.entries.popleft()


def queue_push(q: CfiQueue, log: CommitLog) -> StallReason:
    return q.push(log)


class LogWriterState(enum.Enum):
    IDLE = "Idle"
    TRANSFER = "Transfer"
    WAIT_COMPLETION = "WaitCompletion"
    READ_RESULT = "ReadResult"


class LogWriter:
    """Idle -> Transfer -> WaitCompletion -> ReadResult -> Idle.

    Each bus beat takes ``transfer_cost_per_beat`` cycles. With the default of
    zero the whole log lands in the mailbox in the cycle it is popped.
    """

    def __init__(self, bus_width_bits: int = 64, transfer_cost_per_beat: int = 0):
        if bus_width_bits not in (32, 64, 128):
            raise ValueError("bus width must be 32, 64 or 128 bits")
        if transfer_cost_per_beat < 0:
            raise ValueError("transfer cost must be non-negative")
        self.bus_width_bits = bus_width_bits
        self.beats = beats_for(bus_width_bits)
        self.transfer_cost_per_beat = transfer_cost_per_beat
        self.state = LogWriterState.IDLE
        self.beats_remaining = 0
        self.next_beat_cycle = 0
        self.log: CommitLog | None = None
        self._chunks: list[tuple[int, int]] = []

    def step(self, cycle: int, queue: CfiQueue, mailbox: Mailbox) -> bool:
        """Advance as far as possible within ``cycle``; True if anything changed.

        Raises:
            CfiViolation: after reading a violating result. The FSM is already
                back in Idle when this propagates.
        """
        progress = False
        while True:
            state = self.state
            if state is LogWriterState.IDLE:
                if not queue or not mailbox.ready:
                    return progress
                self.log = queue.pop()
                self._chunks = payload_chunks(self.log, self.bus_width_bits)
                self.beats_remaining = self.beats
                self.next_beat_cycle = cycle + self.transfer_cost_per_beat
                self.state = LogWriterState.TRANSFER
            elif state is LogWriterState.TRANSFER:
                if self.next_beat_cycle > cycle:
                    return progress
                index, value = self._chunks[self.beats - self.beats_remaining]
                self.beats_remaining -= 1
                last = self.beats_remaining == 0
                mailbox.write_chunk(index, value, is_last=last)
                if last:
                    self.state = LogWriterState.WAIT_COMPLETION
                else:
                    self.next_beat_cycle += self.transfer_cost_per_beat
            elif state is LogWriterState.WAIT_COMPLETION:
                if not mailbox.completion:
                    return progress
                self.state = LogWriterState.READ_RESULT
            else:
                violation = mailbox.host_read_result()
                log, self.log = self.log, None
                self.state = LogWriterState.IDLE
                if violation:
                    raise CfiViolation(log, cycle)
            progress = True

    def next_event(self, cycle: int, queue: CfiQueue, mailbox: Mailbox) -> int | None:
        """Earliest cycle after ``cycle`` at which the writer can act on its own."""
        if self.state is LogWriterState.TRANSFER:
            return max(self.next_beat_cycle, cycle + 1)
        if self.state is LogWriterState.IDLE and queue and mailbox.ready:
            return cycle + 1
        return None


def log_writer_step(writer: LogWriter, queue: CfiQueue, mailbox: Mailbox, cycle: int) -> bool:
    return writer.step(cycle, queue, mailbox)
