"""Synthetic trace generators.

Every generator returns a list of :class:`TraceRecord`. The randomized ones
also return the control-flow kind each record was built as, so tests can use
them as ground truth without going through the decoder.
"""

from __future__ import annotations

import random
from dataclasses import replace
from typing import Sequence

from .trace import (
    C_NOP,
    NOP,
    ControlFlowKind,
    TraceRecord,
    encode_c_jalr,
    encode_c_jr,
    encode_jal,
    encode_jalr,
    instruction_length,
    make_commit_log,
)

__all__ = [
    "balanced_tree",
    "burst",
    "corrupt_return",
    "fixed_gap",
    "random_balanced",
    "random_trace",
]

BASE_PC = 0x80000000
FUNC_STRIDE = 0x100
RA, T0, T1, A5 = 1, 5, 6, 15
RET = encode_jalr(0, RA)
C_RET = encode_c_jr(RA)

CALL, RETURN = ControlFlowKind.CALL, ControlFlowKind.RETURN
INDIRECT, SWAP = ControlFlowKind.INDIRECT_JUMP, ControlFlowKind.COROUTINE_SWAP
NCF = ControlFlowKind.NOT_CONTROL_FLOW


class _Emitter:
    def __init__(self, start_cycle: int, gap, rng: random.Random | None, pair_prob: float):
        self.cycle = start_cycle
        self.gap = gap
        self.rng = rng
        self.pair_prob = pair_prob
        self.records: list[TraceRecord] = []
        self.kinds: list[ControlFlowKind] = []
        self._in_cycle = 0

    def emit(self, pc: int, raw: int, npc: int, kind: ControlFlowKind) -> None:
        if self.records:
            pair = (
                self.rng is not None
                and self._in_cycle == 1
                and self.rng.random() < self.pair_prob
            )
            if pair:
                self._in_cycle = 2
            else:
                self.cycle += self.gap() if callable(self.gap) else self.gap
                self._in_cycle = 1
        else:
            self._in_cycle = 1
        self.records.append(TraceRecord(self.cycle, pc, raw, npc))
        self.kinds.append(kind)


def _call_encoding(pc: int, target: int, rng: random.Random | None) -> int:
    choice = rng.randrange(4) if rng is not None else 0
    offset = target - pc
    if choice == 0 and -(1 << 20) <= offset < (1 << 20):
        return encode_jal(RA, offset)
    if choice == 1:
        return encode_jalr(RA, T1)
    if choice == 2:
        return encode_c_jalr(A5)
    return encode_jalr(T0, T1) if choice == 3 else encode_jalr(RA, T1)


def _return_encoding(rng: random.Random | None, link: int = RA) -> int:
    if link == T0:
        return encode_jalr(0, T0)
    if rng is None:
        return RET
    return C_RET if rng.random() < 0.5 else RET


def balanced_tree(
    depth: int,
    width: int,
    *,
    gap: int = 1,
    start_cycle: int = 1,
    seed: int | None = None,
    filler: int = 0,
    pair_prob: float = 0.0,
) -> list[TraceRecord]:
    """Well-nested call tree: ``width`` calls per function down to ``depth`` levels.

    The root function makes ``width`` calls and never returns, so the trace
    holds ``sum(width**k for k in 1..depth)`` calls and as many returns.
    ``filler`` non-control-flow instructions are placed before each call and
    each return.
    """
    if depth < 0 or width < 0 or gap < 0 or filler < 0:
        raise ValueError("depth, width, gap and filler must be non-negative")
    if gap == 0 and pair_prob == 0.0:
        raise ValueError("gap 0 would put every record in one cycle")
    rng = random.Random(seed) if seed is not None else None
    records, _ = _tree(depth, width, gap, start_cycle, rng, filler, pair_prob)
    return records


def _tree(depth, width, gap, start_cycle, rng, filler, pair_prob):
    em = _Emitter(start_cycle, gap, rng, pair_prob)
    next_func = [1]

    def fill(pc: int) -> int:
        n = filler if rng is None else rng.randint(0, filler)
        for _ in range(n):
            raw = NOP if rng is None or rng.random() < 0.5 else C_NOP
            npc = pc + instruction_length(raw)
            em.emit(pc, raw, npc, NCF)
            pc = npc
        return pc

    def body(entry: int, level: int, return_to: int | None, link: int) -> None:
        pc = entry
        if level < depth:
            for _ in range(width):
                pc = fill(pc)
                callee = BASE_PC + next_func[0] * FUNC_STRIDE
                next_func[0] += 1
                raw = _call_encoding(pc, callee, rng)
                em.emit(pc, raw, callee, CALL)
                body(callee, level + 1, pc + instruction_length(raw), T0 if (raw >> 7) & 0x1F == T0 else RA)
                pc += instruction_length(raw)
        if return_to is not None:
            pc = fill(pc)
            em.emit(pc, _return_encoding(rng, link), return_to, RETURN)

    body(BASE_PC, 0, None, RA)
    return em.records, em.kinds


def burst(n: int, *, start_cycle: int = 1, compressed: bool = False) -> list[TraceRecord]:
    """``n`` returns retiring in consecutive cycles (they underflow the shadow stack)."""
    if n < 0:
        raise ValueError("n must be non-negative")
    raw = C_RET if compressed else RET
    length = instruction_length(raw)
    return [
        TraceRecord(start_cycle + i, BASE_PC + 0x10 * i, raw, BASE_PC + 0x10 * i + 0x1000 + length)
        for i in range(n)
    ]


def fixed_gap(n: int, gap: int, *, start_cycle: int = 1) -> list[TraceRecord]:
    """``n`` call/return pairs with every control-flow retire ``gap`` cycles apart.

    A trailing nop one more gap after the last return gives the final check
    room to finish inside the unprotected runtime.
    """
    if n < 0 or gap < 1:
        raise ValueError("n must be non-negative and gap positive")
    records = []
    cycle = start_cycle
    callee = BASE_PC + 0x1000
    for i in range(n):
        site = BASE_PC + 8 * i
        records.append(TraceRecord(cycle, site, encode_jal(RA, callee - site), callee))
        cycle += gap
        records.append(TraceRecord(cycle, callee, RET, site + 4))
        cycle += gap
    records.append(TraceRecord(cycle, BASE_PC + 8 * n, NOP, BASE_PC + 8 * n + 4))
    return records


def random_balanced(
    rng: random.Random,
    max_calls: int = 200,
    *,
    max_gap: int = 40,
    filler: int = 3,
    pair_prob: float = 0.1,
) -> tuple[list[TraceRecord], list[ControlFlowKind]]:
    """Random well-nested program: random fan-out per function, mixed encodings."""
    em = _Emitter(rng.randint(0, 5), lambda: rng.randint(1, max_gap), rng, pair_prob)
    budget = [rng.randint(0, max_calls)]
    next_func = [1]

    def fill(pc: int) -> int:
        for _ in range(rng.randint(0, filler)):
            raw = NOP if rng.random() < 0.5 else C_NOP
            em.emit(pc, raw, pc + instruction_length(raw), NCF)
            pc += instruction_length(raw)
        return pc

    # iterative walk so deep random chains do not hit the recursion limit
    pc = BASE_PC
    frames: list[tuple[int, int]] = []  # (return address, link register)
    while True:
        want_call = budget[0] > 0 and (not frames or rng.random() < 0.55)
        if want_call:
            budget[0] -= 1
            pc = fill(pc)
            callee = BASE_PC + next_func[0] * FUNC_STRIDE
            next_func[0] += 1
            raw = _call_encoding(pc, callee, rng)
            em.emit(pc, raw, callee, CALL)
            link = T0 if (raw >> 7) & 0x1F == T0 else RA
            frames.append((pc + instruction_length(raw), link))
            pc = callee
        elif frames:
            pc = fill(pc)
            ret_to, link = frames.pop()
            em.emit(pc, _return_encoding(rng, link), ret_to, RETURN)
            pc = ret_to
        else:
            break
    pc = fill(pc)
    return em.records, em.kinds


def random_trace(
    rng: random.Random,
    n_records: int,
    cf_density: float,
    *,
    max_gap: int = 8,
    pair_prob: float = 0.2,
) -> tuple[list[TraceRecord], list[ControlFlowKind]]:
    """Unstructured trace with the given fraction of control-flow records.

    Calls and returns are not matched, so the policy will report violations.
    The mix covers all four control-flow kinds and compressed encodings.
    """
    em = _Emitter(rng.randint(0, 3), lambda: rng.randint(1, max_gap), rng, pair_prob)
    pc = BASE_PC
    for _ in range(n_records):
        if rng.random() < cf_density:
            kind = rng.choice((CALL, CALL, RETURN, RETURN, INDIRECT, SWAP))
            if kind is CALL:
                raw = rng.choice((encode_jal(RA, 0x40), encode_jalr(RA, T1), encode_c_jalr(A5)))
            elif kind is RETURN:
                raw = rng.choice((RET, C_RET, encode_jalr(0, T0)))
            elif kind is INDIRECT:
                raw = rng.choice((encode_jalr(0, T1), encode_c_jr(A5)))
            else:
                raw = encode_jalr(RA, T0)
        else:
            kind = NCF
            raw = rng.choice((NOP, C_NOP, encode_jal(0, 0x20)))
        npc = (pc + rng.randrange(-0x400, 0x400, 2)) & ~1 if kind is not NCF else pc + instruction_length(raw)
        em.emit(pc, raw, npc, kind)
        pc = npc if npc > 0 else BASE_PC
    return em.records, em.kinds


def corrupt_return(
    records: Sequence[TraceRecord], index: int, *, seed: int | None = None
) -> list[TraceRecord]:
    """Copy of ``records`` with the target of the return at ``index`` redirected."""
    if not 0 <= index < len(records):
        raise IndexError(f"trace index {index} out of range")
    log = make_commit_log(records[index])
    if log is None or log.kind is not RETURN:
        raise ValueError(f"trace index {index} is not a return")
    rng = random.Random(seed)
    delta = rng.randrange(2, 1 << 32, 2)
    out = list(records)
    out[index] = replace(records[index], npc=records[index].npc ^ delta)
    return out
