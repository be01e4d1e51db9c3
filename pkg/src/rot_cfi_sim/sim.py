"""Trace-driven replay of the CFI pipeline and slowdown reporting.

The unprotected core's timing is the trace itself. The protected run replays
the same retire sequence through the filters, queue, log writer, mailbox and
RoT firmware. A stalled retire shifts every later retire by the same amount,
so idle gaps in the trace give the checker time to catch up without hiding
delay that has already accumulated.

Within one cycle the order is: RoT completes or starts a check, the log
writer reads results and pops the queue, then the core retires. A log pushed
in cycle ``t`` is therefore popped no earlier than ``t + 1``.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Iterable, Sequence

from .commit_stage import CfiQueue, CfiViolation, LogWriter, StallReason
from .mailbox import Mailbox
from .policy import CheckResult, Detail, MainMemory, PolicyEngine, RotFirmware, ShadowStack
from .profiles import BUILTIN_PROFILES, FirmwareProfile
from .trace import ControlFlowKind, TraceRecord, make_commit_log, parse_trace

__all__ = [
    "REPORT_SCHEMA",
    "SimConfig",
    "SimReport",
    "ViolationRecord",
    "compare_profiles",
    "emit_report",
    "format_comparison",
    "run",
]

SCHEMA_VERSION = 1
DASH = "–"

_NEVER = float("inf")
_KINDS = [k for k in ControlFlowKind if k is not ControlFlowKind.NOT_CONTROL_FLOW]
_PROFILE_ORDER = {"optimized": 0, "polling": 1, "irq": 2}
_PROFILE_LABELS = {"optimized": "Opt.", "polling": "Poll.", "irq": "IRQ"}


@dataclass(frozen=True)
class SimConfig:
    profile: FirmwareProfile = BUILTIN_PROFILES["optimized"]
    queue_depth: int = 1
    bus_width_bits: int = 64
    transfer_cost_per_beat: int = 0
    halt_on_violation: bool = False
    averaged: bool = False
    stack_capacity: int | None = 1024
    xlen: int = 64

    def __post_init__(self):
        if self.queue_depth < 1:
            raise ValueError("queue_depth must be >= 1")
        if self.bus_width_bits not in (32, 64, 128):
            raise ValueError("bus_width_bits must be 32, 64 or 128")
        if self.transfer_cost_per_beat < 0:
            raise ValueError("transfer_cost_per_beat must be >= 0")
        if self.xlen not in (32, 64):
            raise ValueError("xlen must be 32 or 64")

    def sort_key(self) -> tuple:
        name = self.profile.variant
        return (
            self.queue_depth,
            self.bus_width_bits,
            self.transfer_cost_per_beat,
            self.averaged,
            _PROFILE_ORDER.get(name, len(_PROFILE_ORDER)),
            name,
        )

    def to_dict(self) -> dict:
        return {
            "profile": self.profile.variant,
            "call_cycles": self.profile.call_cycles,
            "return_cycles": self.profile.return_cycles,
            "queue_depth": self.queue_depth,
            "bus_width_bits": self.bus_width_bits,
            "transfer_cost_per_beat": self.transfer_cost_per_beat,
            "halt_on_violation": self.halt_on_violation,
            "averaged": self.averaged,
            "stack_capacity": self.stack_capacity,
            "xlen": self.xlen,
        }


@dataclass(frozen=True)
class ViolationRecord:
    trace_index: int
    log_index: int
    cycle: int
    pc: int
    result: CheckResult

    def to_dict(self) -> dict:
        r = self.result
        return {
            "trace_index": self.trace_index,
            "log_index": self.log_index,
            "cycle": self.cycle,
            "pc": self.pc,
            "detail": r.detail.value,
            "expected": r.expected,
            "observed": r.observed,
            "frame_index": r.frame_index,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ViolationRecord":
        result = CheckResult(
            Detail(d["detail"]),
            expected=d.get("expected"),
            observed=d.get("observed"),
            frame_index=d.get("frame_index"),
        )
        return cls(d["trace_index"], d["log_index"], d["cycle"], d["pc"], result)


@dataclass
class SimReport:
    baseline_cycles: int
    cfi_cycles: int
    trace_records: int
    retired_instructions: int
    cf_event_count: int
    per_kind: dict[str, int]
    stall_cycles: dict[str, int]
    violations: list[ViolationRecord]
    max_queue_occupancy: int
    halted: bool = False
    queue_residue: int = 0
    config: dict = field(default_factory=dict)
    label: str = ""
    # per-record retire cycles and per-log result-read cycles; not serialized
    retire_cycles: list[int] | None = field(default=None, repr=False, compare=False)
    completion_cycles: list[int] | None = field(default=None, repr=False, compare=False)

    @property
    def slowdown_percent(self) -> Fraction | None:
        """Exact slowdown; None when the baseline is zero but the CFI run is not."""
        extra = self.cfi_cycles - self.baseline_cycles
        if self.baseline_cycles == 0:
            return Fraction(0) if extra == 0 else None
        return Fraction(100 * extra, self.baseline_cycles)

    @property
    def total_stall_cycles(self) -> int:
        return sum(self.stall_cycles.values())

    def slowdown_text(self) -> str:
        """Integer percent, or a dash when it rounds to zero."""
        s = self.slowdown_percent
        if s is None:
            return "inf"
        pct = math.floor(s + Fraction(1, 2))
        return DASH if pct == 0 else str(pct)

    def to_dict(self) -> dict:
        s = self.slowdown_percent
        return {
            "schema": SCHEMA_VERSION,
            "label": self.label,
            "config": self.config,
            "baseline_cycles": self.baseline_cycles,
            "cfi_cycles": self.cfi_cycles,
            "slowdown_percent": None
            if s is None
            else {"numerator": s.numerator, "denominator": s.denominator, "value": float(s)},
            "trace_records": self.trace_records,
            "retired_instructions": self.retired_instructions,
            "cf_event_count": self.cf_event_count,
            "per_kind": dict(self.per_kind),
            "stall_cycles": dict(self.stall_cycles),
            "max_queue_occupancy": self.max_queue_occupancy,
            "halted": self.halted,
            "queue_residue": self.queue_residue,
            "violations": [v.to_dict() for v in self.violations],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SimReport":
        if d.get("schema") != SCHEMA_VERSION:
            raise ValueError(f"unsupported report schema {d.get('schema')!r}")
        return cls(
            baseline_cycles=d["baseline_cycles"],
            cfi_cycles=d["cfi_cycles"],
            trace_records=d["trace_records"],
            retired_instructions=d["retired_instructions"],
            cf_event_count=d["cf_event_count"],
            per_kind=dict(d["per_kind"]),
            stall_cycles=dict(d["stall_cycles"]),
            violations=[ViolationRecord.from_dict(v) for v in d["violations"]],
            max_queue_occupancy=d["max_queue_occupancy"],
            halted=d["halted"],
            queue_residue=d["queue_residue"],
            config=dict(d["config"]),
            label=d.get("label", ""),
        )


_NULLABLE_INT = {"type": ["integer", "null"]}

REPORT_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "rot-cfi-sim report",
    "type": "object",
    "required": [
        "schema", "label", "config", "baseline_cycles", "cfi_cycles", "slowdown_percent",
        "trace_records", "retired_instructions", "cf_event_count", "per_kind",
        "stall_cycles", "max_queue_occupancy", "halted", "queue_residue", "violations",
    ],
    "additionalProperties": False,
    "properties": {
        "schema": {"const": SCHEMA_VERSION},
        "label": {"type": "string"},
        "config": {"type": "object"},
        "baseline_cycles": {"type": "integer", "minimum": 0},
        "cfi_cycles": {"type": "integer", "minimum": 0},
        "slowdown_percent": {
            "oneOf": [
                {"type": "null"},
                {
                    "type": "object",
                    "required": ["numerator", "denominator", "value"],
                    "additionalProperties": False,
                    "properties": {
                        "numerator": {"type": "integer", "minimum": 0},
                        "denominator": {"type": "integer", "minimum": 1},
                        "value": {"type": "number", "minimum": 0},
                    },
                },
            ]
        },
        "trace_records": {"type": "integer", "minimum": 0},
        "retired_instructions": {"type": "integer", "minimum": 0},
        "cf_event_count": {"type": "integer", "minimum": 0},
        "per_kind": {
            "type": "object",
            "properties": {k.value: {"type": "integer", "minimum": 0} for k in _KINDS},
            "additionalProperties": False,
        },
        "stall_cycles": {
            "type": "object",
            "properties": {
                r.value: {"type": "integer", "minimum": 0}
                for r in StallReason
                if r is not StallReason.NONE
            },
            "additionalProperties": False,
        },
        "max_queue_occupancy": {"type": "integer", "minimum": 0},
        "halted": {"type": "boolean"},
        "queue_residue": {"type": "integer", "minimum": 0},
        "violations": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["trace_index", "log_index", "cycle", "pc", "detail"],
                "properties": {
                    "trace_index": {"type": "integer", "minimum": 0},
                    "log_index": {"type": "integer", "minimum": 0},
                    "cycle": {"type": "integer", "minimum": 0},
                    "pc": {"type": "integer", "minimum": 0},
                    "detail": {"enum": [d.value for d in Detail if d is not Detail.OK]},
                    "expected": _NULLABLE_INT,
                    "observed": _NULLABLE_INT,
                    "frame_index": _NULLABLE_INT,
                },
            },
        },
    },
}


class _Pipeline:
    """One simulation instance: core, CFI queue, log writer, mailbox and RoT."""

    def __init__(self, records: Sequence[TraceRecord], config: SimConfig, record_events: bool):
        self.records = records
        self.config = config
        self.logs = [make_commit_log(rec, config.xlen) for rec in records]
        self.queue = CfiQueue(config.queue_depth)
        self.writer = LogWriter(config.bus_width_bits, config.transfer_cost_per_beat)
        self.mailbox = Mailbox(config.bus_width_bits, record_events=record_events)
        stack = ShadowStack(config.stack_capacity, memory=MainMemory())
        self.rot = RotFirmware(PolicyEngine(config.profile, stack, config.averaged))

    def run(self, timeline: bool) -> SimReport:
        records, logs, cfg = self.records, self.logs, self.config
        queue, writer, mailbox, rot = self.queue, self.writer, self.mailbox, self.rot
        n = len(records)
        retire = [0] * n if timeline else None
        completions: list[int] = []
        pushed: list[int] = []  # trace index of every pushed log, in push order
        kinds: Counter[str] = Counter()
        stalls = {StallReason.QUEUE_FULL: 0, StallReason.DUAL_CONTROL_FLOW_COMMIT: 0}
        violations: list[ViolationRecord] = []
        blocked: tuple[StallReason, int] | None = None
        max_occ = 0
        last_push = -1
        last_retire = 0
        halted = False

        t = records[0].cycle if n else 0
        idx = 0
        ready_at = t
        while True:
            while True:
                progress = rot.step(t, mailbox)
                reads = mailbox.results_read
                try:
                    progress |= writer.step(t, queue, mailbox)
                except CfiViolation as exc:
                    k = mailbox.results_read - 1
                    violations.append(ViolationRecord(pushed[k], k, exc.cycle, exc.log.pc, rot.result))
                    progress = True
                    if cfg.halt_on_violation:
                        halted = True
                completions.extend([t] * (mailbox.results_read - reads))
                if halted or not progress:
                    break

            if blocked is not None:
                stalls[blocked[0]] += t - blocked[1]
                blocked = None
            if halted:
                break

            # Retire everything the core can before the pipeline next acts.
            # Until then queue occupancy only grows and the checker is frozen.
            horizon = rot.due if rot.due is not None else _NEVER
            w = writer.next_event(t, queue, mailbox)
            if w is not None and w < horizon:
                horizon = w
            while idx < n:
                rt = ready_at if ready_at > t else t
                if rt != t and rt >= horizon:
                    break
                log = logs[idx]
                if log is not None:
                    if queue.full:
                        blocked = (StallReason.QUEUE_FULL, rt)
                        break
                    if last_push == rt:
                        blocked = (StallReason.DUAL_CONTROL_FLOW_COMMIT, rt)
                        break
                    queue.push(log)
                    last_push = rt
                    pushed.append(idx)
                    kinds[log.kind.value] += 1
                    if len(queue) > max_occ:
                        max_occ = len(queue)
                    w = writer.next_event(rt, queue, mailbox)
                    if w is not None and w < horizon:
                        horizon = w
                if retire is not None:
                    retire[idx] = rt
                last_retire = rt
                idx += 1
                if idx < n:
                    ready_at = rt + records[idx].cycle - records[idx - 1].cycle

            candidates = [horizon] if horizon is not _NEVER else []
            if idx < n:
                if blocked is None:
                    candidates.append(max(ready_at, t + 1))
                elif blocked[0] is StallReason.DUAL_CONTROL_FLOW_COMMIT:
                    candidates.append(blocked[1] + 1)
            if not candidates:
                break
            t = min(candidates)

        return SimReport(
            baseline_cycles=records[-1].cycle if n else 0,
            cfi_cycles=t if halted else max(t, last_retire),
            trace_records=n,
            retired_instructions=idx,
            cf_event_count=len(pushed),
            per_kind={k.value: kinds.get(k.value, 0) for k in _KINDS},
            stall_cycles={r.value: c for r, c in stalls.items()},
            violations=violations,
            max_queue_occupancy=max_occ,
            halted=halted,
            queue_residue=len(queue),
            config=cfg.to_dict(),
            retire_cycles=retire,
            completion_cycles=completions if timeline else None,
        )


def run(
    trace: Sequence[TraceRecord] | str,
    config: SimConfig | None = None,
    *,
    label: str = "",
    timeline: bool = False,
    record_events: bool = False,
) -> SimReport:
    """Replay ``trace`` under ``config`` and return the slowdown report.

    With ``record_events`` the mailbox event log is attached to the report as
    ``report.mailbox_events`` for protocol monitoring.
    """
    records = parse_trace(trace) if isinstance(trace, str) else list(trace)
    pipeline = _Pipeline(records, config or SimConfig(), record_events)
    report = pipeline.run(timeline)
    report.label = label
    if record_events:
        report.mailbox_events = pipeline.mailbox.events
    return report


def _run_one(args):
    records, config, label = args
    return run(records, config, label=label)


def compare_profiles(
    trace: Sequence[TraceRecord] | str,
    configs: Iterable[SimConfig],
    *,
    label: str = "",
    jobs: int = 1,
) -> list[SimReport]:
    """Run every config on the same trace; results come back in config-key order."""
    records = parse_trace(trace) if isinstance(trace, str) else list(trace)
    ordered = sorted(configs, key=SimConfig.sort_key)
    work = [(records, cfg, label) for cfg in ordered]
    if jobs > 1 and len(work) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_run_one, work))
    return [_run_one(w) for w in work]


def emit_report(report: SimReport, fmt: str = "text") -> str:
    if fmt == "json":
        return json.dumps(report.to_dict(), indent=2)
    if fmt != "text":
        raise ValueError(f"unknown report format {fmt!r}")
    cfg = report.config
    name = report.label or "trace"
    lines = [
        f"{'trace':<16} {'cycles':>12} {'CF':>10} {'slowdown[%]':>12}",
        f"{name:<16} {report.baseline_cycles:>12} {report.cf_event_count:>10} "
        f"{report.slowdown_text():>12}",
        "",
        f"profile {cfg.get('profile')}  queue depth {cfg.get('queue_depth')}  "
        f"bus {cfg.get('bus_width_bits')}b"
        + ("  averaged" if cfg.get("averaged") else ""),
        f"cfi cycles {report.cfi_cycles}  retired {report.retired_instructions}/"
        f"{report.trace_records}  max queue occupancy {report.max_queue_occupancy}",
        "stalls "
        + "  ".join(f"{k} {v}" for k, v in report.stall_cycles.items()),
        "events " + "  ".join(f"{k} {v}" for k, v in report.per_kind.items()),
    ]
    if report.halted:
        lines.append(f"halted on violation, {report.queue_residue} log(s) left in queue")
    for v in report.violations:
        lines.append(
            f"violation at trace index {v.trace_index} (pc 0x{v.pc:x}, cycle {v.cycle}): "
            f"{v.result.describe()}"
        )
    return "\n".join(lines) + "\n"


def format_comparison(reports: Sequence[SimReport]) -> str:
    """Table with one row per (trace, non-profile settings) and one slowdown column per profile."""
    rows: dict[tuple, dict[str, SimReport]] = {}
    profiles: dict[str, tuple] = {}
    for rep in reports:
        cfg = rep.config
        key = (rep.label, cfg["queue_depth"], cfg["bus_width_bits"],
               cfg["transfer_cost_per_beat"], cfg["averaged"])
        rows.setdefault(key, {})[cfg["profile"]] = rep
        name = cfg["profile"]
        profiles[name] = (_PROFILE_ORDER.get(name, len(_PROFILE_ORDER)), name)
    columns = sorted(profiles, key=profiles.get)
    header = f"{'trace':<16} {'depth':>5} {'cycles':>12} {'CF':>10} " + " ".join(
        f"{_PROFILE_LABELS.get(c, c):>8}" for c in columns
    )
    lines = [header]
    for key in sorted(rows, key=lambda k: (k[0], k[1], k[2], k[3], k[4])):
        reps = rows[key]
        any_rep = next(iter(reps.values()))
        cells = " ".join(
            f"{reps[c].slowdown_text() if c in reps else '':>8}" for c in columns
        )
        label = key[0] or "trace"
        lines.append(
            f"{label:<16} {key[1]:>5} {any_rep.baseline_cycles:>12} "
            f"{any_rep.cf_event_count:>10} {cells}"
        )
    return "\n".join(lines) + "\n"


def with_profile(config: SimConfig, profile: FirmwareProfile) -> SimConfig:
    return replace(config, profile=profile)
