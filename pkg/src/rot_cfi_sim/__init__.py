"""Trace-driven model of RoT-enforced control-flow integrity on a RISC-V host."""

from .commit_stage import CfiQueue, CfiViolation, LogWriter, LogWriterState, StallReason, filter_ports
from .mailbox import Mailbox, ProtocolError, ProtocolMonitor
from .policy import CheckResult, Detail, MainMemory, PolicyEngine, ShadowStack
from .profiles import BUILTIN_PROFILES, FirmwareProfile, cost_of, derive_profile_totals, get_profile
from .sim import SimConfig, SimReport, compare_profiles, emit_report, run
from .trace import (
    CommitLog,
    ControlFlowKind,
    DecodeError,
    TraceFormatError,
    TraceRecord,
    classify,
    expand_compressed,
    instruction_length,
    make_commit_log,
    parse_trace,
    serialize_trace,
)

__version__ = "0.1.0"
