"""Firmware cost profiles for the RoT shadow-stack check.

The built-in tables carry the per-category instruction and cycle counts for
the IRQ, Polling and Optimized firmware variants. Cycle cells are the source
of truth. Per-kind latencies are their sums.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

from .trace import ControlFlowKind

__all__ = [
    "BUILTIN_PROFILES",
    "CATEGORIES",
    "Cell",
    "Derivation",
    "FirmwareProfile",
    "PROFILE_DIR_ENV",
    "ProfileError",
    "UnitCosts",
    "cost_of",
    "derive_profile_totals",
    "get_profile",
    "load_profile",
]

PROFILE_DIR_ENV = "ROT_CFI_SIM_PROFILE_DIR"

OPS = ("call", "return")
PHASES = ("irq", "cfi")
CATEGORIES = ("logic", "mem_rot", "mem_soc")


class ProfileError(ValueError):
    pass


@dataclass(frozen=True)
class Cell:
    instructions: int
    cycles: int


@dataclass(frozen=True)
class UnitCosts:
    rot_mem_cycles_per_access: int
    soc_mem_cycles_per_access: int
    irq_wakeup_cycles: int
    # registers the ISR saves on entry and restores on exit
    irq_saved_registers: int = 6


# breakdown[op][phase][category]; a phase the variant does not execute is absent
Breakdown = Mapping[str, Mapping[str, Mapping[str, Cell]]]


@dataclass(frozen=True)
class FirmwareProfile:
    variant: str
    call_cycles: int
    return_cycles: int
    unit_costs: UnitCosts
    breakdown: Breakdown = field(default_factory=dict)

    def __post_init__(self):
        if self.call_cycles < 0 or self.return_cycles < 0:
            raise ProfileError(f"{self.variant}: latencies must be non-negative")
        for op, total in (("call", self.call_cycles), ("return", self.return_cycles)):
            if op in self.breakdown:
                summed = self.breakdown_total(op)
                if summed != total:
                    raise ProfileError(
                        f"{self.variant}: {op} breakdown sums to {summed}, expected {total}"
                    )

    def breakdown_total(self, op: str, phase: str | None = None) -> int:
        phases = self.breakdown.get(op, {})
        selected = [phases.get(phase, {})] if phase is not None else list(phases.values())
        return sum(cell.cycles for cells in selected for cell in cells.values())

    @property
    def average_latency(self) -> int:
        # exact for the built-ins; odd user sums round half up
        return (self.call_cycles + self.return_cycles + 1) // 2

    def scaled(self, call_cycles: int, return_cycles: int, variant: str | None = None):
        """A copy with replaced latencies and no breakdown (for sweeps and tests)."""
        return FirmwareProfile(variant or self.variant, call_cycles, return_cycles, self.unit_costs)

    def to_dict(self) -> dict:
        return {
            "variant": self.variant,
            "call_cycles": self.call_cycles,
            "return_cycles": self.return_cycles,
            "unit_costs": vars(self.unit_costs).copy(),
            "breakdown": {
                op: {
                    phase: {cat: [c.instructions, c.cycles] for cat, c in cells.items()}
                    for phase, cells in phases.items()
                }
                for op, phases in self.breakdown.items()
            },
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "FirmwareProfile":
        try:
            breakdown = {
                op: {
                    phase: {cat: Cell(int(v[0]), int(v[1])) for cat, v in cells.items()}
                    for phase, cells in phases.items()
                }
                for op, phases in data.get("breakdown", {}).items()
            }
            unknown = {
                f"{op}.{phase}.{cat}"
                for op, phases in breakdown.items()
                for phase, cells in phases.items()
                for cat in cells
                if op not in OPS or phase not in PHASES or cat not in CATEGORIES
            }
            if unknown:
                raise ProfileError(f"unknown breakdown cells: {sorted(unknown)}")
            units = data.get("unit_costs", {})
            return cls(
                variant=str(data["variant"]),
                call_cycles=int(data["call_cycles"]),
                return_cycles=int(data["return_cycles"]),
                unit_costs=UnitCosts(
                    rot_mem_cycles_per_access=int(units.get("rot_mem_cycles_per_access", 5)),
                    soc_mem_cycles_per_access=int(units.get("soc_mem_cycles_per_access", 12)),
                    irq_wakeup_cycles=int(units.get("irq_wakeup_cycles", 45)),
                    irq_saved_registers=int(units.get("irq_saved_registers", 6)),
                ),
                breakdown=breakdown,
            )
        except (KeyError, TypeError, IndexError, ValueError) as exc:
            if isinstance(exc, ProfileError):
                raise
            raise ProfileError(f"malformed profile table: {exc!r}") from exc


def _cells(logic, mem_rot, mem_soc) -> dict[str, Cell]:
    return {"logic": Cell(*logic), "mem_rot": Cell(*mem_rot), "mem_soc": Cell(*mem_soc)}


_BASE_UNITS = UnitCosts(rot_mem_cycles_per_access=5, soc_mem_cycles_per_access=12, irq_wakeup_cycles=45)
_FAST_UNITS = UnitCosts(rot_mem_cycles_per_access=1, soc_mem_cycles_per_access=8, irq_wakeup_cycles=45)

# (instructions, cycles) per cell
_IRQ_HANDLING = _cells((8, 59), (14, 74), (2, 22))
_CALL_CHECK = _cells((15, 27), (5, 28), (4, 48))
_RETURN_CHECK_IRQ = _cells((15, 45), (5, 28), (4, 48))
_RETURN_CHECK = _cells((25, 45), (5, 28), (4, 48))
_CALL_CHECK_FAST = _cells((15, 27), (5, 5), (4, 32))
_RETURN_CHECK_FAST = _cells((25, 45), (5, 5), (4, 32))

IRQ = FirmwareProfile(
    "irq",
    call_cycles=258,
    return_cycles=276,
    unit_costs=_BASE_UNITS,
    breakdown={
        "call": {"irq": _IRQ_HANDLING, "cfi": _CALL_CHECK},
        "return": {"irq": _IRQ_HANDLING, "cfi": _RETURN_CHECK_IRQ},
    },
)
POLLING = FirmwareProfile(
    "polling",
    call_cycles=103,
    return_cycles=121,
    unit_costs=_BASE_UNITS,
    breakdown={"call": {"cfi": _CALL_CHECK}, "return": {"cfi": _RETURN_CHECK}},
)
OPTIMIZED = FirmwareProfile(
    "optimized",
    call_cycles=64,
    return_cycles=82,
    unit_costs=_FAST_UNITS,
    breakdown={"call": {"cfi": _CALL_CHECK_FAST}, "return": {"cfi": _RETURN_CHECK_FAST}},
)

BUILTIN_PROFILES: dict[str, FirmwareProfile] = {p.variant: p for p in (IRQ, POLLING, OPTIMIZED)}


def cost_of(profile: FirmwareProfile, kind: ControlFlowKind, averaged: bool = False) -> int:
    """Check latency for one control-flow event.

    Indirect jumps are charged the call-side latency and coroutine swaps the
    return-side latency, since the swap starts with a pop-and-compare.
    """
    if kind is ControlFlowKind.NOT_CONTROL_FLOW:
        return 0
    if averaged:
        return profile.average_latency
    if kind in (ControlFlowKind.RETURN, ControlFlowKind.COROUTINE_SWAP):
        return profile.return_cycles
    return profile.call_cycles


def load_profile(path: str | os.PathLike) -> FirmwareProfile:
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ProfileError(f"cannot read profile {path}: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise ProfileError(f"{path}: invalid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ProfileError(f"{path}: expected a JSON object")
    return FirmwareProfile.from_dict(data)


def get_profile(name: str) -> FirmwareProfile:
    """Resolve a built-in name, a JSON file path, or ``$ROT_CFI_SIM_PROFILE_DIR/<name>.json``."""
    key = name.lower()
    if key in BUILTIN_PROFILES:
        return BUILTIN_PROFILES[key]
    candidate = Path(name)
    if candidate.is_file():
        return load_profile(candidate)
    directory = os.environ.get(PROFILE_DIR_ENV)
    if directory:
        for fname in (f"{name}.json", name):
            path = Path(directory) / fname
            if path.is_file():
                return load_profile(path)
    raise ProfileError(f"unknown profile {name!r}")


# -- reconstruction from unit costs --------------------------------------------


@dataclass
class Derivation:
    irq_overhead_cycles: int
    cells: dict[tuple[str, str, str], int]
    deviations: dict[tuple[str, str, str], int]
    flagged: list[tuple[str, str, str]]

    def total(self, op: str) -> int:
        return sum(v for (o, _, _), v in self.cells.items() if o == op)


def derive_profile_totals(
    counts: Mapping[str, Mapping[str, Mapping[str, int]]],
    unit_costs: UnitCosts,
    reference: FirmwareProfile | None = None,
    logic_cycles_per_instruction: float = 1.0,
    tolerance: int = 0,
) -> Derivation:
    """Rebuild cycle cells from instruction counts and unit memory costs.

    ``counts[op][phase][category]`` is an instruction (or access) count.
    Memory cells are ``accesses * unit cost``; logic cells use a flat CPI,
    which the measured tables do not follow, so logic cells are expected to
    be flagged. Cells differing from ``reference`` by more than ``tolerance``
    cycles are listed in ``flagged``.
    """
    per_access = {
        "mem_rot": unit_costs.rot_mem_cycles_per_access,
        "mem_soc": unit_costs.soc_mem_cycles_per_access,
    }
    cells: dict[tuple[str, str, str], int] = {}
    for op, phases in counts.items():
        for phase, cats in phases.items():
            for cat, n in cats.items():
                if cat == "logic":
                    cells[(op, phase, cat)] = round(n * logic_cycles_per_instruction)
                else:
                    cells[(op, phase, cat)] = n * per_access[cat]
    deviations: dict[tuple[str, str, str], int] = {}
    if reference is not None:
        for (op, phase, cat), value in cells.items():
            ref = reference.breakdown.get(op, {}).get(phase, {}).get(cat)
            if ref is not None:
                deviations[(op, phase, cat)] = value - ref.cycles
    flagged = sorted(key for key, dev in deviations.items() if abs(dev) > tolerance)
    overhead = (
        unit_costs.irq_wakeup_cycles
        + 2 * unit_costs.irq_saved_registers * unit_costs.rot_mem_cycles_per_access
    )
    return Derivation(overhead, cells, deviations, flagged)


def instruction_counts(profile: FirmwareProfile) -> dict[str, dict[str, dict[str, int]]]:
    return {
        op: {phase: {cat: c.instructions for cat, c in cells.items()} for phase, cells in phases.items()}
        for op, phases in profile.breakdown.items()
    }
