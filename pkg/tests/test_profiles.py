import json

import pytest

from rot_cfi_sim.profiles import (
    BUILTIN_PROFILES,
    PROFILE_DIR_ENV,
    FirmwareProfile,
    ProfileError,
    cost_of,
    derive_profile_totals,
    get_profile,
    instruction_counts,
    load_profile,
)
from rot_cfi_sim.trace import ControlFlowKind

K = ControlFlowKind


@pytest.mark.parametrize(
    "name, call, ret, avg",
    [("irq", 258, 276, 267), ("polling", 103, 121, 112), ("optimized", 64, 82, 73)],
)
def test_builtin_latencies(name, call, ret, avg):
    p = BUILTIN_PROFILES[name]
    assert (p.call_cycles, p.return_cycles, p.average_latency) == (call, ret, avg)
    assert p.breakdown_total("call") == call
    assert p.breakdown_total("return") == ret


def test_irq_phase_split():
    irq = BUILTIN_PROFILES["irq"]
    assert irq.breakdown_total("call", "irq") == 155
    assert irq.breakdown_total("call", "cfi") == 103
    assert irq.breakdown_total("return", "cfi") == 121
    assert BUILTIN_PROFILES["polling"].breakdown_total("call", "irq") == 0


def test_cost_of_kinds():
    p = BUILTIN_PROFILES["polling"]
    assert cost_of(p, K.CALL) == 103
    assert cost_of(p, K.INDIRECT_JUMP) == 103
    assert cost_of(p, K.RETURN) == 121
    assert cost_of(p, K.COROUTINE_SWAP) == 121
    assert cost_of(p, K.NOT_CONTROL_FLOW) == 0
    assert cost_of(p, K.RETURN, averaged=True) == 112


def test_derivation_from_unit_costs():
    irq = BUILTIN_PROFILES["irq"]
    d = derive_profile_totals(instruction_counts(irq), irq.unit_costs, reference=irq)
    assert d.irq_overhead_cycles == 45 + 2 * 6 * 5 == 105
    opt = BUILTIN_PROFILES["optimized"]
    d = derive_profile_totals(instruction_counts(opt), opt.unit_costs, reference=opt)
    assert d.cells[("call", "cfi", "mem_rot")] == 5
    assert d.cells[("call", "cfi", "mem_soc")] == 32
    assert ("call", "cfi", "mem_rot") not in d.flagged
    # logic cells are not one cycle per instruction
    assert ("call", "cfi", "logic") in d.flagged


def test_breakdown_must_sum():
    data = BUILTIN_PROFILES["polling"].to_dict()
    data["call_cycles"] = 100
    with pytest.raises(ProfileError, match="sums to 103"):
        FirmwareProfile.from_dict(data)


def test_dict_round_trip():
    for p in BUILTIN_PROFILES.values():
        assert FirmwareProfile.from_dict(json.loads(json.dumps(p.to_dict()))) == p


def test_load_and_lookup(tmp_path, monkeypatch):
    custom = BUILTIN_PROFILES["optimized"].scaled(10, 20, variant="tiny").to_dict()
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(custom))
    assert load_profile(path).return_cycles == 20
    assert get_profile(str(path)).variant == "tiny"
    assert get_profile("IRQ") is BUILTIN_PROFILES["irq"]
    with pytest.raises(ProfileError):
        get_profile("tiny")
    monkeypatch.setenv(PROFILE_DIR_ENV, str(tmp_path))
    assert get_profile("tiny").call_cycles == 10


@pytest.mark.parametrize(
    "content, fragment",
    [("{", "invalid JSON"), ("[]", "JSON object"), ('{"variant": "x"}', "malformed"),
     ('{"variant": "x", "call_cycles": -1, "return_cycles": 1}', "non-negative")],
)
def test_bad_profile_files(tmp_path, content, fragment):
    path = tmp_path / "p.json"
    path.write_text(content)
    with pytest.raises(ProfileError, match=fragment):
        load_profile(path)


def test_missing_profile_file(tmp_path):
    with pytest.raises(ProfileError, match="cannot read"):
        load_profile(tmp_path / "nope.json")
