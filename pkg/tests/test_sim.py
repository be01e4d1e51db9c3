import json
import random

import jsonschema
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rot_cfi_sim import synth
from rot_cfi_sim.profiles import BUILTIN_PROFILES, cost_of
from rot_cfi_sim.sim import (
    REPORT_SCHEMA,
    SimConfig,
    SimReport,
    compare_profiles,
    emit_report,
    format_comparison,
    run,
    with_profile,
)
from rot_cfi_sim.trace import NOP, TraceRecord, encode_jal

from oracle import brute_force, recurrence

OPT, POLL, IRQ = (BUILTIN_PROFILES[n] for n in ("optimized", "polling", "irq"))
ZERO = OPT.scaled(0, 0, variant="zero")


def nops(n, start=1):
    return [TraceRecord(start + i, 0x1000 + 4 * i, NOP, 0x1004 + 4 * i) for i in range(n)]


def test_no_control_flow_means_no_overhead():
    report = run(nops(50))
    assert report.cfi_cycles == report.baseline_cycles == 50
    assert report.slowdown_percent == 0
    assert report.slowdown_text() == "–"
    assert report.cf_event_count == 0


def test_empty_trace():
    report = run([])
    assert report.cfi_cycles == report.baseline_cycles == 0
    assert report.slowdown_percent == 0


def test_fixed_gap_hides_checks():
    report = run(synth.fixed_gap(100, 1000), SimConfig(profile=OPT, queue_depth=8))
    assert report.slowdown_percent == 0
    assert report.per_kind["Call"] == report.per_kind["Return"] == 100


@pytest.mark.parametrize("profile", [OPT, POLL, IRQ])
@pytest.mark.parametrize("n", [1, 2, 50])
def test_burst_closed_form(profile, n):
    report = run(synth.burst(n, start_cycle=7), SimConfig(profile=profile))
    assert report.cfi_cycles == 7 + 1 + n * profile.return_cycles
    # every return underflows but the run keeps going
    assert len(report.violations) == n


def test_single_call_timing():
    rec = [TraceRecord(10, 0x1000, encode_jal(1, 0x100), 0x1100)]
    assert run(rec, SimConfig(profile=OPT)).cfi_cycles == 10 + 1 + 64
    # four 64-bit beats, one cycle each, starting the cycle after the pop
    slow_bus = SimConfig(profile=OPT, transfer_cost_per_beat=1)
    assert run(rec, slow_bus).cfi_cycles == 10 + 1 + 4 + 64
    narrow = SimConfig(profile=OPT, transfer_cost_per_beat=1, bus_width_bits=32)
    assert run(rec, narrow).cfi_cycles == 10 + 1 + 7 + 64


def test_baseline_zero_with_checks_has_no_percentage():
    rec = [TraceRecord(0, 0x1000, encode_jal(1, 0x100), 0x1100)]
    report = run(rec)
    assert report.baseline_cycles == 0 and report.cfi_cycles > 0
    assert report.slowdown_percent is None
    assert report.slowdown_text() == "inf"


def test_dual_control_flow_commit_stalls_one_cycle():
    call = encode_jal(1, 0x100)
    recs = [TraceRecord(5, 0x1000, call, 0x1100), TraceRecord(5, 0x1100, call, 0x1200)]
    recs += nops(3, start=10)
    report = run(recs, SimConfig(profile=ZERO, queue_depth=8), timeline=True)
    assert report.retire_cycles[:2] == [5, 6]
    assert report.stall_cycles["DualControlFlowCommit"] == 1
    assert report.stall_cycles["QueueFull"] == 0


def test_queue_full_stalls_counted():
    report = run(synth.burst(3, start_cycle=1), SimConfig(profile=POLL))
    assert report.stall_cycles["QueueFull"] > 0
    assert report.max_queue_occupancy == 1


def _small_traces():
    return st.tuples(
        st.integers(0, 2**32),
        st.integers(1, 120),
        st.floats(0.0, 0.9),
        st.sampled_from([1, 2, 3, 8]),
        st.sampled_from([ZERO, OPT, POLL, IRQ, OPT.scaled(1, 3, variant="tiny")]),
    )


@settings(max_examples=120, deadline=None)
@given(_small_traces())
def test_matches_cycle_stepped_oracle(params):
    seed, n, density, depth, profile = params
    records, kinds = synth.random_trace(random.Random(seed), n, density)
    report = run(records, SimConfig(profile=profile, queue_depth=depth), timeline=True)
    cycles = [r.cycle for r in records]
    service = lambda k: cost_of(profile, k)  # noqa: E731
    expected = brute_force(cycles, kinds, service, depth)
    assert expected == recurrence(cycles, kinds, service, depth)
    assert (report.retire_cycles, report.completion_cycles, report.cfi_cycles) == expected


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32), st.integers(1, 400))
def test_slower_firmware_never_helps(seed, n):
    records, _ = synth.random_trace(random.Random(seed), n, 0.3)
    prev = None
    for latency in (0, 5, 40, 200):
        cfi = run(records, SimConfig(profile=OPT.scaled(latency, latency + 3))).cfi_cycles
        assert prev is None or cfi >= prev
        prev = cfi


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32), st.integers(1, 400))
def test_deeper_queue_never_hurts(seed, n):
    records, _ = synth.random_trace(random.Random(seed), n, 0.3)
    cycles = [run(records, SimConfig(profile=POLL, queue_depth=d)).cfi_cycles for d in (1, 2, 4, 8)]
    assert cycles == sorted(cycles, reverse=True)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32), st.integers(1, 300))
def test_zero_latency_identity(seed, n):
    # one record per cycle, so no dual control-flow stalls; trailing nop
    # gives the last check its one cycle of queue latency
    records, _ = synth.random_trace(random.Random(seed), n, 0.4, pair_prob=0.0)
    last = records[-1]
    records.append(TraceRecord(last.cycle + 1, 0x2000, NOP, 0x2004))
    report = run(records, SimConfig(profile=ZERO, queue_depth=1))
    assert report.cfi_cycles == report.baseline_cycles
    assert report.total_stall_cycles == 0


def test_halt_on_violation():
    records, kinds = synth.random_balanced(random.Random(3), 60, pair_prob=0.0)
    k = [i for i, kind in enumerate(kinds) if kind.value == "Return"][2]
    bad = synth.corrupt_return(records, k, seed=1)
    free = run(bad, SimConfig(profile=IRQ, queue_depth=8))
    halted = run(bad, SimConfig(profile=IRQ, queue_depth=8, halt_on_violation=True))
    assert [v.trace_index for v in free.violations] == [k]
    assert halted.halted and [v.trace_index for v in halted.violations] == [k]
    assert halted.cfi_cycles == halted.violations[0].cycle
    assert halted.cfi_cycles < free.cfi_cycles
    assert halted.retired_instructions <= len(records)
    assert "halted on violation" in emit_report(halted)


def test_report_json_schema_and_round_trip():
    records, _ = synth.random_trace(random.Random(9), 300, 0.3)
    report = run(records, SimConfig(profile=POLL, queue_depth=2), label="r")
    data = json.loads(emit_report(report, "json"))
    jsonschema.validate(data, REPORT_SCHEMA)
    back = SimReport.from_dict(data)
    assert back.to_dict() == data
    assert data["slowdown_percent"]["value"] == pytest.approx(float(report.slowdown_percent))


def test_schema_rejects_foreign_version():
    data = run(nops(3)).to_dict()
    data["schema"] = 99
    with pytest.raises(ValueError):
        SimReport.from_dict(data)


def test_text_report():
    text = emit_report(run(nops(5), label="idle"))
    assert text.splitlines()[1].split() == ["idle", "5", "0", "–"]
    with pytest.raises(ValueError):
        emit_report(run(nops(1)), "xml")


def test_slowdown_rounds_half_up():
    report = run(nops(1))
    report.baseline_cycles, report.cfi_cycles = 200, 201  # 0.5 %
    assert report.slowdown_text() == "1"
    report.cfi_cycles = 200
    assert report.slowdown_text() == "–"


def test_compare_profiles_order_and_parallel():
    records, _ = synth.random_trace(random.Random(5), 500, 0.3)
    configs = [SimConfig(profile=p, queue_depth=d) for p in (IRQ, OPT, POLL) for d in (8, 1)]
    serial = compare_profiles(records, configs, label="x")
    assert [(r.config["queue_depth"], r.config["profile"]) for r in serial] == [
        (1, "optimized"), (1, "polling"), (1, "irq"), (8, "optimized"), (8, "polling"), (8, "irq"),
    ]
    parallel = compare_profiles(records, configs, label="x", jobs=2)
    assert [r.to_dict() for r in parallel] == [r.to_dict() for r in serial]
    table = format_comparison(serial)
    assert table.splitlines()[0].split()[-3:] == ["Opt.", "Poll.", "IRQ"]
    assert len(table.splitlines()) == 3


def test_with_profile_and_config_validation():
    cfg = with_profile(SimConfig(queue_depth=4), IRQ)
    assert cfg.profile is IRQ and cfg.queue_depth == 4
    for bad in ({"queue_depth": 0}, {"bus_width_bits": 48}, {"transfer_cost_per_beat": -1}, {"xlen": 16}):
        with pytest.raises(ValueError):
            SimConfig(**bad)


def test_string_trace_accepted():
    text = "1 0x1000 0x008000EF 0x1008\n50 0x1008 0x00008067 0x1004\n"
    report = run(text, SimConfig(profile=OPT))
    assert report.per_kind["Call"] == 1 and report.per_kind["Return"] == 1
    assert not report.violations


def test_mailbox_events_attached():
    report = run(synth.fixed_gap(2, 500), record_events=True)
    assert report.mailbox_events.count("doorbell") == 4
