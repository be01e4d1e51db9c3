import pytest
from hypothesis import given
from hypothesis import strategies as st

from rot_cfi_sim.mailbox import (
    Mailbox,
    ProtocolError,
    ProtocolMonitor,
    beats_for,
    pack_log,
    payload_chunks,
    unpack_log,
)
from rot_cfi_sim.trace import CommitLog, ControlFlowKind, encode_jal, encode_jalr

K = ControlFlowKind
ENCODINGS = {
    K.CALL: encode_jal(1, 0x40),
    K.RETURN: encode_jalr(0, 1),
    K.INDIRECT_JUMP: encode_jalr(0, 6),
    K.COROUTINE_SWAP: encode_jalr(1, 5),
}
addr = st.integers(0, (1 << 64) - 1)


def _log(kind=K.CALL, pc=0x80000000, target=0x80000100):
    return CommitLog(pc, ENCODINGS[kind], pc + 4, target, kind)


def _deliver(mb, log):
    for i, (index, value) in enumerate(chunks := payload_chunks(log, mb.bus_width_bits)):
        mb.write_chunk(index, value, is_last=i == len(chunks) - 1)


@given(st.sampled_from(list(ENCODINGS)), addr, addr, addr)
def test_pack_round_trip(kind, pc, nxt, tgt):
    log = CommitLog(pc, ENCODINGS[kind], nxt, tgt, kind)
    assert unpack_log(pack_log(log)) == log


@pytest.mark.parametrize("width, beats", [(32, 7), (64, 4), (128, 2)])
def test_beats(width, beats):
    assert beats_for(width) == beats
    assert len(payload_chunks(_log(), width)) == beats


@pytest.mark.parametrize("width", [32, 64, 128])
@pytest.mark.parametrize("kind", list(ENCODINGS))
def test_bus_delivery_round_trip(width, kind):
    mb = Mailbox(bus_width_bits=width)
    log = CommitLog(0xFFFFFFFFFFFFFFFE, ENCODINGS[kind], 0, 0xFFFFFFFFFFFFFFFE, kind)
    _deliver(mb, log)
    assert mb.doorbell
    assert mb.rot_read_log() == log


def test_handshake_sequence():
    mb = Mailbox()
    assert mb.ready
    _deliver(mb, _log())
    assert not mb.ready and mb.doorbell
    mb.rot_read_log()
    mb.rot_write_result(True)
    assert mb.completion
    assert mb.host_read_result() is True
    assert mb.ready and not mb.completion
    assert ProtocolMonitor(4).delivered(mb.events) == 1


def test_write_while_pending_rejected():
    mb = Mailbox()
    _deliver(mb, _log())
    with pytest.raises(ProtocolError):
        mb.write_chunk(0, 0, is_last=False)
    mb.rot_read_log()
    # RoT owns the mailbox until the result is consumed
    with pytest.raises(ProtocolError):
        mb.write_chunk(0, 0, is_last=False)


def test_out_of_order_accesses():
    mb = Mailbox()
    with pytest.raises(ProtocolError):
        mb.rot_read_log()
    with pytest.raises(ProtocolError):
        mb.rot_write_result(False)
    with pytest.raises(ProtocolError):
        mb.host_read_result()
    with pytest.raises(ProtocolError):
        mb.write_chunk(4, 0, is_last=True)


def test_tag_mismatch_rejected():
    data = pack_log(_log(K.CALL))
    data[1] = (data[1] & 0xFFFFFFFF) | (2 << 32)
    with pytest.raises(ProtocolError, match="disagrees"):
        unpack_log(data)


def test_non_control_flow_rejected():
    with pytest.raises(ProtocolError):
        unpack_log([0, 0x13, 0, 0])


def test_monitor_rejects_bad_sequences():
    mon = ProtocolMonitor(4)
    assert mon.delivered([]) == 0
    good = ["chunk"] * 4 + ["doorbell", "rot_read", "result", "host_read"]
    assert mon.delivered(good * 3) == 3
    with pytest.raises(ProtocolError):
        mon.delivered(good[:-1])
    with pytest.raises(ProtocolError):
        mon.delivered(["chunk"] * 3 + good[4:])


def test_events_can_be_disabled():
    mb = Mailbox(record_events=False)
    _deliver(mb, _log())
    assert mb.events == []
