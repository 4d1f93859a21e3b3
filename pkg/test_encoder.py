#!/usr/bin/env python3
"""
Tests for mailbox placement, session ordering and request streams
"""

import pytest

from metachannel.address_codec import ChannelConfig, extract_packet
from metachannel.channel_mappings import Origin, RequestOp, WindowChoice
from metachannel.encoder import (
    ContiguousAllocator,
    EncoderSession,
    PhysicalMemory,
    interleave_streams,
    open_session,
    payload_reads,
    payload_scan,
)
from metachannel.errors import AllocationError, AlignmentError, OrderingError
from metachannel.message_schema import (
    MailboxInfo,
    Marker,
    ObjectFree,
    deserialize_event,
    serialize_event,
    unpack_chunk,
)

CFG = ChannelConfig()
MIB = 1 << 20


def _reads(requests):
    return [r for r in requests if r.op is RequestOp.READ_LINE]


def test_dedicated_window_is_naturally_aligned():
    session = open_session(CFG, seed=3)
    assert session.phys_base % (4 * MIB) == 0
    assert session.capacity_overhead == 4 * MIB
    assert session.window_choice is WindowChoice.DEDICATED


def test_same_seed_same_base():
    assert open_session(CFG, seed=9).phys_base == open_session(CFG, seed=9).phys_base
    assert open_session(CFG, seed=9).pid == open_session(CFG, seed=9).pid


def test_overlay_window_intersects_objects_at_no_cost():
    memory = PhysicalMemory()
    heap = ContiguousAllocator(memory)
    obj = heap.allocate(8 * MIB, object_id=1)
    session = open_session(CFG, WindowChoice.OVERLAY, seed=1, memory=memory)
    assert session.capacity_overhead == 0
    assert session.phys_base < obj.phys_addr + obj.size_bytes
    assert obj.phys_addr < session.phys_base + CFG.window_bytes


def test_overlay_needs_an_object():
    with pytest.raises(AllocationError):
        open_session(CFG, WindowChoice.OVERLAY, memory=PhysicalMemory())


def test_window_larger_than_memory_fails():
    with pytest.raises(AllocationError):
        open_session(ChannelConfig(packet_bits=32), memory=PhysicalMemory())


def test_misaligned_base_rejected():
    with pytest.raises(AlignmentError):
        EncoderSession(CFG, 0x1_0000_1000, 0, 1)


@pytest.mark.parametrize('repetitions,reads', [(1, 150), (4, 600)])
def test_preamble_read_counts(repetitions, reads):
    session = open_session(CFG, seed=0, repetitions=repetitions)
    requests = session.emit_preamble()
    assert len(_reads(requests)) == reads
    # every read is wrapped by flushes of its own line
    assert len(requests) == 3 * reads
    for flush, read, after in zip(requests[0::3], requests[1::3], requests[2::3]):
        assert flush.op is RequestOp.FLUSH_LINE and after.op is RequestOp.FLUSH_LINE
        assert flush.addr == read.addr == after.addr


def test_preamble_must_come_first():
    session = open_session(CFG, seed=0)
    with pytest.raises(OrderingError):
        session.send_mailbox_info()
    session.emit_preamble()
    with pytest.raises(OrderingError):
        session.emit_preamble()

    late = open_session(CFG, seed=0)
    late.send_event(ObjectFree(object_id=1))
    with pytest.raises(OrderingError):
        late.emit_preamble()


def test_event_read_counts():
    session = open_session(CFG, seed=0, repetitions=4)
    session.emit_preamble()
    assert len(_reads(session.send_event(ObjectFree(object_id=7)))) == 4 * 3
    assert len(_reads(session.send_mailbox_info())) == 4 * 18


def test_reads_carry_packets_in_a_b_crc_order():
    session = open_session(CFG, seed=0, repetitions=2)
    session.emit_preamble()
    requests = session.send_event(ObjectFree(object_id=7))
    packets = [extract_packet(r.addr, session.phys_base, CFG) for r in _reads(requests)]
    message = serialize_event(ObjectFree(object_id=7), CFG)[0]
    assert packets == list(message) * 2
    assert all(r.origin is Origin.METADATA for r in requests)


def test_marker_call_counts_increment():
    session = open_session(CFG, seed=0, repetitions=1)
    session.emit_preamble()
    counts = []
    for _ in range(10):
        reads = _reads(session.send_marker('M1'))
        packets = [extract_packet(r.addr, session.phys_base, CFG) for r in reads]
        # last message carries the low word of the call count
        counts.append(unpack_chunk(packets[-3], packets[-2], CFG).payload)
    assert counts == list(range(10))

def test_entry_and_exit_markers():
    session = open_session(CFG, seed=0, repetitions=1)
    session.emit_preamble()
    sent = []
    for send in (session.send_entry, session.send_exit, session.send_entry):
        packets = [extract_packet(r.addr, session.phys_base, CFG) for r in _reads(send('scan'))]
        pairs = [(packets[k], packets[k + 1]) for k in range(0, len(packets), 3)]
        sent.append(deserialize_event(pairs, CFG))
    assert sent == [Marker(marker_id='scan>', call_count=0), Marker(marker_id='scan<', call_count=0),
                    Marker(marker_id='scan>', call_count=1)]



def test_mailbox_info_announces_vp_delta():
    delta = 0x7F5A_0000_0000
    session = open_session(CFG, seed=2, vp_delta=delta)
    assert session.vp_delta == delta
    assert session.virtual_base == session.phys_base + delta
    zero = open_session(CFG, seed=2, vp_delta=0)
    assert zero.vp_delta == 0


def test_two_sessions_have_distinct_windows_and_pids():
    memory = PhysicalMemory()
    first = open_session(CFG, seed=1, memory=memory, pid=100)
    second = open_session(CFG, seed=2, memory=memory, pid=200)
    assert first.phys_base != second.phys_base
    info = MailboxInfo(virtual_base=first.virtual_base, pid=first.pid)
    assert info != MailboxInfo(virtual_base=second.virtual_base, pid=second.pid)


def test_heap_allocations_are_page_aligned_and_freed():
    memory = PhysicalMemory()
    heap = ContiguousAllocator(memory, vp_delta=0x1000_0000)
    obj = heap.allocate(5000)
    assert obj.phys_addr % 4096 == 0
    assert obj.virtual_addr == obj.phys_addr + 0x1000_0000
    heap.free(obj.object_id)
    assert heap.allocate(4096).phys_addr == obj.phys_addr
    with pytest.raises(AllocationError):
        heap.free(99)


def test_payload_helpers():
    reads = payload_reads(0x2000_0000, 4096, tag=5)
    assert [r.addr for r in reads] == list(range(0x2000_0000, 0x2000_1000, 64))
    assert all(r.origin is Origin.PAYLOAD and r.tag == 5 for r in reads)
    scan = payload_scan(0x2000_0000, 4096, 100, seed=1)
    assert len(scan) == 100
    assert all(0x2000_0000 <= r.addr < 0x2000_1000 for r in scan)
    assert scan == payload_scan(0x2000_0000, 4096, 100, seed=1)


def test_interleave_keeps_triplets_whole():
    memory = PhysicalMemory()
    a = open_session(CFG, seed=1, memory=memory, repetitions=1)
    b = open_session(CFG, seed=2, memory=memory, repetitions=1)
    merged = interleave_streams([a.emit_preamble(), b.emit_preamble()], seed=4)
    assert len(merged) == 2 * 450
    for i in range(0, len(merged), 3):
        flush, read, after = merged[i:i + 3]
        assert flush.addr == read.addr == after.addr
        assert read.op is RequestOp.READ_LINE


if __name__ == "__main__":
    print("🧪 Running encoder tests")
    raise SystemExit(pytest.main([__file__, "-v"]))
