#!/usr/bin/env python3
"""
Tests for event chunking, reassembly and the preamble
"""

import itertools
import random

import pytest

from metachannel.address_codec import ChannelConfig, crc_packet
from metachannel.channel_mappings import TAG_MARKER, TAG_OBJECT_FREE
from metachannel.demo_runner import random_event_batch
from metachannel.errors import AmbiguityError, MalformedChunkError, PayloadTooLargeError
from metachannel.message_schema import (
    EVENT_ADAPTER,
    Chunk,
    EventAssembler,
    MailboxInfo,
    Marker,
    ObjectAlloc,
    ObjectFree,
    Preamble,
    build_event,
    deserialize_event,
    is_preamble_message,
    pack_chunk,
    preamble_sequence,
    serialize_event,
    unpack_chunk,
)

CFG = ChannelConfig()
INFO = MailboxInfo(virtual_base=0x0000_7F5A_1234_0000, pid=4242)


def _pairs(messages):
    return [(m.a, m.b) for m in messages]


def test_object_free_is_one_message():
    messages = serialize_event(ObjectFree(object_id=7), CFG)
    assert len(messages) == 1
    assert messages[0].a == (TAG_OBJECT_FREE << 8) | 0
    assert messages[0].b == 0x0007
    assert messages[0].crc == crc_packet([messages[0].a, messages[0].b], CFG)


def test_mailbox_info_word_split():
    messages = serialize_event(INFO, CFG)
    assert [m.b for m in messages] == [0x0000, 0x7F5A, 0x1234, 0x0000, 0x0000, 4242]
    assert [unpack_chunk(m.a, m.b, CFG).seq for m in messages] == list(range(6))


def test_every_arrival_order_rebuilds_mailbox_info():
    pairs = _pairs(serialize_event(INFO, CFG))
    rng = random.Random(0)
    orders = list(itertools.permutations(pairs))
    for order in rng.sample(orders, 200) + [tuple(pairs), tuple(reversed(pairs))]:
        assert deserialize_event(order, CFG) == INFO


def test_missing_chunk_is_incomplete():
    pairs = _pairs(serialize_event(INFO, CFG))
    assert deserialize_event(pairs[:5], CFG) is None


def test_duplicated_chunks_give_one_event():
    pairs = _pairs(serialize_event(INFO, CFG))
    assert deserialize_event(pairs * 4, CFG) == INFO

    assembler = EventAssembler(CFG)
    done = []
    for ordinal, (a, b) in enumerate(pairs * 4):
        event = assembler.feed(unpack_chunk(a, b, CFG), ordinal, ordinal)
        if event is not None:
            done.append(event.event)
    assert done == [INFO]


def test_conflicting_payloads_are_ambiguous():
    pairs = _pairs(serialize_event(ObjectFree(object_id=7), CFG))
    other = _pairs(serialize_event(ObjectFree(object_id=8), CFG))
    with pytest.raises(AmbiguityError) as excinfo:
        deserialize_event(pairs + other, CFG)
    assert sorted(excinfo.value.candidates) == [7, 8]


def test_assembler_keeps_most_sighted_candidate():
    alloc = ObjectAlloc(object_id=3, virtual_addr=0x7F00_0000_0000, size_bytes=4096)
    good = serialize_event(alloc, CFG)
    assembler = EventAssembler(CFG)
    stray = unpack_chunk(good[1].a, good[1].b ^ 0x1, CFG)
    assembler.feed(stray, 0, 0)
    decoded = []
    for ordinal, m in enumerate([good[1]] + good, 1):
        event = assembler.feed(unpack_chunk(m.a, m.b, CFG), ordinal, ordinal)
        if event is not None:
            decoded.append(event)
    assert [d.event for d in decoded] == [alloc]
    assert decoded[0].first_index == 1
    assert assembler.ambiguities == 1


def test_marker_layout_and_round_trip():
    marker = Marker(marker_id='M1', call_count=9)
    messages = serialize_event(marker, CFG)
    # length, one text word, two count words
    assert len(messages) == 4
    assert unpack_chunk(messages[0].a, messages[0].b, CFG) == Chunk(TAG_MARKER, 0, 2)
    assert messages[1].b == int.from_bytes(b'M1', 'big')
    assert deserialize_event(_pairs(messages), CFG) == marker


@pytest.mark.parametrize('bits', [8, 16, 24, 32])
def test_events_survive_every_width(bits):
    cfg = ChannelConfig(packet_bits=bits)
    events = [MailboxInfo(virtual_base=0x7F5A_0000_1000, pid=77),
              Marker(marker_id='loop', call_count=70000),
              ObjectFree(object_id=513)]
    if bits > 8:
        events.append(ObjectAlloc(object_id=2, virtual_addr=0x7F5A_0040_0000, size_bytes=16 << 20))
    for event in events:
        assert deserialize_event(_pairs(serialize_event(event, cfg)), cfg) == event


def test_oversize_payloads():
    with pytest.raises(PayloadTooLargeError):
        serialize_event(Marker(marker_id='too-long-id', call_count=0), CFG)
    # 18 chunks do not fit in the 16 sequence numbers of an 8-bit packet
    with pytest.raises(PayloadTooLargeError):
        serialize_event(ObjectAlloc(object_id=1, virtual_addr=0, size_bytes=1), ChannelConfig(packet_bits=8))


def test_malformed_words_are_rejected():
    with pytest.raises(MalformedChunkError):
        build_event(TAG_MARKER, [2, 0xFF80, 0, 1], CFG)
    with pytest.raises(MalformedChunkError):
        build_event(3, [1, 0, 0, 0, 0, 0, 0, 0, 0], CFG)


def test_event_adapter_reads_json_kinds():
    event = EVENT_ADAPTER.validate_python({'kind': 'marker', 'marker_id': 'M1', 'call_count': 3})
    assert event == Marker(marker_id='M1', call_count=3)


def test_preamble_is_fixed_and_distinct():
    first = preamble_sequence(CFG)
    assert first == preamble_sequence(ChannelConfig())
    assert len(first) == 50
    assert len({(m.a, m.b) for m in first}) == 50
    assert serialize_event(Preamble(), CFG) == first
    assert is_preamble_message(first[0].a, first[0].b, CFG)


def test_schema_messages_are_not_preamble():
    for event in (Marker(marker_id='M1', call_count=0), INFO, ObjectFree(object_id=7)):
        for m in serialize_event(event, CFG):
            assert not is_preamble_message(m.a, m.b, CFG)


def test_random_pairs_are_not_preamble():
    rng = random.Random(1)
    hits = sum(is_preamble_message(rng.getrandbits(16), rng.getrandbits(16), CFG) for _ in range(100000))
    assert hits == 0


def test_pack_unpack():
    message = pack_chunk(Chunk(TAG_MARKER, 3, 0xBEEF), CFG)
    assert message.a == 0x0203
    assert unpack_chunk(message.a, message.b, CFG) == Chunk(TAG_MARKER, 3, 0xBEEF)


def _chunks(event):
    return [unpack_chunk(m.a, m.b, CFG) for m in serialize_event(event, CFG)]


def _feed_all(assembler, chunks):
    done = []
    for index, chunk in enumerate(chunks):
        event = assembler.feed(chunk, index, index)
        if event is not None:
            done.append(event)
    return done


def test_reused_object_id_is_a_new_lifetime():
    alloc = ObjectAlloc(object_id=7, virtual_addr=0x7F00_0010_0000, size_bytes=8192)
    free = ObjectFree(object_id=7)
    events = [alloc, free, alloc, free]
    chunks = [c for e in events for c in _chunks(e)]
    done = _feed_all(EventAssembler(CFG), chunks)
    assert [d.event for d in done] == events


def test_back_to_back_repeats_collapse():
    chunks = _chunks(ObjectFree(object_id=7)) * 3
    done = _feed_all(EventAssembler(CFG), chunks)
    assert [d.event for d in done] == [ObjectFree(object_id=7)]


def test_unfirm_sighting_opens_no_assembly():
    assembler = EventAssembler(CFG)
    assert assembler.feed(_chunks(ObjectFree(object_id=7))[0], 0, 2).event == ObjectFree(object_id=7)
    stray = _chunks(ObjectFree(object_id=9))[0]
    assert assembler.feed(stray, 3, 4, firm=False) is None
    assert assembler.feed(stray, 5, 7).event == ObjectFree(object_id=9)


def test_ties_keep_the_earliest_sighting():
    alloc = ObjectAlloc(object_id=3, virtual_addr=0x7F00_0000_0000, size_bytes=4096)
    good = _chunks(alloc)
    stray = Chunk(good[1].msg_type, good[1].seq, good[1].payload ^ 0x1)
    done = _feed_all(EventAssembler(CFG), good[:2] + [stray] + good[2:])
    assert [d.event for d in done] == [alloc]
    assert done[0].first_index == 0


def test_held_repeats_do_not_pull_the_next_event_back():
    first = _chunks(Marker(marker_id='M1', call_count=0))
    second = _chunks(Marker(marker_id='M1', call_count=1))
    doubled = [c for c in first for _ in range(2)]
    # late repeats of the first marker, then the second marker sent twice per chunk
    late = first[2:]
    chunks = doubled + late + [c for c in second for _ in range(2)]
    done = _feed_all(EventAssembler(CFG, min_sightings=2), chunks)
    assert [d.event for d in done] == [Marker(marker_id='M1', call_count=0),
                                       Marker(marker_id='M1', call_count=1)]
    assert done[0].first_index == 0
    assert done[1].first_index == len(doubled) + len(late)


def test_random_events_survive_shuffled_duplicated_chunks():
    rng = random.Random(5)
    for event in random_event_batch(1000, seed=5) + [INFO]:
        pairs = _pairs(serialize_event(event, CFG))
        pairs = pairs + rng.sample(pairs, rng.randrange(len(pairs) + 1))
        rng.shuffle(pairs)
        assert deserialize_event(pairs, CFG) == event


if __name__ == "__main__":
    print("🧪 Running message schema tests")
    raise SystemExit(pytest.main([__file__, "-v"]))
