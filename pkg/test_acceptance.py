#!/usr/bin/env python3
"""
End-to-end acceptance checks.

Runs at reduced size by default; set MAILBOX_FULL_ACCEPTANCE=1 for the
full seed counts and trace lengths.
"""

import itertools
import os
import time

import pytest

from metachannel.address_codec import ChannelConfig, crc_packet, scramble
from metachannel.channel_mappings import Origin, RequestOp
from metachannel.channel_sim import ChannelParams, background_traffic, run_channel
from metachannel.demo_runner import (
    calls_demo,
    discovery_demo,
    objects_demo,
    random_event_batch,
    randomizer_prefetch_comparison,
    reliability_demo,
    roi_demo,
    session_prologue,
)
from metachannel.encoder import open_session
from metachannel.mailbox_decoder import PacketWindow, decode_trace, detect_mailbox, triple_check
from metachannel.message_schema import MailboxInfo, Marker

FULL = os.getenv('MAILBOX_FULL_ACCEPTANCE') == '1'
MIB = 1 << 20


def test_clean_channel_round_trip():
    count = 1000 if FULL else 300
    events = random_event_batch(count, seed=1)
    session = open_session(ChannelConfig(), seed=1, repetitions=1)
    app = session_prologue(session)
    for event in events:
        app += session.send_event(event)
    trace = run_channel(app, ChannelParams.preset('identity'))
    sessions = decode_trace(trace.records)
    assert len(sessions) == 1
    decoded = [d.event for d in sessions[0].events if not isinstance(d.event, MailboxInfo)]
    assert decoded == events


def test_adversarial_reliability():
    seeds = range(20) if FULL else range(3)
    result = reliability_demo(seeds=seeds, events_per_seed=100, preset='adversarial', repetitions=4)
    assert result['undetected'] == 0
    assert result['recovered'] == result['sent']
    assert result['false_events'] == 0
    assert result['collision_rate'] <= 2 * result['analytic_collision_rate']


def test_mailbox_discovery():
    result = discovery_demo(seed=5)
    assert len(result['configs']) == 8
    assert result['success'], result['configs']


def test_background_never_detects():
    seeds = range(100) if FULL else range(3)
    length = 1_000_000 if FULL else 200_000
    params = ChannelParams.preset('adversarial')
    for seed in seeds:
        assert detect_mailbox(background_traffic(params, length, seed=seed)) is None


@pytest.mark.parametrize('bits', [8, 16, 24, 32])
def test_order_recovery_every_width(bits):
    cfg = ChannelConfig(packet_bits=bits)
    a, b = 0x21 & cfg.packet_mask, 0xC3 << (bits - 8)
    packets = [a, b, crc_packet([a, b], cfg)]
    for order in itertools.permutations(range(3)):
        window = PacketWindow()
        for filler in range(5):
            window.push(0x5A5A5A5A & cfg.packet_mask ^ filler, filler)
        found = []
        for index, pos in enumerate(order, 5):
            window.push(packets[pos], index)
            found += [(p.a, p.b) for p in triple_check(window, cfg)]
        assert (a, b) in found


def test_roi_demo():
    result = roi_demo(seed=7)
    assert result['markers'] == 10
    assert result['call_counts'] == list(range(10))
    assert result['boundaries_match']
    assert result['segment_reads_match']

def test_calls_demo():
    result = calls_demo(seed=13)
    assert result['calls'] == result['expected_calls'] == 15
    assert result['intervals_match']
    assert result['depths'] == {'outer': [0], 'inner': [1]}



def test_object_demo():
    sizes = (1 * MIB, 4 * MIB, 16 * MIB) if FULL else (MIB // 16, MIB // 4, MIB)
    result = objects_demo(seed=11, sizes=sizes)
    assert result['allocs_exact']
    assert result['vp_offset'] == result['expected_vp_offset']
    assert result['attribution_accuracy'] >= 0.99
    touched = [s['bytes_touched'] for s in result['stats']]
    assert touched[1] == 4 * touched[0] and touched[2] == 16 * touched[0]


def test_randomizer_reduces_mailbox_prefetches():
    cfg = ChannelConfig(randomizer_enabled=True)
    assert len({scramble(p, cfg) for p in range(1 << 16)}) == 1 << 16
    counts = randomizer_prefetch_comparison(seed=3)
    assert counts['plain'] > 0
    assert counts['randomized'] < counts['plain']


def test_decode_throughput():
    target = 1_000_000 if FULL else 200_000
    session = open_session(ChannelConfig(), seed=2)
    app = session_prologue(session)
    for k in range(20):
        app += session.send_event(Marker(marker_id='M1', call_count=k))
    metadata_reads = sum(1 for r in app if r.op is RequestOp.READ_LINE)
    ratio = max(1.0, target / metadata_reads - 1)
    params = ChannelParams.preset('adversarial', rng_seed=2, background={'ratio': ratio})
    trace = run_channel(app, params)
    assert len(trace.records) >= 0.9 * target

    start = time.perf_counter()
    sessions = decode_trace(trace.records)
    elapsed = time.perf_counter() - start
    assert len(sessions) == 1
    assert len(trace.indices(Origin.METADATA)) == metadata_reads
    assert elapsed < 60.0


if __name__ == "__main__":
    print("🧪 Running acceptance checks" + (" (full size)" if FULL else ""))
    raise SystemExit(pytest.main([__file__, "-v"]))
