"""
End-to-end experiments: encode a workload, push it through the channel,
decode it and score the result against ground truth.
"""

import logging
import random
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

from .address_codec import ChannelConfig, candidate_configs
from .channel_mappings import DEFAULT_REPETITIONS, Origin
from .channel_sim import ChannelParams, count_mailbox_prefetches, run_channel
from .encoder import (
    AppRequest,
    ContiguousAllocator,
    EncoderSession,
    PhysicalMemory,
    open_session,
    payload_reads,
    payload_scan,
)
from .mailbox_decoder import SessionDecode, decode_trace
from .message_schema import Event, MailboxInfo, Marker, ObjectAlloc, ObjectFree, Preamble, serialize_event
from .object_registry import registry_apply
from .trace_analyzer import call_intervals, emit_plot_data, object_stats, roi_segments
from .trace_io import write_events, write_ground_truth, write_json, write_trace

logger = logging.getLogger(__name__)

MIB = 1 << 20
MARKER_IDS = ('M1', 'LOOP', 'phase', 'k')


def random_event_batch(count: int, seed: int = 0) -> List[Event]:
    """
    Random markers, allocations and frees.

    Object ids are never reused and marker call counts increment per id, so
    no two events of one kind are identical.
    """
    rng = random.Random(seed)
    calls: Dict[str, int] = {}
    live: List[int] = []
    next_id = rng.randrange(1, 1 << 12)
    events: List[Event] = []
    for _ in range(count):
        kind = rng.choice(('marker', 'object_alloc', 'object_free'))
        if kind == 'marker':
            marker_id = rng.choice(MARKER_IDS)
            events.append(Marker(marker_id=marker_id, call_count=calls.get(marker_id, 0)))
            calls[marker_id] = calls.get(marker_id, 0) + 1
        elif kind == 'object_alloc' or not live:
            events.append(ObjectAlloc(object_id=next_id,
                                      virtual_addr=rng.randrange(1 << 47) & ~0xFFF,
                                      size_bytes=rng.randrange(1, 1 << 30)))
            live.append(next_id)
            next_id += 1
        else:
            events.append(ObjectFree(object_id=live.pop(rng.randrange(len(live)))))
    return events


def session_prologue(session: EncoderSession) -> List[AppRequest]:
    """Preamble followed by mailbox info"""
    return session.emit_preamble() + session.send_mailbox_info()


def _only_session(sessions: List[SessionDecode], phys_base: int) -> Optional[SessionDecode]:
    for session in sessions:
        if session.detection.phys_base == phys_base:
            return session
    return None


def _transmitted_pairs(events: Sequence[Event], cfg: ChannelConfig) -> set:
    pairs = set()
    for event in events:
        pairs.update((m.a, m.b) for m in serialize_event(event, cfg))
    return pairs


def score_events(sent: Sequence[Event], decoded: Sequence[Event]) -> Dict[str, int]:
    """Recovered and false typed events, compared as multisets"""
    remaining = list(sent)
    false_events = 0
    for event in decoded:
        if event in remaining:
            remaining.remove(event)
        else:
            false_events += 1
    return {'sent': len(sent), 'recovered': len(sent) - len(remaining), 'false_events': false_events}


def reliability_demo(seeds: Sequence[int] = tuple(range(20)), events_per_seed: int = 100,
                     preset: str = 'adversarial', repetitions: int = DEFAULT_REPETITIONS,
                     cfg: Optional[ChannelConfig] = None) -> Dict[str, Any]:
    """
    Random events through the channel for each seed.

    Returns:
        Totals of sent, recovered and false events, plus the raw CRC
        collision rate against its analytic estimate.
    """
    cfg = cfg or ChannelConfig()
    totals = {'sent': 0, 'recovered': 0, 'false_events': 0, 'collisions': 0, 'packets_seen': 0,
              'undetected': 0}
    per_seed = []
    for seed in seeds:
        events = random_event_batch(events_per_seed, seed)
        session = open_session(cfg, seed=seed, repetitions=repetitions)
        requests = session_prologue(session)
        requests += [req for event in events for req in session.send_event(event)]
        trace = run_channel(requests, ChannelParams.preset(preset, rng_seed=seed))

        decoded = _only_session(decode_trace(trace.records, keep_pairs=True), session.phys_base)
        if decoded is None:
            totals['undetected'] += 1
            totals['sent'] += len(events)
            continue
        typed = [d.event for d in decoded.events if d.event.kind != 'mailbox_info']
        score = score_events(events, typed)
        announced = [Preamble(), MailboxInfo(virtual_base=session.virtual_base, pid=session.pid)]
        valid = _transmitted_pairs(list(events) + announced, cfg)
        collisions = sum(1 for pair in decoded.pairs if (pair.a, pair.b) not in valid)
        score.update(collisions=collisions, packets_seen=decoded.report.packets_seen, seed=seed)
        per_seed.append(score)
        for key in ('sent', 'recovered', 'false_events', 'collisions', 'packets_seen'):
            totals[key] += score[key]

    rate = totals['collisions'] / totals['packets_seen'] if totals['packets_seen'] else 0.0
    analytic = 126 / float(1 << cfg.crc_bits)
    result = dict(totals)
    result.update({
        'success': totals['recovered'] == totals['sent'] and totals['false_events'] == 0,
        'collision_rate': rate,
        'analytic_collision_rate': analytic,
        'per_seed': per_seed,
    })
    logger.info("reliability: %d/%d recovered, %d false, collision rate %.2e (analytic %.2e)",
                totals['recovered'], totals['sent'], totals['false_events'], rate, analytic)
    return result


def roi_demo(out_dir: Optional[Union[str, Path]] = None, seed: int = 7, iterations: int = 10,
             reads_per_iteration: int = 256, params: Optional[ChannelParams] = None) -> Dict[str, Any]:
    """
    A loop that sends marker M1 at the top of every iteration and then
    reads an array. Segment boundaries are checked against the first
    metadata read of every marker.
    """
    cfg = ChannelConfig()
    memory = PhysicalMemory()
    session = open_session(cfg, seed=seed, memory=memory)
    heap = ContiguousAllocator(memory, session.vp_delta)
    array = heap.allocate(256 * 1024)

    body = session_prologue(session)
    marker_tags = []
    for k in range(iterations):
        marker_tags.append(session.next_tag)
        body += session.send_marker('M1')
        body += payload_scan(array.phys_addr, array.size_bytes, reads_per_iteration, seed=seed + k, tag=k)

    params = params or ChannelParams.preset('quiet', rng_seed=seed)
    trace = run_channel(body, params)
    decoded = _only_session(decode_trace(trace.records), session.phys_base)
    events = decoded.events if decoded else []
    markers = [d for d in events if isinstance(d.event, Marker)]
    segments = roi_segments(events, trace.records)

    truth_starts = [min(trace.indices(Origin.METADATA, tag)) for tag in marker_tags]
    boundaries_match = [s.start_index for s in segments] == truth_starts
    reads_match = True
    for k, segment in enumerate(segments):
        inside = [i for i in trace.indices(Origin.PAYLOAD, k) if segment.start_index <= i < segment.end_index]
        reads_match = reads_match and len(inside) == reads_per_iteration

    result: Dict[str, Any] = {
        'success': bool(decoded) and len(markers) == iterations and boundaries_match and reads_match,
        'markers': len(markers),
        'call_counts': [d.event.call_count for d in markers],
        'boundaries': [s.start_index for s in segments],
        'truth_boundaries': truth_starts,
        'boundaries_match': boundaries_match,
        'segment_reads_match': reads_match,
        'segments': [s.to_dict() for s in segments],
    }
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_trace(trace.records, out / 'trace.csv')
        write_ground_truth(trace.truth, out / 'ground_truth.csv')
        write_events(events, out / 'events.jsonl')
        offset = (decoded.vp_offset or 0) if decoded else 0
        result['files'] = sorted(str(p) for p in emit_plot_data(trace.records, events, out / 'plot', offset).values())
    logger.info("roi demo: %d markers, boundaries match: %s", len(markers), boundaries_match)
    return result


def calls_demo(out_dir: Optional[Union[str, Path]] = None, seed: int = 13, iterations: int = 5,
               inner_calls: int = 2, params: Optional[ChannelParams] = None) -> Dict[str, Any]:
    """
    Entry and exit markers around every call of a small program: an outer
    function that scans an array and calls an inner function a few times.
    Decoded call intervals are checked against the first metadata read of
    every marker, and nesting depth against the program structure.
    """
    cfg = ChannelConfig()
    memory = PhysicalMemory()
    session = open_session(cfg, seed=seed, memory=memory)
    heap = ContiguousAllocator(memory, session.vp_delta)
    array = heap.allocate(64 * 1024)

    body = session_prologue(session)
    expected: List[Any] = []
    reads = 0

    def call(function: str, depth: int, work: int) -> None:
        nonlocal body, reads
        entry_tag = session.next_tag
        body += session.send_entry(function)
        body += payload_scan(array.phys_addr, array.size_bytes, work, seed=seed + reads)
        reads += work
        slot = len(expected)
        expected.append(None)
        if function == 'outer':
            for _ in range(inner_calls):
                call('inner', depth + 1, work // 2)
        exit_tag = session.next_tag
        body += session.send_exit(function)
        expected[slot] = (function, entry_tag, exit_tag, depth)

    for _ in range(iterations):
        call('outer', 0, 64)

    params = params or ChannelParams.preset('quiet', rng_seed=seed)
    trace = run_channel(body, params)
    decoded = _only_session(decode_trace(trace.records), session.phys_base)
    events = decoded.events if decoded else []
    intervals = call_intervals(events, trace.records)

    counts: Dict[str, int] = {}
    truth = []
    for function, entry_tag, exit_tag, depth in expected:
        count = counts.get(function, 0)
        counts[function] = count + 1
        truth.append((function, count, min(trace.indices(Origin.METADATA, entry_tag)),
                      min(trace.indices(Origin.METADATA, exit_tag)), depth))
    truth.sort(key=lambda t: t[2])
    got = [(c.function, c.call_count, c.entry_index, c.exit_index, c.depth) for c in intervals]
    intervals_match = got == truth

    result: Dict[str, Any] = {
        'success': bool(decoded) and intervals_match,
        'calls': len(intervals),
        'expected_calls': len(truth),
        'intervals_match': intervals_match,
        'depths': {f: sorted({c.depth for c in intervals if c.function == f}) for f in counts},
        'intervals': [c.to_dict() for c in intervals],
    }
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_trace(trace.records, out / 'trace.csv')
        write_events(events, out / 'events.jsonl')
        write_json(result['intervals'], out / 'calls.json')
        result['files'] = [str(out / 'calls.json')]
    logger.info("calls demo: %d/%d calls, intervals match: %s", len(intervals), len(truth), intervals_match)
    return result


def objects_demo(out_dir: Optional[Union[str, Path]] = None, seed: int = 11,
                 sizes: Sequence[int] = (1 * MIB, 4 * MIB, 16 * MIB),
                 params: Optional[ChannelParams] = None) -> Dict[str, Any]:
    """
    Allocate objects of increasing size, read each in its entirety, free
    them, and attribute every payload read through the decoded registry.
    """
    cfg = ChannelConfig()
    memory = PhysicalMemory()
    session = open_session(cfg, seed=seed, memory=memory)
    heap = ContiguousAllocator(memory, session.vp_delta)

    allocations = [heap.allocate(size, object_id=i + 1) for i, size in enumerate(sizes)]
    body = session_prologue(session)
    for obj in allocations:
        body += session.send_event(ObjectAlloc(object_id=obj.object_id, virtual_addr=obj.virtual_addr,
                                               size_bytes=obj.size_bytes))
    for obj in allocations:
        body += payload_reads(obj.phys_addr, obj.size_bytes, tag=obj.object_id)
    for obj in allocations:
        body += session.send_event(ObjectFree(object_id=obj.object_id))

    params = params or ChannelParams.preset('adversarial', rng_seed=seed)
    trace = run_channel(body, params)
    decoded = _only_session(decode_trace(trace.records), session.phys_base)
    events = decoded.events if decoded else []
    offset = decoded.vp_offset if decoded else None
    registry = registry_apply(events, offset or 0)

    payload = trace.indices(Origin.PAYLOAD)
    correct = sum(1 for i in payload if registry.attribute(trace.records[i].addr, i) == trace.truth[i].tag)
    accuracy = correct / len(payload) if payload else 0.0
    stats = object_stats(registry, trace.records)

    allocs = {d.event.object_id: d.event for d in events if isinstance(d.event, ObjectAlloc)}
    exact = all(obj.object_id in allocs
                and allocs[obj.object_id].virtual_addr == obj.virtual_addr
                and allocs[obj.object_id].size_bytes == obj.size_bytes for obj in allocations)

    result: Dict[str, Any] = {
        'success': exact and offset == session.vp_delta and accuracy >= 0.99,
        'allocs_exact': exact,
        'vp_offset': offset,
        'expected_vp_offset': session.vp_delta,
        'attribution_accuracy': accuracy,
        'stats': [s.to_dict() for s in stats],
    }
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_events(events, out / 'events.jsonl')
        write_json(result['stats'], out / 'object_stats.json')
        result['files'] = sorted(str(p) for p in emit_plot_data(trace.records, events, out / 'plot', offset or 0).values())
    logger.info("objects demo: allocs exact %s, attribution %.4f", exact, accuracy)
    return result


def randomizer_prefetch_comparison(seed: int = 3, markers: int = 10) -> Dict[str, int]:
    """
    Stride-prefetch injections inside the mailbox during session start-up
    (preamble, mailbox info, a marker loop), randomizer off versus on.
    """
    params = ChannelParams.preset('identity', rng_seed=seed,
                                  prefetcher={'kind': 'stride', 'table_size': 64, 'degree': 4})
    counts = {}
    for enabled in (False, True):
        cfg = ChannelConfig(randomizer_enabled=enabled)
        session = open_session(cfg, seed=seed)
        body = session_prologue(session)
        for _ in range(markers):
            body += session.send_marker('M1')
        trace = run_channel(body, params)
        counts['randomized' if enabled else 'plain'] = count_mailbox_prefetches(trace, session.phys_base, cfg)
    return counts


def discovery_demo(seed: int = 5) -> Dict[str, Any]:
    """Mailbox discovery across every candidate configuration"""
    results = []
    for cfg in candidate_configs():
        # clear of the background range so wide windows stay quiet
        session = open_session(cfg, seed=seed, memory=PhysicalMemory(base=1 << 40, size=1 << 40))
        body = session_prologue(session) + session.send_marker('M1')
        trace = run_channel(body, ChannelParams.preset('quiet', rng_seed=seed))
        sessions = decode_trace(trace.records)
        found = sessions[0].detection if sessions else None
        preamble_end = max(trace.indices(Origin.METADATA, 0))
        results.append({
            'cfg': cfg.label,
            'detected': found is not None,
            'correct': found is not None and found.cfg == cfg and found.phys_base == session.phys_base,
            'within_preamble': found is not None and found.detected_at <= preamble_end,
        })
    return {'success': all(r['correct'] and r['within_preamble'] for r in results), 'configs': results}


def demo_all(out_dir: Union[str, Path], seed: int = 7) -> Dict[str, Any]:
    out = Path(out_dir)
    summary = {
        'roi': roi_demo(out / 'roi', seed=seed),
        'calls': calls_demo(out / 'calls', seed=seed),
        'objects': objects_demo(out / 'objects', seed=seed),
        'reliability': reliability_demo(seeds=range(seed, seed + 5)),
        'randomizer': randomizer_prefetch_comparison(seed),
        'discovery': discovery_demo(seed),
    }
    summary['success'] = all(part.get('success', True) for part in summary.values() if isinstance(part, dict))
    brief = dict(summary)
    brief['reliability'] = {k: v for k, v in summary['reliability'].items() if k != 'per_seed'}
    write_json(brief, out / 'summary.json')
    return summary


def describe(result: Dict[str, Any]) -> List[Tuple[str, Any]]:
    """Flat (key, value) lines of a demo result, skipping bulky entries"""
    return [(k, v) for k, v in result.items() if k not in ('segments', 'intervals', 'stats', 'per_seed', 'files')]
