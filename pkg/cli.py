#!/usr/bin/env python3
"""
Command Line Interface for the in-band metadata channel

Examples:
  - Encode events into an application request stream:
      python cli.py encode -i events.jsonl -o requests.csv

  - Push requests through the adversarial channel:
      python cli.py simulate -i requests.csv -o trace.csv --truth truth.csv --preset adversarial

  - Recover events from a trace:
      python cli.py decode -i trace.csv -o decoded.jsonl --report report.json

  - Annotate a trace with ROI segments, object stats and plot data:
      python cli.py annotate -i trace.csv --events decoded.jsonl --report report.json --out annotated/

  - Run the experiments end to end:
      python cli.py demo all --out demo_out/

Environment (.env is loaded): MAILBOX_SEED overrides the RNG seed, LOG_LEVEL sets verbosity.
"""

import os
import sys
import argparse
import logging
from typing import Any, Dict, List, Optional
from dotenv import load_dotenv
from pydantic import ValidationError

# Ensure project imports work when running as script
CURRENT_DIR = os.path.dirname(os.path.abspath(__file__))
if CURRENT_DIR not in sys.path:
    sys.path.insert(0, CURRENT_DIR)

from metachannel.address_codec import ChannelConfig, candidate_configs
from metachannel.channel_mappings import DEFAULT_REPETITIONS, DEFAULT_VP_DELTA, DETECTION_THRESHOLD
from metachannel.channel_sim import run_channel
from metachannel.demo_runner import calls_demo, demo_all, describe, objects_demo, reliability_demo, roi_demo
from metachannel.encoder import open_session
from metachannel.errors import MailboxError
from metachannel.mailbox_decoder import decode_trace
from metachannel.message_schema import MailboxInfo, Preamble
from metachannel.object_registry import registry_apply
from metachannel.trace_analyzer import emit_plot_data, object_stats, roi_segments
from metachannel.trace_io import (
    load_channel_params,
    parse_trace,
    read_decoded_events,
    read_events,
    read_json,
    read_requests,
    write_events,
    write_ground_truth,
    write_json,
    write_requests,
    write_trace,
)

logger = logging.getLogger('metachannel.cli')


def _input(path: str):
    return sys.stdin if path == '-' else path


def _output(path: Optional[str]):
    return sys.stdout if path in (None, '-') else path


def _seed(explicit: Optional[int]) -> Optional[int]:
    """Explicit flag first, then MAILBOX_SEED"""
    if explicit is not None:
        return explicit
    env = os.getenv('MAILBOX_SEED')
    return int(env, 0) if env else None


def cmd_encode(args: argparse.Namespace) -> int:
    events = read_events(_input(args.input))
    cfg = ChannelConfig(packet_bits=args.packet_bits, randomizer_enabled=args.randomizer)
    session = open_session(cfg, seed=_seed(args.seed) or 0, repetitions=args.repetitions, vp_delta=args.vp_delta)

    info = next((e for e in events if isinstance(e, MailboxInfo)), None)
    if info is not None:
        session.virtual_base = info.virtual_base
        session.pid = info.pid

    requests = session.emit_preamble() + session.send_mailbox_info()
    for event in events:
        if isinstance(event, (MailboxInfo, Preamble)):
            continue
        requests += session.send_event(event)

    write_requests(requests, _output(args.output))
    sys.stderr.write(f"encoded {len(events)} events into {len(requests)} requests "
                     f"(mailbox 0x{session.phys_base:x}, {cfg.label}, R={session.repetitions})\n")
    return 0


def _channel_overrides(args: argparse.Namespace) -> Dict[str, Any]:
    overrides = {
        'preset': args.preset,
        'reorder_depth': args.reorder_depth,
        'dup_suppress_prob': args.dup_suppress_prob,
        'dup_history': args.dup_history,
        'honor_flushes': False if args.no_honor_flushes else None,
        'prefetcher': args.prefetcher,
        'prefetch_degree': args.prefetch_degree,
        'prefetch_table_size': args.prefetch_table_size,
        'background_ratio': args.background_ratio,
        'write_fraction': args.write_fraction,
        'sequential_fraction': args.sequential_fraction,
        'rng_seed': _seed(args.seed),
    }
    return {k: v for k, v in overrides.items() if v is not None}


def cmd_simulate(args: argparse.Namespace) -> int:
    params = load_channel_params(args.params, _channel_overrides(args))
    requests = read_requests(_input(args.input))
    trace = run_channel(requests, params)
    write_trace(trace.records, _output(args.output))
    if args.truth:
        write_ground_truth(trace.truth, args.truth)
    sys.stderr.write(' '.join(f"{k}={v}" for k, v in trace.stats.items()) + "\n")
    return 0


def _session_summary(session) -> Dict[str, Any]:
    detection = session.detection
    return {
        'phys_base': f"0x{detection.phys_base:x}",
        'config': detection.cfg.model_dump(),
        'label': detection.cfg.label,
        'detected_at': detection.detected_at,
        'preamble_hits': detection.preamble_hits,
        'vp_offset': session.vp_offset,
        'counters': session.report.to_dict(),
    }


def cmd_decode(args: argparse.Namespace) -> int:
    trace = parse_trace(_input(args.input))
    widths = [int(w) for w in args.widths.split(',')] if args.widths else None
    cfgs = candidate_configs(widths) if widths else candidate_configs()
    sessions = decode_trace(trace, cfgs, args.threshold)

    events = sorted((d for s in sessions for d in s.events), key=lambda d: d.first_index)
    write_events(events, _output(args.output))
    report = {'records': len(trace), 'detected': bool(sessions),
              'sessions': [_session_summary(s) for s in sessions]}
    if args.report:
        write_json(report, args.report)
    if not sessions:
        sys.stderr.write("no mailbox detected\n")
    else:
        for s in sessions:
            sys.stderr.write(f"mailbox {s.detection.cfg.label} at 0x{s.detection.phys_base:x}: "
                             f"{s.report.events} events\n")
    return 0


def cmd_annotate(args: argparse.Namespace) -> int:
    trace = parse_trace(_input(args.input))
    events = read_decoded_events(args.events)
    offset = args.vp_offset
    if offset is None and args.report:
        sessions = read_json(args.report).get('sessions', [])
        offset = next((s['vp_offset'] for s in sessions if s.get('vp_offset') is not None), None)
    offset = offset or 0

    registry = registry_apply(events, offset)
    out = args.out
    os.makedirs(out, exist_ok=True)
    write_json([s.to_dict() for s in roi_segments(events, trace)], os.path.join(out, 'segments.json'))
    write_json([s.to_dict() for s in object_stats(registry, trace)], os.path.join(out, 'object_stats.json'))
    files = emit_plot_data(trace, events, os.path.join(out, 'plot'), offset)
    sys.stderr.write(f"annotated {len(trace)} records; {len(files)} plot files in {out}\n")
    return 0


def cmd_stats(args: argparse.Namespace) -> int:
    report = read_json(_input(args.report))
    if not report.get('detected'):
        print("no mailbox detected")
        return 0
    for session in report['sessions']:
        print(f"mailbox {session['label']} at {session['phys_base']} (detected at {session['detected_at']})")
        print(f"  vp_offset: {session['vp_offset']}")
        for key, value in session['counters'].items():
            print(f"  {key}: {value:.3g}" if isinstance(value, float) else f"  {key}: {value}")
    return 0


def cmd_demo(args: argparse.Namespace) -> int:
    seed = _seed(args.seed)
    out = args.out
    if args.which == 'roi':
        result = roi_demo(os.path.join(out, 'roi'), seed=seed if seed is not None else 7)
    elif args.which == 'calls':
        result = calls_demo(os.path.join(out, 'calls'), seed=seed if seed is not None else 13)
    elif args.which == 'objects':
        result = objects_demo(os.path.join(out, 'objects'), seed=seed if seed is not None else 11)
    elif args.which == 'reliability':
        start = seed if seed is not None else 0
        result = reliability_demo(seeds=range(start, start + args.seeds))
        write_json({k: v for k, v in result.items() if k != 'per_seed'}, os.path.join(out, 'reliability.json'))
    else:
        result = demo_all(out, seed=seed if seed is not None else 7)
        for name in ('roi', 'calls', 'objects', 'reliability', 'randomizer', 'discovery'):
            print(f"[{name}]")
            for key, value in describe(result[name]):
                print(f"  {key}: {value}")
        return 0 if result['success'] else 1

    for key, value in describe(result):
        print(f"{key}: {value}")
    return 0 if result.get('success') else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog='metachannel',
        description='In-band metadata channel: encode, simulate, decode and annotate memory traces',
    )

    subparsers = parser.add_subparsers(dest='command', required=True)

    # encode command
    p_encode = subparsers.add_parser('encode', help='Events JSON-lines -> application request stream')
    p_encode.add_argument('-i', '--input', default='-', help='Events file or - for stdin (default: -)')
    p_encode.add_argument('-o', '--output', default=None, help='Requests CSV (default: stdout)')
    p_encode.add_argument('--packet-bits', type=int, default=16, choices=(8, 16, 24, 32))
    p_encode.add_argument('--randomizer', action='store_true', help='Scramble packets before address assembly')
    p_encode.add_argument('--repetitions', type=int, default=DEFAULT_REPETITIONS, help='Transmissions per message')
    p_encode.add_argument('--vp-delta', type=lambda s: int(s, 0), default=DEFAULT_VP_DELTA,
                          help='Virtual minus physical offset of the simulated process')
    p_encode.add_argument('--seed', type=int, default=None, help='Window placement seed')
    p_encode.set_defaults(func=cmd_encode)

    # simulate command
    p_sim = subparsers.add_parser('simulate', help='Request stream -> memory trace and ground truth')
    p_sim.add_argument('-i', '--input', default='-', help='Requests CSV or - for stdin (default: -)')
    p_sim.add_argument('-o', '--output', default=None, help='Trace CSV (default: stdout)')
    p_sim.add_argument('--truth', default=None, help='Ground-truth CSV output')
    p_sim.add_argument('--params', default=None, help='Channel params file (key=value)')
    p_sim.add_argument('--preset', choices=('identity', 'quiet', 'adversarial'), default=None)
    p_sim.add_argument('--reorder-depth', type=int, default=None)
    p_sim.add_argument('--dup-suppress-prob', type=float, default=None)
    p_sim.add_argument('--dup-history', type=int, default=None)
    p_sim.add_argument('--no-honor-flushes', action='store_true', help='Flushes do not clear forwarding history')
    p_sim.add_argument('--prefetcher', choices=('none', 'next_line', 'stride'), default=None)
    p_sim.add_argument('--prefetch-degree', type=int, default=None)
    p_sim.add_argument('--prefetch-table-size', type=int, default=None)
    p_sim.add_argument('--background-ratio', type=float, default=None)
    p_sim.add_argument('--write-fraction', type=float, default=None)
    p_sim.add_argument('--sequential-fraction', type=float, default=None)
    p_sim.add_argument('--seed', type=int, default=None, help='Channel RNG seed')
    p_sim.set_defaults(func=cmd_simulate)

    # decode command
    p_decode = subparsers.add_parser('decode', help='Trace -> events JSON-lines and decode report')
    p_decode.add_argument('-i', '--input', default='-', help='Trace CSV or - for stdin (default: -)')
    p_decode.add_argument('-o', '--output', default=None, help='Events file (default: stdout)')
    p_decode.add_argument('--report', default=None, help='Decode report JSON output')
    p_decode.add_argument('--widths', default=None, help='Comma-separated packet widths to search (default: all)')
    p_decode.add_argument('--threshold', type=int, default=DETECTION_THRESHOLD, help='Preamble messages needed')
    p_decode.set_defaults(func=cmd_decode)

    # annotate command
    p_ann = subparsers.add_parser('annotate', help='Trace + events -> segments, object stats, plot data')
    p_ann.add_argument('-i', '--input', default='-', help='Trace CSV or - for stdin (default: -)')
    p_ann.add_argument('--events', required=True, help='Decoded events file')
    p_ann.add_argument('--report', default=None, help='Decode report, for the V-P offset')
    p_ann.add_argument('--vp-offset', type=lambda s: int(s, 0), default=None, help='Override the V-P offset')
    p_ann.add_argument('--out', required=True, help='Output directory')
    p_ann.set_defaults(func=cmd_annotate)

    # stats command
    p_stats = subparsers.add_parser('stats', help='Summarize a decode report')
    p_stats.add_argument('report', help='Decode report JSON or - for stdin')
    p_stats.set_defaults(func=cmd_stats)

    # demo command
    p_demo = subparsers.add_parser('demo', help='Run the experiments end to end with fixed seeds')
    p_demo.add_argument('which', choices=('roi', 'calls', 'objects', 'reliability', 'all'))
    p_demo.add_argument('--out', default='demo_out', help='Output directory (default: demo_out)')
    p_demo.add_argument('--seed', type=int, default=None)
    p_demo.add_argument('--seeds', type=int, default=20, help='Seeds for the reliability demo')
    p_demo.set_defaults(func=cmd_demo)

    return parser


def main(argv: Optional[List[str]] = None) -> int:
    load_dotenv()
    logging.basicConfig(level=os.getenv('LOG_LEVEL', 'INFO').upper(),
                        format='%(levelname)s %(name)s: %(message)s')
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (MailboxError, ValidationError, FileNotFoundError, ValueError) as e:
        sys.stderr.write(f"error: {e}\n")
        return 1


if __name__ == '__main__':
    raise SystemExit(main())
