#!/usr/bin/env python3
"""
Tests for the command line: demos, decoding and the encode/simulate/decode pipe
"""

import json

import pytest

from cli import build_parser, main
from metachannel.channel_sim import BackgroundSpec, background_traffic
from metachannel.message_schema import MailboxInfo, Marker, ObjectAlloc, ObjectFree
from metachannel.trace_io import read_events, read_json, write_events, write_trace

EVENTS = [
    MailboxInfo(virtual_base=0x7F5A_1234_0000, pid=4242),
    Marker(marker_id='M1', call_count=0),
    ObjectAlloc(object_id=1, virtual_addr=0x7F5A_2000_0000, size_bytes=1 << 20),
    Marker(marker_id='M1', call_count=1),
    ObjectFree(object_id=1),
]


def test_demo_roi(tmp_path, capsys):
    assert main(['demo', 'roi', '--out', str(tmp_path)]) == 0
    assert (tmp_path / 'roi' / 'trace.csv').exists()
    assert (tmp_path / 'roi' / 'plot' / 'annotations.csv').exists()
    assert 'boundaries_match: True' in capsys.readouterr().out

def test_demo_calls(tmp_path, capsys):
    assert main(['demo', 'calls', '--out', str(tmp_path)]) == 0
    assert (tmp_path / 'calls' / 'calls.json').exists()
    assert 'intervals_match: True' in capsys.readouterr().out



def test_decode_background_has_no_mailbox(tmp_path, capsys):
    trace_path = tmp_path / 'background.csv'
    write_trace(background_traffic(BackgroundSpec(), 20000, seed=4), trace_path)
    report = tmp_path / 'report.json'
    out = tmp_path / 'events.jsonl'
    assert main(['decode', '-i', str(trace_path), '-o', str(out), '--report', str(report)]) == 0
    assert 'no mailbox detected' in capsys.readouterr().err
    assert read_json(report)['detected'] is False
    assert read_events(out) == []


@pytest.mark.parametrize('preset', ['identity', 'adversarial'])
def test_encode_simulate_decode_reproduces_events(tmp_path, preset):
    events_in = tmp_path / 'events.jsonl'
    write_events(EVENTS, events_in)
    requests = tmp_path / 'requests.csv'
    trace = tmp_path / 'trace.csv'
    events_out = tmp_path / 'decoded.jsonl'
    report = tmp_path / 'report.json'

    assert main(['encode', '-i', str(events_in), '-o', str(requests), '--seed', '3']) == 0
    assert main(['simulate', '-i', str(requests), '-o', str(trace), '--truth', str(tmp_path / 'truth.csv'),
                 '--preset', preset, '--seed', '5']) == 0
    assert main(['decode', '-i', str(trace), '-o', str(events_out), '--report', str(report)]) == 0

    assert read_events(events_out) == read_events(events_in)
    sessions = read_json(report)['sessions']
    assert len(sessions) == 1
    assert sessions[0]['label'] == '16b/plain'


def test_annotate_and_stats(tmp_path, capsys):
    events_in = tmp_path / 'events.jsonl'
    write_events(EVENTS, events_in)
    assert main(['encode', '-i', str(events_in), '-o', str(tmp_path / 'req.csv'), '--repetitions', '1']) == 0
    assert main(['simulate', '-i', str(tmp_path / 'req.csv'), '-o', str(tmp_path / 'trace.csv')]) == 0
    assert main(['decode', '-i', str(tmp_path / 'trace.csv'), '-o', str(tmp_path / 'dec.jsonl'),
                 '--report', str(tmp_path / 'report.json')]) == 0
    out = tmp_path / 'annotated'
    assert main(['annotate', '-i', str(tmp_path / 'trace.csv'), '--events', str(tmp_path / 'dec.jsonl'),
                 '--report', str(tmp_path / 'report.json'), '--out', str(out)]) == 0

    segments = json.loads((out / 'segments.json').read_text())
    assert [s['call_count'] for s in segments] == [0, 1]
    stats = json.loads((out / 'object_stats.json').read_text())
    assert [s['object_id'] for s in stats] == [1]
    assert (out / 'plot' / 'annotations.csv').exists()

    capsys.readouterr()
    assert main(['stats', str(tmp_path / 'report.json')]) == 0
    assert 'vp_offset' in capsys.readouterr().out


def test_seed_from_environment(tmp_path, monkeypatch):
    events_in = tmp_path / 'events.jsonl'
    write_events(EVENTS[1:2], events_in)
    monkeypatch.setenv('MAILBOX_SEED', '11')
    assert main(['encode', '-i', str(events_in), '-o', str(tmp_path / 'a.csv')]) == 0
    assert main(['encode', '-i', str(events_in), '-o', str(tmp_path / 'b.csv'), '--seed', '11']) == 0
    assert (tmp_path / 'a.csv').read_text() == (tmp_path / 'b.csv').read_text()


def test_errors_exit_nonzero(tmp_path, capsys):
    bad = tmp_path / 'bad.csv'
    bad.write_text("timestamp_ns,cmd,addr_hex\n1,MemRd,0x40\n2,Nope,0x80\n")
    assert main(['decode', '-i', str(bad)]) == 1
    assert 'error: line 3' in capsys.readouterr().err
    assert main(['simulate', '-i', str(bad), '--params', str(tmp_path / 'missing.env')]) == 1


def test_bad_arguments_show_usage():
    with pytest.raises(SystemExit) as excinfo:
        build_parser().parse_args(['demo', 'everything'])
    assert excinfo.value.code == 2


if __name__ == "__main__":
    print("🧪 Running CLI tests")
    raise SystemExit(pytest.main([__file__, "-v"]))
