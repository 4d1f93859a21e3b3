"""
Trace annotation: ROI segmentation from markers, function call intervals,
per-object statistics and plot-ready data files.
"""

import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

from .channel_mappings import ENTRY_SUFFIX, EXIT_SUFFIX, LINE_BYTES, READ_COMMANDS, Command
from .channel_sim import TraceRecord
from .message_schema import DecodedEvent, MailboxInfo, Marker, ObjectAlloc, ObjectFree
from .object_registry import ObjectRegistry

logger = logging.getLogger(__name__)


@dataclass
class RoiSegment:
    marker_id: str
    call_count: int
    start_index: int
    end_index: int
    start_ts: Optional[int]
    end_ts: Optional[int]

    def to_dict(self) -> Dict:
        return asdict(self)


@dataclass
class ObjectStats:
    object_id: int
    reads: int = 0
    writes: int = 0
    bytes_touched: int = 0
    first_index: Optional[int] = None
    last_index: Optional[int] = None

    def to_dict(self) -> Dict:
        return asdict(self)


def roi_segments(events: Sequence[DecodedEvent], trace: Sequence[TraceRecord]) -> List[RoiSegment]:
    """
    Segments [marker_k, marker_k+1) per marker id; the last one closes at
    trace end.
    """
    by_id: Dict[str, List[DecodedEvent]] = {}
    for decoded in events:
        if isinstance(decoded.event, Marker):
            by_id.setdefault(decoded.event.marker_id, []).append(decoded)

    segments = []
    for marker_id, markers in by_id.items():
        markers.sort(key=lambda d: d.first_index)
        for k, decoded in enumerate(markers):
            start = decoded.first_index
            end = markers[k + 1].first_index if k + 1 < len(markers) else len(trace)
            segments.append(RoiSegment(
                marker_id=marker_id,
                call_count=decoded.event.call_count,
                start_index=start,
                end_index=end,
                start_ts=trace[start].timestamp_ns if start < len(trace) else None,
                end_ts=trace[end - 1].timestamp_ns if 0 < end <= len(trace) else None,
            ))
    segments.sort(key=lambda s: (s.marker_id, s.start_index))
    return segments


@dataclass
class CallInterval:
    function: str
    call_count: int
    entry_index: int
    exit_index: Optional[int]
    depth: int = 0
    entry_ts: Optional[int] = None
    exit_ts: Optional[int] = None

    def to_dict(self) -> Dict:
        return asdict(self)


def _ts(trace: Sequence[TraceRecord], index: Optional[int]) -> Optional[int]:
    return trace[index].timestamp_ns if index is not None and index < len(trace) else None


def call_intervals(events: Sequence[DecodedEvent], trace: Sequence[TraceRecord]) -> List[CallInterval]:
    """
    Pair 'name>' entry markers with 'name<' exit markers of the same call
    count. A call whose exit never arrived stays open (exit_index None).
    Depth counts the calls enclosing each one.
    """
    entries: Dict[Tuple[str, int], DecodedEvent] = {}
    exits: Dict[Tuple[str, int], DecodedEvent] = {}
    for decoded in events:
        event = decoded.event
        if not isinstance(event, Marker) or len(event.marker_id) < 2:
            continue
        if event.marker_id.endswith(ENTRY_SUFFIX):
            entries[(event.marker_id[:-1], event.call_count)] = decoded
        elif event.marker_id.endswith(EXIT_SUFFIX):
            exits[(event.marker_id[:-1], event.call_count)] = decoded

    for key in exits.keys() - entries.keys():
        logger.warning("exit of %s call %d without a matching entry", *key)

    calls = []
    for (function, count), entry in entries.items():
        exit_event = exits.get((function, count))
        exit_index = exit_event.first_index if exit_event is not None else None
        calls.append(CallInterval(function, count, entry.first_index, exit_index,
                                  entry_ts=_ts(trace, entry.first_index), exit_ts=_ts(trace, exit_index)))
    calls.sort(key=lambda c: c.entry_index)

    for call in calls:
        end = call.exit_index if call.exit_index is not None else len(trace)
        call.depth = sum(1 for other in calls
                         if other is not call and other.entry_index < call.entry_index
                         and (other.exit_index is None or other.exit_index > end))
    return calls


def object_stats(registry: ObjectRegistry, trace: Sequence[TraceRecord]) -> List[ObjectStats]:
    """Attribute every record to the object live at its position"""
    stats = {record.object_id: ObjectStats(record.object_id) for record in registry.objects}
    lines: Dict[int, set] = {oid: set() for oid in stats}
    if not registry.objects:
        return []
    lo = min(r.phys_addr for r in registry.objects)
    hi = max(r.phys_end for r in registry.objects)

    for index, rec in enumerate(trace):
        if not lo <= rec.addr < hi:
            continue
        oid = registry.attribute(rec.addr, index)
        if oid is None:
            continue
        entry = stats[oid]
        if rec.cmd in READ_COMMANDS:
            entry.reads += 1
        else:
            entry.writes += 1
        lines[oid].add(rec.addr // LINE_BYTES)
        if entry.first_index is None:
            entry.first_index = index
        entry.last_index = index

    for oid, entry in stats.items():
        entry.bytes_touched = len(lines[oid]) * LINE_BYTES
    return sorted(stats.values(), key=lambda s: s.object_id)


def _annotation(decoded: DecodedEvent, offset: int) -> Optional[Dict[str, str]]:
    event = decoded.event
    if isinstance(event, Marker):
        label, detail = f"{event.marker_id}:{event.call_count}", ''
    elif isinstance(event, ObjectAlloc):
        phys = event.virtual_addr - offset
        label = f"alloc obj{event.object_id}"
        detail = f"0x{phys:x}-0x{phys + event.size_bytes:x}"
    elif isinstance(event, ObjectFree):
        label, detail = f"free obj{event.object_id}", ''
    elif isinstance(event, MailboxInfo):
        label, detail = f"mailbox pid{event.pid}", f"virtual 0x{event.virtual_base:x}"
    else:
        return None
    return {'label': label, 'detail': detail}


def emit_plot_data(trace: Sequence[TraceRecord], events: Sequence[DecodedEvent],
                   out_dir: Union[str, Path], offset: int = 0) -> Dict[str, Path]:
    """
    Write one (timestamp, address) series per command kind present and one
    annotations file for markers and allocations.

    Returns:
        Mapping of series name (command value or 'annotations') to file path.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files: Dict[str, Path] = {}

    for cmd in Command:
        rows = [rec for rec in trace if rec.cmd is cmd]
        if not rows:
            continue
        path = out / f"series_{cmd.value}.csv"
        with open(path, 'w', newline='') as handle:
            handle.write('timestamp_ns,addr_hex\n')
            handle.writelines(f"{r.timestamp_ns},0x{r.addr:x}\n" for r in rows)
        files[cmd.value] = path

    path = out / 'annotations.csv'
    with open(path, 'w', newline='') as handle:
        handle.write('timestamp_ns,trace_index,label,detail\n')
        for decoded in sorted(events, key=lambda d: d.first_index):
            note = _annotation(decoded, offset)
            if note is None:
                continue
            ts = decoded.first_ts if decoded.first_ts is not None else trace[decoded.first_index].timestamp_ns
            handle.write(f"{ts},{decoded.first_index},{note['label']},{note['detail']}\n")
    files['annotations'] = path
    logger.debug("plot data written to %s", out)
    return files
