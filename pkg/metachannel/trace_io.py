"""
File formats shared by the command line and the demos.

    trace         CSV  timestamp_ns,cmd,addr_hex   (extra columns ignored)
    requests      CSV  seq,op,addr_hex,origin[,tag]
    ground truth  CSV  trace_index,origin[,tag]
    events        JSON lines, one event per line plus its trace positions
    params        flat key=value file
"""

import csv
import io
import json
import logging
from contextlib import contextmanager
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Sequence, TextIO, Union

from dotenv import dotenv_values
from pydantic import ValidationError

from .channel_mappings import Command, Origin, RequestOp
from .channel_sim import ChannelParams, GroundTruth, TraceRecord
from .encoder import AppRequest
from .errors import TraceFormatError
from .message_schema import EVENT_ADAPTER, DecodedEvent, Event

logger = logging.getLogger(__name__)

Source = Union[str, Path, TextIO]

TRACE_HEADER = ('timestamp_ns', 'cmd', 'addr_hex')
REQUEST_HEADER = ('seq', 'op', 'addr_hex', 'origin', 'tag')
TRUTH_HEADER = ('trace_index', 'origin', 'tag')
_POSITION_FIELDS = ('first_index', 'last_index', 'first_ts', 'last_ts')


@contextmanager
def _open(source: Source, mode: str) -> Iterator[TextIO]:
    if isinstance(source, (str, Path)):
        with open(source, mode, newline='') as handle:
            yield handle
    else:
        yield source


def _parse_int(text: str, what: str, line_number: int, base: int = 10) -> int:
    try:
        return int(text.strip(), base)
    except ValueError:
        raise TraceFormatError(f"bad {what} {text!r}", line_number) from None


def _rows(handle: TextIO, header: Sequence[str], required: int) -> Iterator[tuple]:
    reader = csv.reader(handle)
    first = next(reader, None)
    if first is None:
        raise TraceFormatError(f"missing header; expected {','.join(header[:required])}", 1)
    names = tuple(col.strip() for col in first[:required])
    if names != tuple(header[:required]):
        raise TraceFormatError(f"unexpected header {','.join(first)}; expected {','.join(header[:required])}", 1)
    for row in reader:
        if not row or not any(cell.strip() for cell in row):
            continue
        if len(row) < required:
            raise TraceFormatError(f"expected at least {required} fields, got {len(row)}", reader.line_num)
        yield reader.line_num, row


def parse_trace(source: Source) -> List[TraceRecord]:
    """Read a trace CSV; columns after addr_hex are ignored"""
    records = []
    with _open(source, 'r') as handle:
        for line_number, row in _rows(handle, TRACE_HEADER, 3):
            try:
                cmd = Command(row[1].strip())
            except ValueError:
                raise TraceFormatError(f"unknown command {row[1]!r}", line_number) from None
            records.append(TraceRecord(_parse_int(row[0], 'timestamp', line_number), cmd,
                                       _parse_int(row[2], 'address', line_number, 16)))
    return records


def write_trace(records: Sequence[TraceRecord], target: Source) -> None:
    with _open(target, 'w') as handle:
        handle.write(','.join(TRACE_HEADER) + '\n')
        handle.writelines(f"{r.timestamp_ns},{r.cmd.value},0x{r.addr:x}\n" for r in records)


def write_requests(requests: Sequence[AppRequest], target: Source) -> None:
    with _open(target, 'w') as handle:
        handle.write(','.join(REQUEST_HEADER) + '\n')
        handle.writelines(f"{seq},{r.op.value},0x{r.addr:x},{r.origin.value},{r.tag}\n"
                          for seq, r in enumerate(requests))


def read_requests(source: Source) -> List[AppRequest]:
    requests = []
    with _open(source, 'r') as handle:
        for line_number, row in _rows(handle, REQUEST_HEADER, 4):
            try:
                op = RequestOp(row[1].strip())
                origin = Origin(row[3].strip())
            except ValueError as e:
                raise TraceFormatError(str(e), line_number) from None
            tag = _parse_int(row[4], 'tag', line_number) if len(row) > 4 and row[4].strip() else -1
            requests.append(AppRequest(_parse_int(row[2], 'address', line_number, 16), op, origin, tag))
    return requests


def write_ground_truth(truth: Sequence[GroundTruth], target: Source) -> None:
    with _open(target, 'w') as handle:
        handle.write(','.join(TRUTH_HEADER) + '\n')
        handle.writelines(f"{i},{gt.origin.value},{gt.tag}\n" for i, gt in enumerate(truth))


def read_ground_truth(source: Source) -> List[GroundTruth]:
    truth = []
    with _open(source, 'r') as handle:
        for line_number, row in _rows(handle, TRUTH_HEADER, 2):
            try:
                origin = Origin(row[1].strip())
            except ValueError:
                raise TraceFormatError(f"unknown origin {row[1]!r}", line_number) from None
            tag = _parse_int(row[2], 'tag', line_number) if len(row) > 2 and row[2].strip() else -1
            truth.append(GroundTruth(origin, tag))
    return truth


def event_to_dict(item: Union[DecodedEvent, Event]) -> Dict[str, Any]:
    if isinstance(item, DecodedEvent):
        data = item.event.model_dump()
        data.update({name: getattr(item, name) for name in _POSITION_FIELDS})
        return data
    return item.model_dump()


def write_events(items: Sequence[Union[DecodedEvent, Event]], target: Source) -> None:
    with _open(target, 'w') as handle:
        for item in items:
            handle.write(json.dumps(event_to_dict(item), sort_keys=True) + '\n')


def _event_lines(source: Source) -> Iterator[tuple]:
    with _open(source, 'r') as handle:
        for line_number, line in enumerate(handle, 1):
            if not line.strip():
                continue
            try:
                data = json.loads(line)
                yield data, EVENT_ADAPTER.validate_python(data)
            except (json.JSONDecodeError, ValidationError) as e:
                raise TraceFormatError(f"bad event: {e}", line_number) from None


def read_events(source: Source) -> List[Event]:
    """Events from a JSON-lines file; position fields are ignored"""
    return [event for _, event in _event_lines(source)]


def read_decoded_events(source: Source) -> List[DecodedEvent]:
    decoded = []
    for data, event in _event_lines(source):
        decoded.append(DecodedEvent(event,
                                    data.get('first_index', -1), data.get('last_index', -1),
                                    data.get('first_ts'), data.get('last_ts')))
    return decoded


def load_channel_params(path: Optional[Union[str, Path]] = None,
                        overrides: Optional[Dict[str, Any]] = None) -> ChannelParams:
    """Channel parameters from a key=value file, with overrides on top"""
    values: Dict[str, Any] = {}
    if path is not None:
        if not Path(path).exists():
            raise FileNotFoundError(f"params file not found: {path}")
        values.update(dotenv_values(path))
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return ChannelParams.from_flat(values)


def write_json(data: Any, target: Source) -> None:
    with _open(target, 'w') as handle:
        json.dump(data, handle, indent=2, sort_keys=True)
        handle.write('\n')


def read_json(source: Source) -> Any:
    with _open(source, 'r') as handle:
        return json.load(handle)


def trace_from_text(text: str) -> List[TraceRecord]:
    return parse_trace(io.StringIO(text))
