"""
Session-level transmitter.

A session owns a naturally aligned mailbox window in simulated physical
memory and turns events into application requests. Every packet becomes a
flush, a read and a flush of one line; every message is repeated R times.
"""

import logging
import random
from typing import Dict, Iterable, List, NamedTuple, Optional, Sequence, Tuple

from .address_codec import ChannelConfig, assemble_address, check_base
from .channel_mappings import (
    DEFAULT_REPETITIONS,
    DEFAULT_VP_DELTA,
    ENTRY_SUFFIX,
    EXIT_SUFFIX,
    LINE_BYTES,
    PAGE_BYTES,
    PHYS_MEMORY_BASE,
    PHYS_MEMORY_BYTES,
    Origin,
    RequestOp,
    WindowChoice,
)
from .errors import AllocationError, InvalidConfigError, OrderingError
from .message_schema import Event, MailboxInfo, Marker, Message, Preamble, serialize_event

logger = logging.getLogger(__name__)


class AppRequest(NamedTuple):
    addr: int
    op: RequestOp
    origin: Origin
    tag: int = -1


class Region(NamedTuple):
    start: int
    size: int
    label: str

    @property
    def end(self) -> int:
        return self.start + self.size


class ObjectAllocation(NamedTuple):
    object_id: int
    phys_addr: int
    virtual_addr: int
    size_bytes: int


def _round_up(value: int, align: int) -> int:
    return -(-value // align) * align


class PhysicalMemory:
    """First-fit placement over one contiguous physical range"""

    def __init__(self, base: int = PHYS_MEMORY_BASE, size: int = PHYS_MEMORY_BYTES):
        self.base = base
        self.size = size
        self.regions: List[Region] = []

    @property
    def end(self) -> int:
        return self.base + self.size

    def _gaps(self) -> List[Tuple[int, int]]:
        gaps = []
        cursor = self.base
        for region in sorted(self.regions):
            if region.start > cursor:
                gaps.append((cursor, region.start))
            cursor = max(cursor, region.end)
        if cursor < self.end:
            gaps.append((cursor, self.end))
        return gaps

    def _aligned_ranges(self, size: int, align: int) -> List[range]:
        ranges = []
        for lo, hi in self._gaps():
            first = _round_up(lo, align)
            last = hi - size
            if first <= last:
                ranges.append(range(first, last + 1, align))
        return ranges

    def reserve(self, size: int, align: int, label: str, rng: Optional[random.Random] = None) -> int:
        """
        Reserve size bytes at an align-aligned address.

        First fit, or a uniformly chosen fitting slot when rng is given.
        """
        ranges = self._aligned_ranges(size, align)
        total = sum(len(r) for r in ranges)
        if total == 0:
            raise AllocationError(
                f"no free {align}-aligned slot of {size} bytes in [0x{self.base:x}, 0x{self.end:x})"
            )
        pick = rng.randrange(total) if rng is not None else 0
        for r in ranges:
            if pick < len(r):
                start = r[pick]
                break
            pick -= len(r)
        self.regions.append(Region(start, size, label))
        return start

    def release(self, start: int) -> None:
        self.regions = [r for r in self.regions if r.start != start]

    def overlay_slots(self, size: int, align: int, label: str = 'object') -> List[int]:
        """Aligned slots inside memory that intersect regions with this label"""
        slots = set()
        for region in self.regions:
            if region.label != label:
                continue
            slot = (region.start // align) * align
            while slot < region.end:
                if slot >= self.base and slot + size <= self.end:
                    slots.add(slot)
                slot += align
        return sorted(slots)


class ContiguousAllocator:
    """
    Object heap with a single virtual-to-physical delta.

    Every object's virtual address is its physical address plus vp_delta,
    the same delta the mailbox window uses.
    """

    def __init__(self, memory: PhysicalMemory, vp_delta: int = DEFAULT_VP_DELTA):
        self.memory = memory
        self.vp_delta = vp_delta
        self.live: Dict[int, ObjectAllocation] = {}
        self._next_id = 1

    def allocate(self, size: int, object_id: Optional[int] = None) -> ObjectAllocation:
        if size <= 0:
            raise AllocationError("object size must be positive")
        if object_id is None:
            object_id = self._next_id
        self._next_id = max(self._next_id, object_id + 1)
        phys = self.memory.reserve(_round_up(size, PAGE_BYTES), PAGE_BYTES, 'object')
        allocation = ObjectAllocation(object_id, phys, phys + self.vp_delta, size)
        self.live[object_id] = allocation
        return allocation

    def free(self, object_id: int) -> ObjectAllocation:
        allocation = self.live.pop(object_id, None)
        if allocation is None:
            raise AllocationError(f"object {object_id} is not allocated")
        self.memory.release(allocation.phys_addr)
        return allocation


class EncoderSession:
    """One process mailbox and the requests it has emitted so far"""

    def __init__(self, cfg: ChannelConfig, phys_base: int, virtual_base: int, pid: int,
                 repetitions: int = DEFAULT_REPETITIONS,
                 window_choice: WindowChoice = WindowChoice.DEDICATED,
                 capacity_overhead: int = 0):
        check_base(phys_base, cfg)
        if repetitions < 1:
            raise InvalidConfigError("repetitions must be at least 1")
        self.cfg = cfg
        self.phys_base = phys_base
        self.virtual_base = virtual_base
        self.pid = pid
        self.repetitions = repetitions
        self.window_choice = window_choice
        self.capacity_overhead = capacity_overhead
        self.emitted = 0
        self.preamble_sent = False
        self.next_tag = 1
        self._marker_counts: Dict[str, int] = {}

    @property
    def vp_delta(self) -> int:
        return self.virtual_base - self.phys_base

    def _transmit(self, messages: Sequence[Message], tag: int) -> List[AppRequest]:
        requests = []
        for message in messages:
            for _ in range(self.repetitions):
                for packet in message:
                    addr = assemble_address(self.phys_base, packet, self.cfg)
                    requests.append(AppRequest(addr, RequestOp.FLUSH_LINE, Origin.METADATA, tag))
                    requests.append(AppRequest(addr, RequestOp.READ_LINE, Origin.METADATA, tag))
                    requests.append(AppRequest(addr, RequestOp.FLUSH_LINE, Origin.METADATA, tag))
        self.emitted += len(requests)
        return requests

    def emit_preamble(self) -> List[AppRequest]:
        """The preamble must be the first traffic of a session"""
        if self.preamble_sent or self.emitted:
            raise OrderingError("preamble must be emitted once, before any other traffic")
        self.preamble_sent = True
        return self._transmit(serialize_event(Preamble(), self.cfg), tag=0)

    def send_event(self, e: Event) -> List[AppRequest]:
        if isinstance(e, Preamble):
            return self.emit_preamble()
        messages = serialize_event(e, self.cfg)
        tag = self.next_tag
        self.next_tag += 1
        logger.debug("pid %d sends %s as %d messages (tag %d)", self.pid, e.kind, len(messages), tag)
        return self._transmit(messages, tag)

    def send_mailbox_info(self) -> List[AppRequest]:
        if not self.preamble_sent:
            raise OrderingError("mailbox info requires the preamble first")
        return self.send_event(MailboxInfo(virtual_base=self.virtual_base, pid=self.pid))

    def send_marker(self, marker_id: str) -> List[AppRequest]:
        """Send a marker with its per-id incrementing call count"""
        count = self._marker_counts.get(marker_id, 0)
        self._marker_counts[marker_id] = count + 1
        return self.send_event(Marker(marker_id=marker_id, call_count=count))

    def send_entry(self, function: str) -> List[AppRequest]:
        return self.send_marker(function + ENTRY_SUFFIX)

    def send_exit(self, function: str) -> List[AppRequest]:
        return self.send_marker(function + EXIT_SUFFIX)


def open_session(cfg: ChannelConfig,
                 window_choice: WindowChoice = WindowChoice.DEDICATED,
                 seed: int = 0,
                 memory: Optional[PhysicalMemory] = None,
                 pid: Optional[int] = None,
                 repetitions: int = DEFAULT_REPETITIONS,
                 vp_delta: int = DEFAULT_VP_DELTA) -> EncoderSession:
    """
    Place a mailbox window and open a session on it.

    Args:
        cfg: channel configuration
        window_choice: DEDICATED reserves a free aligned slot; OVERLAY places
            the window over allocated objects at no capacity cost
        seed: makes slot choice and default pid deterministic
        memory: physical memory to place into (a fresh 1 GiB space by default)
        pid: process id announced in mailbox info
        repetitions: transmissions of every message
        vp_delta: simulated virtual minus physical offset

    Raises:
        AllocationError: no aligned slot, or nothing to overlay
    """
    window_choice = WindowChoice(window_choice)
    memory = memory if memory is not None else PhysicalMemory()
    rng = random.Random(seed)
    size = cfg.window_bytes

    if window_choice is WindowChoice.DEDICATED:
        base = memory.reserve(size, size, 'mailbox', rng)
        overhead = size
    else:
        slots = memory.overlay_slots(size, size)
        if not slots:
            raise AllocationError(f"no {size}-byte aligned slot overlays an allocated object")
        base = rng.choice(slots)
        overhead = 0

    if pid is None:
        pid = rng.randrange(1, 1 << 22)
    session = EncoderSession(cfg, base, base + vp_delta, pid, repetitions, window_choice, overhead)
    logger.info("opened %s %s mailbox at 0x%x (pid %d, R=%d)",
                window_choice.value, cfg.label, base, pid, repetitions)
    return session


def payload_reads(phys: int, size: int, tag: int = -1) -> List[AppRequest]:
    """Read every line of an object once, in address order"""
    start = (phys // LINE_BYTES) * LINE_BYTES
    return [AppRequest(addr, RequestOp.READ_LINE, Origin.PAYLOAD, tag)
            for addr in range(start, phys + size, LINE_BYTES)]


def payload_scan(phys: int, size: int, count: int, seed: int = 0, tag: int = -1) -> List[AppRequest]:
    """Random line reads inside an object"""
    rng = random.Random(seed)
    lines = max(1, size // LINE_BYTES)
    return [AppRequest(phys + rng.randrange(lines) * LINE_BYTES, RequestOp.READ_LINE, Origin.PAYLOAD, tag)
            for _ in range(count)]


def _units(stream: Sequence[AppRequest]) -> List[List[AppRequest]]:
    units = []
    i = 0
    while i < len(stream):
        req = stream[i]
        if (req.op is RequestOp.FLUSH_LINE and i + 2 < len(stream)
                and stream[i + 1].op is RequestOp.READ_LINE
                and stream[i + 2].op is RequestOp.FLUSH_LINE
                and stream[i + 1].addr == req.addr == stream[i + 2].addr):
            units.append(list(stream[i:i + 3]))
            i += 3
        else:
            units.append([req])
            i += 1
    return units


def interleave_streams(streams: Iterable[Sequence[AppRequest]], seed: int = 0) -> List[AppRequest]:
    """Merge concurrent sessions, never splitting a flush/read/flush triplet"""
    rng = random.Random(seed)
    queues = [_units(s) for s in streams]
    positions = [0] * len(queues)
    merged: List[AppRequest] = []
    active = [i for i, q in enumerate(queues) if q]
    while active:
        i = rng.choice(active)
        merged.extend(queues[i][positions[i]])
        positions[i] += 1
        if positions[i] == len(queues[i]):
            active.remove(i)
    return merged
