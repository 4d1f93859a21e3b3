"""
Receiver side of the metadata channel.

Phase 1 scans every read of a trace against every candidate configuration,
hashing reads into mailbox-sized windows and counting preamble messages
seen per window. A window that collects enough distinct preamble messages
becomes a detected mailbox.

Phase 2 keeps only in-window reads of a detected mailbox, slides an
8-packet window over them and CRC-checks every ordered triple containing
the newest packet. Validated pairs are classified as preamble, noise or
chunks; chunks are reassembled into events.
"""

import logging
from collections import OrderedDict, deque
from dataclasses import asdict, dataclass, field
from typing import Deque, Dict, Iterable, List, NamedTuple, Optional, Sequence, Set, Tuple

import numpy as np

from .address_codec import ChannelConfig, candidate_configs, pair_crc, scramble, unscramble
from .channel_mappings import (
    CANDIDATE_TABLE_CAP,
    DETECTION_THRESHOLD,
    OFFSET_BITS,
    PACKET_WINDOW_SIZE,
    READ_COMMANDS,
    TIGHT_TRIPLE_SPAN,
    TRIPLE_CHECKS_PER_PUSH,
)
from .channel_sim import TraceRecord
from .message_schema import (
    DecodedEvent,
    EventAssembler,
    MailboxInfo,
    is_preamble_message,
    preamble_sequence,
    unpack_chunk,
)

logger = logging.getLogger(__name__)

_LINE_MASK = (1 << OFFSET_BITS) - 1


class MailboxDetection(NamedTuple):
    phys_base: int
    cfg: ChannelConfig
    detected_at: int
    preamble_hits: int

    @property
    def window_end(self) -> int:
        return self.phys_base + self.cfg.window_bytes


class ValidatedPair(NamedTuple):
    a: int
    b: int
    first_index: int
    last_index: int
    # tightest in-order (a, b, crc) triple: its trace indices and window span
    packets: Tuple[int, ...] = ()
    span: int = 0


class PacketWindow:
    """The last W (packet, trace index) entries of one mailbox"""

    def __init__(self, size: int = PACKET_WINDOW_SIZE):
        self.entries: Deque[Tuple[int, int]] = deque(maxlen=size)

    def push(self, packet: int, index: int) -> None:
        self.entries.append((packet, index))

    def __len__(self) -> int:
        return len(self.entries)


def triple_check(window: PacketWindow, cfg: ChannelConfig) -> List[ValidatedPair]:
    """
    CRC-check every ordered triple (x, y, z) of distinct window positions
    that includes the newest entry, reporting (x, y) where CRC(x, y) == z.

    Each validated pair is reported once, spanning from the earliest
    position of any triple that validated it to the newest entry. When a
    triple arrived in transmit order (x before y, z newest) the tightest
    such triple is attached as packets/span.
    """
    n = len(window.entries)
    if n < 3:
        return []
    values = [entry[0] for entry in window.entries]
    indices = [entry[1] for entry in window.entries]
    newest = n - 1
    newest_value = values[newest]
    newest_index = indices[newest]
    bits = cfg.packet_bits

    found: Dict[Tuple[int, int], int] = {}
    tight: Dict[Tuple[int, int], Tuple[int, int, int]] = {}
    for i in range(n):
        x = values[i]
        for j in range(n):
            if i == j:
                continue
            crc = pair_crc(x, values[j], bits)
            if i == newest or j == newest:
                for z in range(n):
                    if z != i and z != j and values[z] == crc:
                        first = min(indices[i], indices[j], indices[z])
                        key = (x, values[j])
                        found[key] = min(found.get(key, first), first)
            elif crc == newest_value:
                first = min(indices[i], indices[j], newest_index)
                key = (x, values[j])
                found[key] = min(found.get(key, first), first)
                if i < j:
                    best = tight.get(key)
                    if best is None or newest - i < newest - best[0]:
                        tight[key] = (i, j, newest)
    pairs = []
    for (a, b), first in found.items():
        triple = tight.get((a, b))
        if triple is None:
            pairs.append(ValidatedPair(a, b, first, newest_index))
        else:
            pairs.append(ValidatedPair(a, b, first, newest_index,
                                       tuple(indices[p] for p in triple), newest - triple[0]))
    return pairs


class _CandidateWindow:
    __slots__ = ('values', 'hits')

    def __init__(self, depth: int, n_cfgs: int):
        self.values: Deque[int] = deque(maxlen=depth)
        self.hits: List[Set[int]] = [set() for _ in range(n_cfgs)]


class CandidateTable:
    """
    Candidate windows for one packet width, least recently updated evicted.

    All configurations of a width see the same raw packets, so they share
    one sliding buffer per window and keep separate preamble hit sets.
    """

    def __init__(self, packet_bits: int, cfgs: Sequence[ChannelConfig],
                 window_size: int = PACKET_WINDOW_SIZE, cap: int = CANDIDATE_TABLE_CAP):
        self.packet_bits = packet_bits
        self.cfgs = list(cfgs)
        self.cap = cap
        self.depth = window_size - 1
        self.shift = packet_bits + OFFSET_BITS
        self.mask = (1 << packet_bits) - 1
        self.windows: 'OrderedDict[int, _CandidateWindow]' = OrderedDict()
        self.done: Set[Tuple[int, int]] = set()
        # raw (scrambled) packet -> [(preamble message, the other two raw packets)]
        self.index: List[Dict[int, List[Tuple[int, Tuple[int, int]]]]] = [self._preamble_index(c) for c in self.cfgs]

    @staticmethod
    def _preamble_index(cfg: ChannelConfig) -> Dict[int, List[Tuple[int, Tuple[int, int]]]]:
        index: Dict[int, List[Tuple[int, Tuple[int, int]]]] = {}
        for k, message in enumerate(preamble_sequence(cfg)):
            raw = [scramble(p, cfg) for p in message]
            for role in range(3):
                others = tuple(raw[r] for r in range(3) if r != role)
                index.setdefault(raw[role], []).append((k, others))
        return index

    def __len__(self) -> int:
        return len(self.windows)

    def feed(self, addr: int) -> List[Tuple[int, int, int]]:
        """
        Push one read; returns (cfg position, window key, hits) for each
        configuration whose hit count just changed.
        """
        key = addr >> self.shift
        raw = (addr >> OFFSET_BITS) & self.mask
        window = self.windows.get(key)
        if window is None:
            window = _CandidateWindow(self.depth, len(self.cfgs))
            self.windows[key] = window
            if len(self.windows) > self.cap:
                self.windows.popitem(last=False)
        else:
            self.windows.move_to_end(key)

        changed = []
        values = window.values
        for pos, index in enumerate(self.index):
            matches = index.get(raw)
            if not matches or (pos, key) in self.done:
                continue
            for k, (u, v) in matches:
                if k in window.hits[pos]:
                    continue
                if u == v:
                    present = values.count(u) >= 2
                else:
                    present = u in values and v in values
                if present:
                    window.hits[pos].add(k)
                    changed.append((pos, key, len(window.hits[pos])))
        values.append(raw)
        return changed


class MailboxDetector:
    """
    Phase 1: multi-configuration preamble search.

    Only line-aligned read commands are considered. A detection never
    overlaps an earlier one.
    """

    def __init__(self, candidate_cfgs: Optional[Iterable[ChannelConfig]] = None,
                 threshold: int = DETECTION_THRESHOLD, cap: int = CANDIDATE_TABLE_CAP,
                 window_size: int = PACKET_WINDOW_SIZE):
        cfgs = list(candidate_cfgs) if candidate_cfgs is not None else candidate_configs()
        if not cfgs:
            raise ValueError("at least one candidate configuration is required")
        if threshold < 1:
            raise ValueError("detection threshold must be at least 1")
        self.threshold = threshold
        by_width: Dict[int, List[ChannelConfig]] = {}
        for cfg in cfgs:
            by_width.setdefault(cfg.packet_bits, []).append(cfg)
        self.tables = [CandidateTable(bits, group, window_size, cap) for bits, group in sorted(by_width.items())]
        self.detections: List[MailboxDetection] = []

    def _overlaps(self, base: int, end: int) -> bool:
        return any(base < d.window_end and d.phys_base < end for d in self.detections)

    def feed(self, index: int, record: TraceRecord) -> List[MailboxDetection]:
        if record.cmd not in READ_COMMANDS or record.addr & _LINE_MASK:
            return []
        found = []
        for table in self.tables:
            for pos, key, hits in table.feed(record.addr):
                if hits < self.threshold:
                    continue
                table.done.add((pos, key))
                cfg = table.cfgs[pos]
                base = key << table.shift
                if self._overlaps(base, base + cfg.window_bytes):
                    continue
                detection = MailboxDetection(base, cfg, index, hits)
                self.detections.append(detection)
                found.append(detection)
                logger.info("mailbox detected: %s at 0x%x (trace index %d)", cfg.label, base, index)
        return found


def detect_mailboxes(trace: Sequence[TraceRecord],
                     candidate_cfgs: Optional[Iterable[ChannelConfig]] = None,
                     threshold: int = DETECTION_THRESHOLD,
                     cap: int = CANDIDATE_TABLE_CAP,
                     first_only: bool = False) -> List[MailboxDetection]:
    """Every mailbox whose preamble reaches the threshold, in detection order"""
    detector = MailboxDetector(candidate_cfgs, threshold, cap)
    for index, record in enumerate(trace):
        if detector.feed(index, record) and first_only:
            break
    return detector.detections


def detect_mailbox(trace: Sequence[TraceRecord],
                   candidate_cfgs: Optional[Iterable[ChannelConfig]] = None,
                   threshold: int = DETECTION_THRESHOLD,
                   cap: int = CANDIDATE_TABLE_CAP) -> Optional[MailboxDetection]:
    """First detected mailbox, or None when the trace holds no preamble"""
    found = detect_mailboxes(trace, candidate_cfgs, threshold, cap, first_only=True)
    return found[0] if found else None


@dataclass
class DecodeReport:
    crc_bits: int = 16
    packets_seen: int = 0
    pairs_validated: int = 0
    preamble_pairs: int = 0
    noise_pairs: int = 0
    malformed: int = 0
    events: int = 0
    incompletes: int = 0
    ambiguities: int = 0

    @property
    def analytic_collision_rate(self) -> float:
        """Expected false validations per pushed packet with a full window"""
        return TRIPLE_CHECKS_PER_PUSH / float(1 << self.crc_bits)

    @property
    def noise_pair_rate(self) -> float:
        return self.noise_pairs / self.packets_seen if self.packets_seen else 0.0

    def to_dict(self) -> Dict[str, float]:
        data = asdict(self)
        data['noise_pair_rate'] = self.noise_pair_rate
        data['analytic_collision_rate'] = self.analytic_collision_rate
        return data


class StreamDecoder:
    """Phase 2 for one detected mailbox"""

    def __init__(self, detection: MailboxDetection, window_size: int = PACKET_WINDOW_SIZE,
                 keep_pairs: bool = False):
        self.detection = detection
        self.cfg = detection.cfg
        self.window = PacketWindow(window_size)
        self.assembler = EventAssembler(self.cfg)
        self.report = DecodeReport(crc_bits=self.cfg.crc_bits)
        self.keep_pairs = keep_pairs
        self.pairs: List[ValidatedPair] = []
        self._preamble_seen: Set[Tuple[int, int]] = set()
        self._claimed: Set[int] = set()
        self._finished = False

    def _learn_repetition(self, pair: ValidatedPair) -> None:
        """
        Repeated messages validate several times each. Once the preamble
        shows that, every chunk must be sighted twice before it commits.
        """
        self._preamble_seen.add((pair.a, pair.b))
        repeated = self.report.preamble_pairs >= 2 * len(self._preamble_seen)
        self.assembler.min_sightings = 2 if repeated else 1

    def feed(self, index: int, record: TraceRecord) -> List[DecodedEvent]:
        if record.cmd not in READ_COMMANDS:
            return []
        offset = record.addr - self.detection.phys_base
        if offset < 0 or offset >= self.cfg.window_bytes or offset & _LINE_MASK:
            return []
        return self.push(unscramble(offset >> OFFSET_BITS, self.cfg), index)

    def _firm(self, pair: ValidatedPair) -> bool:
        """
        A tight in-order triple whose packets back no earlier firm sighting.
        Stray CRC collisions reuse packets of real messages and fail this.
        """
        if not pair.span or pair.span > TIGHT_TRIPLE_SPAN:
            return False
        if any(index in self._claimed for index in pair.packets):
            return False
        self._claimed.update(pair.packets)
        return True

    def push(self, packet: int, index: int) -> List[DecodedEvent]:
        report = self.report
        report.packets_seen += 1
        self.window.push(packet, index)
        oldest = self.window.entries[0][1]
        self._claimed = {i for i in self._claimed if i >= oldest}
        decoded = []
        pairs = sorted(triple_check(self.window, self.cfg), key=lambda p: p.span or TIGHT_TRIPLE_SPAN + 1)
        for pair in pairs:
            firm = self._firm(pair)
            report.pairs_validated += 1
            if self.keep_pairs:
                self.pairs.append(pair)
            if is_preamble_message(pair.a, pair.b, self.cfg):
                report.preamble_pairs += 1
                self._learn_repetition(pair)
                continue
            event = self.assembler.feed(unpack_chunk(pair.a, pair.b, self.cfg),
                                        pair.first_index, pair.last_index, report.packets_seen, firm)
            if event is not None:
                report.events += 1
                decoded.append(event)
        return decoded

    def finish(self) -> DecodeReport:
        if not self._finished:
            self.assembler.finish()
            self._finished = True
        report = self.report
        report.noise_pairs = self.assembler.noise
        report.malformed = self.assembler.malformed
        report.ambiguities = self.assembler.ambiguities
        report.incompletes = self.assembler.incompletes
        return report


@dataclass
class SessionDecode:
    detection: MailboxDetection
    events: List[DecodedEvent]
    report: DecodeReport
    pairs: List[ValidatedPair] = field(default_factory=list)

    @property
    def mailbox_info(self) -> Optional[MailboxInfo]:
        for decoded in self.events:
            if isinstance(decoded.event, MailboxInfo):
                return decoded.event
        return None

    @property
    def vp_offset(self) -> Optional[int]:
        info = self.mailbox_info
        return vp_offset(info, self.detection) if info is not None else None


def _addresses(trace: Sequence[TraceRecord]) -> np.ndarray:
    return np.fromiter((rec.addr for rec in trace), dtype=np.uint64, count=len(trace))


def decode_session(trace: Sequence[TraceRecord], detection: MailboxDetection,
                   keep_pairs: bool = False, addrs: Optional[np.ndarray] = None) -> SessionDecode:
    """Phase 2 over the reads after detection that fall inside the window"""
    if addrs is None:
        addrs = _addresses(trace)
    in_window = (addrs >= np.uint64(detection.phys_base)) & (addrs < np.uint64(detection.window_end))
    in_window[:detection.detected_at + 1] = False

    decoder = StreamDecoder(detection, keep_pairs=keep_pairs)
    events: List[DecodedEvent] = []
    for index in np.flatnonzero(in_window).tolist():
        events.extend(decoder.feed(index, trace[index]))
    report = decoder.finish()

    for decoded in events:
        decoded.first_ts = trace[decoded.first_index].timestamp_ns
        decoded.last_ts = trace[decoded.last_index].timestamp_ns
    logger.info("decoded %d events from %s mailbox at 0x%x (%d noise pairs, %d incomplete)",
                report.events, detection.cfg.label, detection.phys_base, report.noise_pairs, report.incompletes)
    return SessionDecode(detection, events, report, decoder.pairs)


def decode_stream(trace: Sequence[TraceRecord], detection: MailboxDetection) -> List[DecodedEvent]:
    return decode_session(trace, detection).events


def decode_trace(trace: Sequence[TraceRecord],
                 candidate_cfgs: Optional[Iterable[ChannelConfig]] = None,
                 threshold: int = DETECTION_THRESHOLD,
                 keep_pairs: bool = False) -> List[SessionDecode]:
    """Detect every mailbox in a trace and decode each one"""
    detections = detect_mailboxes(trace, candidate_cfgs, threshold)
    if not detections:
        logger.info("no mailbox detected in %d records", len(trace))
        return []
    addrs = _addresses(trace)
    return [decode_session(trace, d, keep_pairs, addrs) for d in detections]


def vp_offset(info: MailboxInfo, detection: MailboxDetection) -> int:
    """Virtual minus physical base of the mailbox"""
    return info.virtual_base - detection.phys_base


def translate_phys_to_virt(addr: int, offset: int) -> int:
    return addr + offset


def translate_virt_to_phys(addr: int, offset: int) -> int:
    return addr - offset
