"""
Typed event layer.

Events are split into chunks, one chunk per message. A chunk packs a type
tag and a sequence number into packet A and a payload word into packet B:

    A = (msg_type << half) | seq        half = packet_bits / 2
    B = payload word                    packet_bits wide

Multi-word fields are split high word first. The preamble is a fixed set of
seeded pseudo-random messages shared by encoder and decoder.
"""

import logging
import random
from collections import deque
from dataclasses import dataclass
from functools import lru_cache
from typing import Annotated, Deque, Dict, FrozenSet, Iterable, List, Literal, NamedTuple, Optional, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field, TypeAdapter, ValidationError, field_validator

from .address_codec import ChannelConfig, crc_packet
from .channel_mappings import (
    CALL_COUNT_BITS,
    HELD_CHUNK_LIMIT,
    KNOWN_TAGS,
    MAX_MARKER_ID_BYTES,
    OBJECT_ID_BITS,
    OBJECT_SIZE_BITS,
    PID_BITS,
    PREAMBLE_MESSAGES,
    PREAMBLE_SEED,
    TAG_MAILBOX_INFO,
    TAG_MARKER,
    TAG_OBJECT_ALLOC,
    TAG_OBJECT_FREE,
    TAG_TO_KIND,
    VIRTUAL_ADDR_BITS,
)
from .errors import AmbiguityError, MalformedChunkError, PayloadTooLargeError

logger = logging.getLogger(__name__)


class _EventModel(BaseModel):
    model_config = ConfigDict(frozen=True, extra='ignore')


class Preamble(_EventModel):
    kind: Literal['preamble'] = 'preamble'


class MailboxInfo(_EventModel):
    kind: Literal['mailbox_info'] = 'mailbox_info'
    virtual_base: int = Field(ge=0, lt=1 << VIRTUAL_ADDR_BITS)
    pid: int = Field(ge=0, lt=1 << PID_BITS)


class Marker(_EventModel):
    kind: Literal['marker'] = 'marker'
    marker_id: str = Field(min_length=1)
    call_count: int = Field(default=0, ge=0, lt=1 << CALL_COUNT_BITS)

    @field_validator('marker_id')
    @classmethod
    def _ascii_id(cls, v: str) -> str:
        if not v.isascii() or '\x00' in v:
            raise ValueError("marker id must be ASCII without NUL bytes")
        return v


class ObjectAlloc(_EventModel):
    kind: Literal['object_alloc'] = 'object_alloc'
    object_id: int = Field(ge=0, lt=1 << OBJECT_ID_BITS)
    virtual_addr: int = Field(ge=0, lt=1 << VIRTUAL_ADDR_BITS)
    size_bytes: int = Field(gt=0, lt=1 << OBJECT_SIZE_BITS)


class ObjectFree(_EventModel):
    kind: Literal['object_free'] = 'object_free'
    object_id: int = Field(ge=0, lt=1 << OBJECT_ID_BITS)


Event = Annotated[
    Union[Preamble, MailboxInfo, Marker, ObjectAlloc, ObjectFree],
    Field(discriminator='kind'),
]
EVENT_ADAPTER = TypeAdapter(Event)


class Message(NamedTuple):
    a: int
    b: int
    crc: int


class Chunk(NamedTuple):
    msg_type: int
    seq: int
    payload: int


@dataclass
class DecodedEvent:
    """An event recovered from a trace, with the trace positions it spans"""
    event: Event
    first_index: int
    last_index: int
    first_ts: Optional[int] = None
    last_ts: Optional[int] = None


def _half(cfg: ChannelConfig) -> int:
    return cfg.packet_bits // 2


def max_chunks(cfg: ChannelConfig) -> int:
    """Largest number of chunks one event can use at this width"""
    return 1 << _half(cfg)


def _words(bits: int, width: int) -> int:
    return -(-bits // width)


def _split(value: int, bits: int, width: int) -> List[int]:
    count = _words(bits, width)
    mask = (1 << width) - 1
    return [(value >> (width * (count - 1 - i))) & mask for i in range(count)]


def _join(words: List[int], bits: int, width: int) -> int:
    value = 0
    for word in words:
        value = (value << width) | word
    if value >> bits:
        raise MalformedChunkError(f"{bits}-bit field overflows: 0x{value:x}")
    return value


def pack_chunk(chunk: Chunk, cfg: ChannelConfig) -> Message:
    half = _half(cfg)
    a = (chunk.msg_type << half) | chunk.seq
    b = chunk.payload
    return Message(a, b, crc_packet([a, b], cfg))


def unpack_chunk(a: int, b: int, cfg: ChannelConfig) -> Chunk:
    half = _half(cfg)
    return Chunk(a >> half, a & ((1 << half) - 1), b)


def _marker_text_words(length: int, cfg: ChannelConfig) -> int:
    return _words(length * 8, cfg.packet_bits)


def expected_chunk_count(msg_type: int, cfg: ChannelConfig, first_payload: Optional[int] = None) -> Optional[int]:
    """
    Number of chunks an event of this type occupies.

    Marker length is carried by chunk 0, so markers need its payload; None is
    returned while it is unknown. A marker length outside 1..8 raises
    MalformedChunkError.
    """
    w = cfg.packet_bits
    if msg_type == TAG_MAILBOX_INFO:
        return _words(VIRTUAL_ADDR_BITS, w) + _words(PID_BITS, w)
    if msg_type == TAG_OBJECT_ALLOC:
        return _words(OBJECT_ID_BITS, w) + _words(VIRTUAL_ADDR_BITS, w) + _words(OBJECT_SIZE_BITS, w)
    if msg_type == TAG_OBJECT_FREE:
        return _words(OBJECT_ID_BITS, w)
    if msg_type == TAG_MARKER:
        if first_payload is None:
            return None
        if not 1 <= first_payload <= MAX_MARKER_ID_BYTES:
            raise MalformedChunkError(f"marker length {first_payload} out of range")
        return 1 + _marker_text_words(first_payload, cfg) + _words(CALL_COUNT_BITS, w)
    return None


def is_plausible_chunk(chunk: Chunk, cfg: ChannelConfig) -> bool:
    """Known tag and a sequence number the tag can actually use"""
    if chunk.msg_type not in KNOWN_TAGS:
        return False
    if chunk.msg_type == TAG_MARKER:
        if chunk.seq == 0 and not 1 <= chunk.payload <= MAX_MARKER_ID_BYTES:
            return False
        limit = expected_chunk_count(TAG_MARKER, cfg, MAX_MARKER_ID_BYTES)
    else:
        limit = expected_chunk_count(chunk.msg_type, cfg)
    return chunk.seq < limit


def _event_words(e: Event, cfg: ChannelConfig) -> Tuple[int, List[int]]:
    w = cfg.packet_bits
    if isinstance(e, MailboxInfo):
        return TAG_MAILBOX_INFO, _split(e.virtual_base, VIRTUAL_ADDR_BITS, w) + _split(e.pid, PID_BITS, w)
    if isinstance(e, Marker):
        raw = e.marker_id.encode('ascii')
        if len(raw) > MAX_MARKER_ID_BYTES:
            raise PayloadTooLargeError(f"marker id {e.marker_id!r} exceeds {MAX_MARKER_ID_BYTES} bytes")
        step = w // 8
        padded = raw.ljust(_marker_text_words(len(raw), cfg) * step, b'\x00')
        text = [int.from_bytes(padded[i:i + step], 'big') for i in range(0, len(padded), step)]
        return TAG_MARKER, [len(raw)] + text + _split(e.call_count, CALL_COUNT_BITS, w)
    if isinstance(e, ObjectAlloc):
        return TAG_OBJECT_ALLOC, (_split(e.object_id, OBJECT_ID_BITS, w)
                                  + _split(e.virtual_addr, VIRTUAL_ADDR_BITS, w)
                                  + _split(e.size_bytes, OBJECT_SIZE_BITS, w))
    if isinstance(e, ObjectFree):
        return TAG_OBJECT_FREE, _split(e.object_id, OBJECT_ID_BITS, w)
    raise TypeError(f"cannot serialize {type(e).__name__}")


def build_event(msg_type: int, words: List[int], cfg: ChannelConfig) -> Event:
    """Rebuild an event from its ordered payload words"""
    w = cfg.packet_bits
    try:
        if msg_type == TAG_MAILBOX_INFO:
            n = _words(VIRTUAL_ADDR_BITS, w)
            return MailboxInfo(virtual_base=_join(words[:n], VIRTUAL_ADDR_BITS, w),
                               pid=_join(words[n:], PID_BITS, w))
        if msg_type == TAG_OBJECT_FREE:
            return ObjectFree(object_id=_join(words, OBJECT_ID_BITS, w))
        if msg_type == TAG_OBJECT_ALLOC:
            n_id = _words(OBJECT_ID_BITS, w)
            n_addr = _words(VIRTUAL_ADDR_BITS, w)
            return ObjectAlloc(object_id=_join(words[:n_id], OBJECT_ID_BITS, w),
                               virtual_addr=_join(words[n_id:n_id + n_addr], VIRTUAL_ADDR_BITS, w),
                               size_bytes=_join(words[n_id + n_addr:], OBJECT_SIZE_BITS, w))
        if msg_type == TAG_MARKER:
            length = words[0]
            n_text = _marker_text_words(length, cfg)
            step = w // 8
            raw = b''.join(word.to_bytes(step, 'big') for word in words[1:1 + n_text])
            if any(raw[length:]):
                raise MalformedChunkError("marker padding is not zero")
            try:
                marker_id = raw[:length].decode('ascii')
            except UnicodeDecodeError as e:
                raise MalformedChunkError(f"marker id is not ASCII: {raw[:length]!r}") from e
            return Marker(marker_id=marker_id,
                          call_count=_join(words[1 + n_text:], CALL_COUNT_BITS, w))
    except ValidationError as e:
        raise MalformedChunkError(f"{TAG_TO_KIND[msg_type]} fails validation: {e.errors()[0]['msg']}") from e
    raise MalformedChunkError(f"unknown message type {msg_type}")


def serialize_event(e: Event, cfg: ChannelConfig) -> List[Message]:
    """Deterministic chunking of an event into CRC-framed messages"""
    if isinstance(e, Preamble):
        return preamble_sequence(cfg)
    msg_type, words = _event_words(e, cfg)
    if len(words) > max_chunks(cfg):
        raise PayloadTooLargeError(
            f"{e.kind} needs {len(words)} chunks; {cfg.packet_bits}-bit packets carry at most {max_chunks(cfg)}"
        )
    return [pack_chunk(Chunk(msg_type, seq, word), cfg) for seq, word in enumerate(words)]


def deserialize_event(pairs: Iterable[Tuple[int, int]], cfg: ChannelConfig) -> Optional[Event]:
    """
    Reassemble the first complete event from CRC-validated (A, B) pairs.

    Args:
        pairs: validated pairs in arrival order; duplicates are collapsed
        cfg: channel configuration of the session

    Returns:
        The event, or None while any chunk is still missing.

    Raises:
        AmbiguityError: two payloads for the same (type, seq)
    """
    groups: Dict[int, Dict[int, int]] = {}
    for a, b in pairs:
        if is_preamble_message(a, b, cfg):
            continue
        chunk = unpack_chunk(a, b, cfg)
        if chunk.msg_type not in KNOWN_TAGS:
            continue
        seqs = groups.setdefault(chunk.msg_type, {})
        previous = seqs.get(chunk.seq)
        if previous is not None and previous != chunk.payload:
            raise AmbiguityError(chunk.msg_type, chunk.seq, [previous, chunk.payload])
        seqs[chunk.seq] = chunk.payload

    for msg_type, seqs in groups.items():
        n = expected_chunk_count(msg_type, cfg, seqs.get(0))
        if n is None or any(seq not in seqs for seq in range(n)):
            continue
        return build_event(msg_type, [seqs[seq] for seq in range(n)], cfg)
    return None


@lru_cache(maxsize=None)
def _preamble_messages(packet_bits: int) -> Tuple[Message, ...]:
    cfg = ChannelConfig(packet_bits=packet_bits)
    rng = random.Random(PREAMBLE_SEED + packet_bits)
    half = _half(cfg)
    seen = set()
    messages = []
    while len(messages) < PREAMBLE_MESSAGES:
        a = rng.getrandbits(packet_bits)
        b = rng.getrandbits(packet_bits)
        # Preamble data never carries a schema tag
        if (a >> half) in KNOWN_TAGS or (a, b) in seen:
            continue
        seen.add((a, b))
        messages.append(Message(a, b, crc_packet([a, b], cfg)))
    return tuple(messages)


@lru_cache(maxsize=None)
def _preamble_pairs(packet_bits: int) -> FrozenSet[Tuple[int, int]]:
    return frozenset((m.a, m.b) for m in _preamble_messages(packet_bits))


def preamble_sequence(cfg: ChannelConfig) -> List[Message]:
    """The 50 distinct CRC-framed preamble messages for this width"""
    return list(_preamble_messages(cfg.packet_bits))


def is_preamble_message(a: int, b: int, cfg: ChannelConfig) -> bool:
    return (a, b) in _preamble_pairs(cfg.packet_bits)


@dataclass
class _Sighting:
    count: int
    first_index: int
    last_index: int
    firm: int = 0


class _Held(NamedTuple):
    seq: int
    payload: int
    first_index: int
    last_index: int
    firm: bool


class _KindAssembly:
    def __init__(self):
        self.pending: Dict[int, Dict[int, _Sighting]] = {}
        self.completed: Optional[List[int]] = None
        self.held: Deque[_Held] = deque(maxlen=HELD_CHUNK_LIMIT)
        self.last_ordinal = 0

    def forget_completed(self) -> None:
        self.completed = None
        self.held.clear()


class EventAssembler:
    """
    Streaming reassembly of validated chunks, one assembly per message type.

    Repeated transmissions of a completed event are held rather than
    committed. The first chunk that differs from the completed event starts
    the next event, seeded with the held chunks of lower sequence number
    sent since the held run restarted at sequence 0. Identical back-to-back
    events of one type therefore collapse into one; an event of any other
    type in between makes the repeat a new event.

    Only firm sightings open an assembly, and an event completes once the
    winning payload of every chunk has a firm sighting and has been seen
    min_sightings times.
    """

    def __init__(self, cfg: ChannelConfig, stale_after: int = 256, min_sightings: int = 1):
        self.cfg = cfg
        self.stale_after = stale_after
        self.min_sightings = min_sightings
        self._kinds: Dict[int, _KindAssembly] = {}
        self.noise = 0
        self.malformed = 0
        self.ambiguities = 0
        self.incompletes = 0

    def feed(self, chunk: Chunk, first_index: int, last_index: int,
             ordinal: Optional[int] = None, firm: bool = True) -> Optional[DecodedEvent]:
        """
        Add one validated chunk.

        Args:
            chunk: unpacked (type, seq, payload)
            first_index, last_index: trace positions of the validating triple
            ordinal: running count of mailbox packets, used to expire stalled assemblies
            firm: whether the triple is a firm sighting (see StreamDecoder)

        Returns:
            The event this chunk completes, if any.
        """
        if not is_plausible_chunk(chunk, self.cfg):
            self.noise += 1
            return None
        msg_type, seq, payload = chunk
        state = self._kinds.setdefault(msg_type, _KindAssembly())
        ordinal = last_index if ordinal is None else ordinal

        if state.pending and ordinal - state.last_ordinal > self.stale_after:
            logger.debug("abandoning stalled %s assembly", TAG_TO_KIND[msg_type])
            self.incompletes += 1
            state.pending.clear()
        state.last_ordinal = ordinal

        if not state.pending:
            completed = state.completed
            if completed is not None and seq < len(completed) and completed[seq] == payload:
                state.held.append(_Held(seq, payload, first_index, last_index, firm))
                return None
            if not firm:
                return None
            held = list(state.held)
            restart = next((k for k, h in enumerate(held) if h.seq == 0), len(held))
            for h in held[restart:]:
                if h.seq < seq:
                    self._add(msg_type, state, h.seq, h.payload, h.first_index, h.last_index, h.firm)
            state.held.clear()

        self._add(msg_type, state, seq, payload, first_index, last_index, firm)
        return self._try_complete(msg_type, state)

    def _add(self, msg_type: int, state: _KindAssembly, seq: int, payload: int,
             first_index: int, last_index: int, firm: bool) -> None:
        sightings = state.pending.setdefault(seq, {})
        seen = sightings.get(payload)
        if seen is not None:
            seen.count += 1
            seen.firm += firm
            seen.first_index = min(seen.first_index, first_index)
            seen.last_index = max(seen.last_index, last_index)
            return
        sightings[payload] = _Sighting(1, first_index, last_index, int(firm))
        if len(sightings) > 1:
            self.ambiguities += 1
            err = AmbiguityError(msg_type, seq, list(sightings))
            logger.warning("%s (keeping the most sighted)", err)

    @staticmethod
    def _winner(sightings: Dict[int, _Sighting]) -> Tuple[int, _Sighting]:
        # ties keep the earliest sighting
        return max(sightings.items(), key=lambda item: (item[1].firm, item[1].count, -item[1].first_index))

    def _confirmed(self, sighting: _Sighting) -> bool:
        return sighting.firm > 0 and sighting.count >= self.min_sightings

    def _try_complete(self, msg_type: int, state: _KindAssembly) -> Optional[DecodedEvent]:
        best = {seq: self._winner(sightings) for seq, sightings in state.pending.items()}
        first = best.get(0)
        try:
            n = expected_chunk_count(msg_type, self.cfg, first[0] if first else None)
        except MalformedChunkError:
            n = None
        if n is None or any(seq not in best or not self._confirmed(best[seq][1]) for seq in range(n)):
            return None

        words = [best[seq][0] for seq in range(n)]
        if words == state.completed:
            # late repeats of the previous event outvoted a stray chunk
            state.pending.clear()
            return None
        try:
            event = build_event(msg_type, words, self.cfg)
        except MalformedChunkError as e:
            self.malformed += 1
            logger.debug("dropping malformed assembly: %s", e)
            state.pending.clear()
            return None

        first_index = min(best[seq][1].first_index for seq in range(n))
        last_index = max(best[seq][1].last_index for seq in range(n))
        state.completed = words
        state.pending.clear()
        state.held.clear()
        for other_type, other in self._kinds.items():
            if other_type != msg_type:
                other.forget_completed()
        return DecodedEvent(event, first_index, last_index)

    def finish(self) -> int:
        """Close the stream; returns the number of assemblies left incomplete"""
        for state in self._kinds.values():
            if state.pending:
                self.incompletes += 1
                state.pending.clear()
        return self.incompletes
