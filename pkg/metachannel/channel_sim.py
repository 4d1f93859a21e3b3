"""
Adversarial memory-channel model.

Turns an application request stream into the trace a memory-side logger
would record. The pipeline runs in this order:

1. duplicate suppression (load forwarding), with flushes clearing history
2. background traffic merged at random positions
3. prefetcher injection
4. bounded reordering
5. timestamps

Every stage draws from its own child of one seed, so a trace is fully
determined by the app stream and ChannelParams.
"""

import logging
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Any, Dict, Iterable, List, Literal, Mapping, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from .address_codec import ChannelConfig
from .channel_mappings import (
    CHANNEL_PRESETS,
    LINE_BYTES,
    MAX_JITTER_NS,
    PHYS_MEMORY_BASE,
    PHYS_MEMORY_BYTES,
    READ_COMMANDS,
    TICK_NS,
    Command,
    Origin,
    RequestOp,
)
from .encoder import AppRequest
from .prefetchers import build_prefetcher

logger = logging.getLogger(__name__)

Seed = Union[int, np.random.SeedSequence, np.random.Generator]

_COMMANDS = (Command.MEM_RD, Command.MEM_RD_DATA, Command.MEM_WR)
_RECENT_PREFETCH_LINES = 256


class PrefetcherSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    kind: Literal['none', 'next_line', 'stride'] = 'none'
    degree: int = Field(default=1, ge=1)
    table_size: int = Field(default=64, ge=1)
    issue_prob: float = Field(default=1.0, ge=0.0, le=1.0)


class BackgroundSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    ratio: float = Field(default=0.0, ge=0.0)
    address_base: int = Field(default=PHYS_MEMORY_BASE, ge=0)
    address_space_bytes: int = Field(default=PHYS_MEMORY_BYTES, ge=LINE_BYTES)
    write_fraction: float = Field(default=0.2, ge=0.0, le=1.0)
    sequential_fraction: float = Field(default=0.0, ge=0.0, le=1.0)


class ChannelParams(BaseModel):
    model_config = ConfigDict(frozen=True)

    reorder_depth: int = Field(default=0, ge=0)
    dup_suppress_prob: float = Field(default=0.0, ge=0.0, le=1.0)
    dup_history: int = Field(default=1024, ge=1)
    honor_flushes: bool = True
    prefetcher: PrefetcherSpec = PrefetcherSpec()
    background: BackgroundSpec = BackgroundSpec()
    rng_seed: int = 0

    @classmethod
    def preset(cls, name: str, **overrides: Any) -> 'ChannelParams':
        """identity, quiet or adversarial, with field overrides"""
        if name not in CHANNEL_PRESETS:
            raise ValueError(f"unknown preset {name!r}; expected one of {sorted(CHANNEL_PRESETS)}")
        data: Dict[str, Any] = {k: (dict(v) if isinstance(v, dict) else v)
                                for k, v in CHANNEL_PRESETS[name].items()}
        for key, value in overrides.items():
            if isinstance(value, dict) and isinstance(data.get(key), dict):
                data[key].update(value)
            else:
                data[key] = value
        return cls.model_validate(data)

    @classmethod
    def from_flat(cls, values: Mapping[str, Optional[str]]) -> 'ChannelParams':
        """
        Build from flat key=value settings, as read from a params file.

        Keys: preset, reorder_depth, dup_suppress_prob, dup_history,
        honor_flushes, prefetcher, prefetch_degree, prefetch_table_size,
        background_ratio, background_base, background_space_bytes,
        write_fraction, sequential_fraction, rng_seed.
        """
        flat = {k: v for k, v in values.items() if v not in (None, '')}
        unknown = set(flat) - _FLAT_KEYS
        if unknown:
            raise ValueError(f"unknown channel parameter(s): {', '.join(sorted(unknown))}")

        overrides: Dict[str, Any] = {}
        prefetcher: Dict[str, Any] = {}
        background: Dict[str, Any] = {}
        buckets = {'top': overrides, 'prefetcher': prefetcher, 'background': background}
        for key, raw in flat.items():
            if key == 'preset':
                continue
            target, name, conv = _FLAT_FIELDS[key]
            buckets[target][name] = conv(raw)
        if prefetcher:
            overrides['prefetcher'] = prefetcher
        if background:
            overrides['background'] = background
        return cls.preset(flat.get('preset', 'identity'), **overrides)


def _to_int(raw: Any) -> int:
    return raw if isinstance(raw, int) else int(str(raw), 0)


def _to_bool(raw: Any) -> bool:
    if isinstance(raw, bool):
        return raw
    return str(raw).strip().lower() in ('1', 'true', 'yes', 'on')


_FLAT_FIELDS = {
    'reorder_depth': ('top', 'reorder_depth', _to_int),
    'dup_suppress_prob': ('top', 'dup_suppress_prob', float),
    'dup_history': ('top', 'dup_history', _to_int),
    'honor_flushes': ('top', 'honor_flushes', _to_bool),
    'rng_seed': ('top', 'rng_seed', _to_int),
    'prefetcher': ('prefetcher', 'kind', str),
    'prefetch_degree': ('prefetcher', 'degree', _to_int),
    'prefetch_table_size': ('prefetcher', 'table_size', _to_int),
    'background_ratio': ('background', 'ratio', float),
    'background_base': ('background', 'address_base', _to_int),
    'background_space_bytes': ('background', 'address_space_bytes', _to_int),
    'write_fraction': ('background', 'write_fraction', float),
    'sequential_fraction': ('background', 'sequential_fraction', float),
}
_FLAT_KEYS = frozenset(_FLAT_FIELDS) | {'preset'}


class TraceRecord(NamedTuple):
    timestamp_ns: int
    cmd: Command
    addr: int


class GroundTruth(NamedTuple):
    origin: Origin
    tag: int = -1


class SimRecord(NamedTuple):
    """A record inside the pipeline, before timestamps are assigned"""
    addr: int
    cmd: Command
    origin: Origin
    tag: int = -1


@dataclass
class ChannelTrace:
    records: List[TraceRecord]
    truth: List[GroundTruth]
    stats: Dict[str, int] = field(default_factory=dict)

    def indices(self, origin: Origin, tag: Optional[int] = None) -> List[int]:
        return [i for i, gt in enumerate(self.truth)
                if gt.origin is origin and (tag is None or gt.tag == tag)]


def suppress_duplicates(stream: Iterable[AppRequest], p: float, history: int = 1024,
                        seed: Seed = 0, honor_flushes: bool = True) -> List[AppRequest]:
    """
    Drop reads to recently seen lines with probability p.

    History holds the last `history` distinct lines (LRU). A FlushLine
    clears its line when flushes are honored. Flushes pass through.
    """
    stream = list(stream)
    rng = np.random.default_rng(seed)
    draws = rng.random(len(stream)).tolist() if p > 0 else None
    recent: 'OrderedDict[int, None]' = OrderedDict()
    out = []
    for i, req in enumerate(stream):
        line = req.addr // LINE_BYTES
        if req.op is RequestOp.FLUSH_LINE:
            if honor_flushes:
                recent.pop(line, None)
            out.append(req)
            continue
        if line in recent:
            recent.move_to_end(line)
            if draws is not None and draws[i] < p:
                continue
        else:
            recent[line] = None
            if len(recent) > history:
                recent.popitem(last=False)
        out.append(req)
    return out


def _background_arrays(spec: BackgroundSpec, length: int, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    lines = spec.address_space_bytes // LINE_BYTES
    if length == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)

    # Runs of 16..128 records, each uniform or sequential
    run_lengths = rng.integers(16, 129, size=length // 16 + 1)
    run_starts = np.concatenate(([0], np.cumsum(run_lengths)[:-1]))
    run_id = np.repeat(np.arange(run_lengths.size), run_lengths)[:length]
    sequential = rng.random(run_lengths.size) < spec.sequential_fraction
    first_line = rng.integers(0, lines, size=run_lengths.size)

    offset = np.arange(length) - run_starts[run_id]
    uniform = rng.integers(0, lines, size=length)
    line = np.where(sequential[run_id], (first_line[run_id] + offset) % lines, uniform)
    addrs = spec.address_base + line * LINE_BYTES

    u = rng.random(length)
    cmds = np.where(u < spec.write_fraction, 2, np.where(rng.random(length) < 0.5, 0, 1))
    return addrs, cmds


def background_traffic(params: Union[ChannelParams, BackgroundSpec], length: int, seed: Seed = 0) -> List[TraceRecord]:
    """Standalone background trace with monotone timestamps"""
    spec = params.background if isinstance(params, ChannelParams) else params
    rng = np.random.default_rng(seed)
    addrs, cmds = _background_arrays(spec, length, rng)
    stamps = TICK_NS * np.arange(length) + rng.integers(0, MAX_JITTER_NS + 1, size=length)
    return [TraceRecord(t, _COMMANDS[c], a) for t, c, a in zip(stamps.tolist(), cmds.tolist(), addrs.tolist())]


def merge_background(stream: Sequence[SimRecord], spec: BackgroundSpec, count: int, seed: Seed = 0) -> List[SimRecord]:
    """Interleave `count` background records at uniformly random positions"""
    if count <= 0:
        return list(stream)
    rng = np.random.default_rng(seed)
    addrs, cmds = _background_arrays(spec, count, rng)
    total = len(stream) + count
    mask = np.zeros(total, dtype=bool)
    mask[rng.choice(total, size=count, replace=False)] = True

    bg_addrs = addrs.tolist()
    bg_cmds = cmds.tolist()
    merged = []
    app_iter = iter(stream)
    bg = 0
    for is_bg in mask.tolist():
        if is_bg:
            merged.append(SimRecord(bg_addrs[bg], _COMMANDS[bg_cmds[bg]], Origin.BACKGROUND))
            bg += 1
        else:
            merged.append(next(app_iter))
    return merged


def prefetch_inject(stream: Iterable[SimRecord], model: PrefetcherSpec, seed: Seed = 0) -> List[SimRecord]:
    """
    Insert prefetcher reads after the demand reads that trigger them.

    Lines issued recently are not issued again. Each candidate is issued
    with probability model.issue_prob.
    """
    prefetcher = build_prefetcher(model.kind, model.degree, model.table_size)
    if prefetcher is None:
        return list(stream)
    rng = np.random.default_rng(seed)
    recent: 'OrderedDict[int, None]' = OrderedDict()
    out = []
    for rec in stream:
        out.append(rec)
        if rec.cmd not in READ_COMMANDS:
            continue
        for target in prefetcher.observe(rec.addr):
            if target in recent:
                recent.move_to_end(target)
                continue
            if model.issue_prob < 1.0 and rng.random() >= model.issue_prob:
                continue
            recent[target] = None
            if len(recent) > _RECENT_PREFETCH_LINES:
                recent.popitem(last=False)
            out.append(SimRecord(target, Command.MEM_RD, Origin.PREFETCH))
    return out


def reorder(stream: Iterable[Any], depth: int, seed: Seed = 0) -> List[Any]:
    """
    Emit each record from a (depth + 1)-slot window chosen uniformly.

    The oldest record is forced out at its deadline, so no record moves
    more than `depth` positions.
    """
    items = list(stream)
    if depth <= 0 or len(items) < 2:
        return items
    rng = np.random.default_rng(seed)
    draws = rng.random(len(items)).tolist()

    out = []
    buffer: List[int] = []
    slot: Dict[int, int] = {}
    emitted = bytearray(len(items))
    low = 0
    arriving = 0
    for o in range(len(items)):
        while arriving < len(items) and arriving <= o + depth:
            slot[arriving] = len(buffer)
            buffer.append(arriving)
            arriving += 1
        while emitted[low]:
            low += 1
        pick = low if low <= o - depth else buffer[int(draws[o] * len(buffer))]

        pos = slot.pop(pick)
        last = buffer.pop()
        if last != pick:
            buffer[pos] = last
            slot[last] = pos
        emitted[pick] = 1
        out.append(items[pick])
    return out


def _stamp(stream: Sequence[SimRecord], seed: Seed) -> Tuple[List[TraceRecord], List[GroundTruth]]:
    rng = np.random.default_rng(seed)
    jitter = rng.integers(0, MAX_JITTER_NS + 1, size=len(stream)).tolist()
    records = [TraceRecord(TICK_NS * i + jitter[i], rec.cmd, rec.addr) for i, rec in enumerate(stream)]
    truth = [GroundTruth(rec.origin, rec.tag) for rec in stream]
    return records, truth


def run_channel(app: Iterable[AppRequest], params: ChannelParams) -> ChannelTrace:
    """
    Push an application request stream through the channel.

    Returns:
        ChannelTrace with the memory trace, a ground-truth entry per record
        and per-stage counters.
    """
    app = list(app)
    seeds = np.random.SeedSequence(params.rng_seed).spawn(5)

    kept = suppress_duplicates(app, params.dup_suppress_prob, params.dup_history, seeds[0], params.honor_flushes)
    reads = [SimRecord(r.addr, Command.MEM_RD, r.origin, r.tag) for r in kept if r.op is RequestOp.READ_LINE]
    metadata_reads = sum(1 for r in reads if r.origin is Origin.METADATA)

    n_background = int(round(params.background.ratio * metadata_reads))
    merged = merge_background(reads, params.background, n_background, seeds[1])
    with_prefetch = prefetch_inject(merged, params.prefetcher, seeds[2])
    ordered = reorder(with_prefetch, params.reorder_depth, seeds[3])
    records, truth = _stamp(ordered, seeds[4])

    app_reads = sum(1 for r in app if r.op is RequestOp.READ_LINE)
    stats = {
        'app_reads': app_reads,
        'suppressed': app_reads - len(reads),
        'metadata_reads': metadata_reads,
        'background': n_background,
        'prefetches': len(with_prefetch) - len(merged),
        'records': len(records),
    }
    logger.debug("channel stats: %s", stats)
    return ChannelTrace(records, truth, stats)


def count_mailbox_prefetches(trace: ChannelTrace, base: int, cfg: ChannelConfig) -> int:
    """Prefetcher reads that landed inside a mailbox window"""
    end = base + cfg.window_bytes
    return sum(1 for rec, gt in zip(trace.records, trace.truth)
               if gt.origin is Origin.PREFETCH and base <= rec.addr < end)
