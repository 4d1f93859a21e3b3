"""
Hardware prefetcher models used as a noise source by the channel.

Both models observe demand reads and return the line addresses they would
fetch speculatively.
"""

from collections import OrderedDict
from typing import List, Optional, Protocol

from .channel_mappings import LINE_BYTES, PAGE_BYTES


class Prefetcher(Protocol):
    def observe(self, addr: int) -> List[int]: ...


class NextLinePrefetcher:
    """After a read of X, fetch X+64 .. X+64*degree"""

    def __init__(self, degree: int = 1):
        self.degree = degree

    def observe(self, addr: int) -> List[int]:
        line = addr - addr % LINE_BYTES
        return [line + LINE_BYTES * k for k in range(1, self.degree + 1)]


class _StrideEntry:
    __slots__ = ('last_line', 'stride', 'confidence')

    def __init__(self, last_line: int):
        self.last_line = last_line
        self.stride = 0
        self.confidence = 0


class StridePrefetcher:
    """
    Reference-prediction table keyed on the region (4 KiB page) of each read.

    A stride is confirmed once it repeats; every later read on a confirmed
    stride fetches `degree` strides ahead, staying inside the region. The
    table holds at most `table_size` regions, least recently used evicted.
    """

    def __init__(self, table_size: int = 64, degree: int = 4, region_bytes: int = PAGE_BYTES):
        self.table_size = table_size
        self.degree = degree
        self.region_bytes = region_bytes
        self.table: 'OrderedDict[int, _StrideEntry]' = OrderedDict()

    def observe(self, addr: int) -> List[int]:
        line = addr - addr % LINE_BYTES
        region = line // self.region_bytes
        entry = self.table.get(region)
        if entry is None:
            self.table[region] = _StrideEntry(line)
            if len(self.table) > self.table_size:
                self.table.popitem(last=False)
            return []
        self.table.move_to_end(region)

        if line == entry.last_line:
            return []
        stride = line - entry.last_line
        if stride == entry.stride:
            entry.confidence += 1
        else:
            entry.stride = stride
            entry.confidence = 0
        entry.last_line = line
        if entry.confidence < 1:
            return []

        lo = region * self.region_bytes
        hi = lo + self.region_bytes
        ahead = (line + stride * k for k in range(1, self.degree + 1))
        return [target for target in ahead if lo <= target < hi]


def build_prefetcher(kind: str, degree: int = 1, table_size: int = 64) -> Optional[Prefetcher]:
    if kind == 'none':
        return None
    if kind == 'next_line':
        return NextLinePrefetcher(degree)
    if kind == 'stride':
        return StridePrefetcher(table_size, degree)
    raise ValueError(f"unknown prefetcher {kind!r}")
