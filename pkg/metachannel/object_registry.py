"""
Map of program objects announced in-band.

Object allocations arrive with virtual addresses; the mailbox's V-P offset
converts them to physical ranges so trace reads can be attributed to the
object that was live at that trace position.
"""

import logging
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional

from .message_schema import DecodedEvent, ObjectAlloc, ObjectFree

logger = logging.getLogger(__name__)


@dataclass
class ObjectRecord:
    object_id: int
    virtual_addr: int
    size_bytes: int
    phys_addr: int
    alloc_index: int
    free_index: Optional[int] = None
    overlapped: bool = False

    @property
    def phys_end(self) -> int:
        return self.phys_addr + self.size_bytes

    @property
    def virtual_end(self) -> int:
        return self.virtual_addr + self.size_bytes

    def contains(self, addr: int) -> bool:
        return self.phys_addr <= addr < self.phys_end

    def live_at(self, index: Optional[int]) -> bool:
        if index is None:
            return self.free_index is None
        return self.alloc_index <= index and (self.free_index is None or index < self.free_index)


class ObjectRegistry:
    def __init__(self, offset: int = 0):
        self.offset = offset
        self.objects: List[ObjectRecord] = []
        self._live: Dict[int, ObjectRecord] = {}
        self.unknown_frees = 0

    def apply(self, decoded: DecodedEvent) -> None:
        event = decoded.event
        if isinstance(event, ObjectAlloc):
            self._alloc(event, decoded.first_index)
        elif isinstance(event, ObjectFree):
            self._free(event.object_id, decoded.first_index)

    def _alloc(self, event: ObjectAlloc, index: int) -> None:
        previous = self._live.pop(event.object_id, None)
        if previous is not None:
            logger.warning("object %d allocated again while live; closing the earlier range", event.object_id)
            previous.free_index = index
        record = ObjectRecord(event.object_id, event.virtual_addr, event.size_bytes,
                              event.virtual_addr - self.offset, index)
        for other in self._live.values():
            if record.phys_addr < other.phys_end and other.phys_addr < record.phys_end:
                logger.warning("object %d overlaps live object %d", record.object_id, other.object_id)
                other.overlapped = True
                record.overlapped = True
        self._live[record.object_id] = record
        self.objects.append(record)

    def _free(self, object_id: int, index: int) -> None:
        record = self._live.pop(object_id, None)
        if record is None:
            self.unknown_frees += 1
            logger.warning("free of unknown object %d ignored", object_id)
            return
        record.free_index = index

    def get(self, object_id: int) -> Optional[ObjectRecord]:
        for record in reversed(self.objects):
            if record.object_id == object_id:
                return record
        return None

    def attribute(self, addr: int, index: Optional[int] = None) -> Optional[int]:
        """
        Object containing physical addr at trace position index.

        With overlapping live objects the most recent allocation wins. Without
        an index, only objects still live at the end of the log are candidates.
        """
        best: Optional[ObjectRecord] = None
        for record in self.objects:
            if record.contains(addr) and record.live_at(index):
                if best is None or record.alloc_index >= best.alloc_index:
                    best = record
        return best.object_id if best is not None else None


def registry_apply(events: Iterable[DecodedEvent], offset: int = 0,
                   registry: Optional[ObjectRegistry] = None) -> ObjectRegistry:
    """Apply alloc/free events in trace order"""
    registry = registry if registry is not None else ObjectRegistry(offset)
    for decoded in sorted(events, key=lambda d: d.first_index):
        registry.apply(decoded)
    return registry


def attribute(registry: ObjectRegistry, addr: int, index: Optional[int] = None) -> Optional[int]:
    return registry.attribute(addr, index)
