"""Persistent circular queue of entry handles (the operation queue Q).

Layout of the queue root::

    0   capacity u64
    8   tail     u64   oldest entry still owned by the queue (GC point)
    16  head     u64   next entry the scheduler will look at
    24  end      u64   one past the newest entry
    32  slots    capacity x u64

Positions grow monotonically; slot ``p`` lives at ``p % capacity``.  A slot
holds an entry payload offset with bit 0 set for read entries (payload
offsets are always 16 mod 32, so the low bits are free).

Pushing is two-phase: :meth:`stage` writes slots, the caller fences, then
:meth:`publish` moves ``end``.  ``end`` never covers a slot that is not
durable.  ``head`` is advisory: recovery restarts dispatch from ``tail``.
"""

from __future__ import annotations

import struct

from blizzard.pheap import DATA_START, Arena

ROOT_QUEUE = 2
QUEUE_HEADER = 32
READ_BIT = 1

_HDR = struct.Struct("<QQQQ")
_U64 = struct.Struct("<Q")


class QueueFull(Exception):
    pass


class CorruptQueue(Exception):
    pass


class OpQueue:
    def __init__(self, arena: Arena, capacity: int = 1 << 16):
        self.arena = arena
        root = arena.get_root(ROOT_QUEUE)
        if not root:
            root = arena.palloc(QUEUE_HEADER + 8 * capacity)
            arena.write_at(root.offset, _HDR.pack(capacity, 0, 0, 0))
            arena.flush_at(root.offset, QUEUE_HEADER)
            arena.fence()
            arena.set_root(ROOT_QUEUE, root)
        self.base = root.offset
        cap, tail, head, end = _HDR.unpack_from(arena.buffer, DATA_START + self.base)
        if cap == 0 or not tail <= end or end - tail > cap:
            raise CorruptQueue(f"queue header cap={cap} tail={tail} end={end}")
        self.capacity = cap
        self.tail = tail
        self.head = max(min(head, end), tail)
        self.end = end

    def __len__(self) -> int:
        return self.end - self.tail

    def room(self) -> int:
        return self.capacity - (self.end - self.tail)

    def _slot_off(self, pos: int) -> int:
        return self.base + QUEUE_HEADER + 8 * (pos % self.capacity)

    def slot(self, pos: int) -> tuple[int, bool]:
        raw = _U64.unpack_from(self.arena.buffer, DATA_START + self._slot_off(pos))[0]
        return raw & ~READ_BIT, bool(raw & READ_BIT)

    def stage(self, items: list[tuple[int, bool]], *, at: int | None = None) -> int:
        """Write slots after ``at`` (default ``end``); returns the new end."""
        pos = self.end if at is None else at
        if pos + len(items) - self.tail > self.capacity:
            raise QueueFull(f"queue holds {len(self)} of {self.capacity}")
        arena = self.arena
        for off, is_read in items:
            s = self._slot_off(pos)
            arena.write_at(s, _U64.pack(off | (READ_BIT if is_read else 0)))
            arena.flush_at(s, 8)
            pos += 1
        return pos

    def publish(self, new_end: int) -> None:
        self.arena.write_at(self.base + 24, _U64.pack(new_end))
        self.arena.flush_at(self.base + 24, 8)
        self.end = new_end

    def push(self, items: list[tuple[int, bool]]) -> None:
        new_end = self.stage(items)
        self.arena.fence()
        self.publish(new_end)
        self.arena.fence()

    def peek(self) -> tuple[int, bool] | None:
        if self.head >= self.end:
            return None
        return self.slot(self.head)

    def advance_head(self) -> None:
        self.head += 1
        self.arena.write_at(self.base + 16, _U64.pack(self.head))
        self.arena.flush_at(self.base + 16, 8)

    def reset_head(self) -> None:
        self.head = self.tail

    def set_tail(self, tail: int) -> None:
        """Move the GC point; the caller fences before freeing entries."""
        self.arena.write_at(self.base + 8, _U64.pack(tail))
        self.arena.flush_at(self.base + 8, 8)
        self.tail = tail

    def positions(self):
        return range(self.tail, self.end)
