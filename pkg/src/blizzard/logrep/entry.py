"""Coupled log entry layout.

One arena allocation per request holds the RAFT control block, the request
payload and the persistent state flags.  Replication, queueing and execution
all refer to the same allocation by offset.

Entry payload layout (little endian)::

    0   state         u8    OpState
    1   gc_flag       u8
    2   kind          u8    EntryKind
    3   reserved      u8
    4   payload_len   u32
    8   term          u64
    16  index         u64
    24  client_id     u64
    32  request_id    u64
    40  payload       payload_len bytes

Bytes ``[2, 40 + payload_len)`` are exactly the wire encoding of an entry, so
a replica can send an entry straight out of the arena.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import IntEnum

from blizzard.pheap import DATA_START, Arena

ENTRY_HEADER = 40
WIRE_OFFSET = 2
WIRE_HEADER = ENTRY_HEADER - WIRE_OFFSET

_CTRL = struct.Struct("<BBBBIQQQQ")
WIRE_CTRL = struct.Struct("<BBIQQQQ")  # kind, reserved, len, term, index, cid, rid
_STATE_OFF = 0
_GC_OFF = 1


class EntryKind(IntEnum):
    UPDATE = 1
    READ = 2
    NOOP = 3
    CONFIG = 4


class OpState(IntEnum):
    RECEIVED = 1
    REPLICATING = 2
    REPLICATED = 3
    FAILED_REPLICATION = 4
    COMPLETED = 5


# EXECUTING is volatile only (membership of the ready set).
_RANK = {
    OpState.RECEIVED: 0,
    OpState.REPLICATING: 1,
    OpState.REPLICATED: 2,
    OpState.FAILED_REPLICATION: 2,
    OpState.COMPLETED: 3,
}
_ALLOWED = {
    (OpState.RECEIVED, OpState.REPLICATING),
    (OpState.RECEIVED, OpState.REPLICATED),
    (OpState.RECEIVED, OpState.FAILED_REPLICATION),
    (OpState.REPLICATING, OpState.REPLICATED),
    (OpState.REPLICATING, OpState.FAILED_REPLICATION),
    (OpState.REPLICATED, OpState.COMPLETED),
    (OpState.FAILED_REPLICATION, OpState.COMPLETED),
}


class BadTransition(Exception):
    pass


@dataclass(frozen=True, slots=True)
class EntryHeader:
    state: int
    gc_flag: int
    kind: int
    payload_len: int
    term: int
    index: int
    client_id: int
    request_id: int

    @property
    def ident(self) -> tuple[int, int]:
        return (self.client_id, self.request_id)


def entry_size(payload_len: int) -> int:
    return ENTRY_HEADER + payload_len


def pack_header(state: int, kind: int, payload_len: int, term: int, index: int,
                client_id: int, request_id: int) -> bytes:
    return _CTRL.pack(state, 0, kind, 0, payload_len, term, index, client_id, request_id)


def read_header(arena: Arena, off: int) -> EntryHeader:
    s, g, k, _, n, t, i, c, r = _CTRL.unpack_from(arena.buffer, DATA_START + off)
    return EntryHeader(s, g, k, n, t, i, c, r)


def get_state(arena: Arena, off: int) -> int:
    return arena.buffer[DATA_START + off]


def get_gc_flag(arena: Arena, off: int) -> int:
    return arena.buffer[DATA_START + off + _GC_OFF]


def get_kind(arena: Arena, off: int) -> int:
    return arena.buffer[DATA_START + off + 2]


def get_term(arena: Arena, off: int) -> int:
    return struct.unpack_from("<Q", arena.buffer, DATA_START + off + 8)[0]


def get_index(arena: Arena, off: int) -> int:
    return struct.unpack_from("<Q", arena.buffer, DATA_START + off + 16)[0]


def check_transition(old: int, new: int) -> None:
    if old == new:
        return
    if (old, new) not in _ALLOWED:
        raise BadTransition(f"{OpState(old).name} -> {OpState(new).name}")


def set_state(arena: Arena, off: int, state: int, *, flush: bool = True) -> None:
    """Single-byte state store (flushed, not fenced)."""
    check_transition(get_state(arena, off), state)
    arena.write_at(off + _STATE_OFF, bytes((state,)))
    if flush:
        arena.flush_at(off + _STATE_OFF, 1)


def set_gc_flag(arena: Arena, off: int, *, flush: bool = True) -> None:
    arena.write_at(off + _GC_OFF, b"\x01")
    if flush:
        arena.flush_at(off + _GC_OFF, 1)


def payload_view(arena: Arena, off: int) -> memoryview:
    n = struct.unpack_from("<I", arena.buffer, DATA_START + off + 4)[0]
    return arena.view_at(off + ENTRY_HEADER, n)


def wire_view(arena: Arena, off: int) -> memoryview:
    """Zero-copy view of the entry's wire encoding."""
    n = struct.unpack_from("<I", arena.buffer, DATA_START + off + 4)[0]
    return arena.view_at(off + WIRE_OFFSET, WIRE_HEADER + n)


def rank(state: int) -> int:
    return _RANK[OpState(state)]
