"""Failure-atomic transactions over an :class:`~blizzard.pheap.Arena`.

Undo logging in the style of PMDK: before the first store to a range inside a
transaction, the range's pre-image is appended to a persistent undo chain and
fenced.  Commit flushes the written ranges, fences, flips the slot state to
COMMITTED (the single atomicity point) and then reclaims the chain.  Recovery
rolls back every slot still ACTIVE, newest record first.

Transaction table (root ``ROOT_TXTABLE``), 64 slots of 32 bytes::

    state u64 (0 free, 1 active, 2 committed) | tx_id u64 | undo head u64 | pad

Undo record payload::

    kind u32 | pad u32 | lsn u64 | target u64 | length u64 | next u64 | bytes...

``kind`` is SNAPSHOT (pre-image of ``[target, target+length)``) or ALLOC
(``target`` is a block allocated by the transaction, freed on rollback).
"""

from __future__ import annotations

import struct
import threading
from dataclasses import dataclass, field
from enum import IntEnum

from blizzard.pheap import (
    DATA_START,
    NULL,
    Arena,
    ArenaError,
    PHandle,
    RangeOutOfBounds,
)

ROOT_TXTABLE = 0
TX_SLOTS = 64
SLOT_SIZE = 32
REC_HEADER = 40

_SLOT = struct.Struct("<QQQ")
_REC = struct.Struct("<IIQQQQ")
_U64 = struct.Struct("<Q")

REC_SNAPSHOT = 1
REC_ALLOC = 2


class TxState(IntEnum):
    FREE = 0
    ACTIVE = 1
    COMMITTED = 2


class TxError(ArenaError):
    pass


class TxNotActive(TxError):
    pass


class TxTableFull(TxError):
    """All slots busy; reported as out-of-space."""


class CorruptUndoChain(TxError):
    pass


@dataclass
class RecoveryReport:
    rolled_back: list[int] = field(default_factory=list)  # tx ids
    finished_commits: int = 0

    @property
    def count(self) -> int:
        return len(self.rolled_back)


class TxManager:
    """Owns the persistent transaction table of one arena."""

    def __init__(self, arena: Arena, *, skip_undo_fence: bool = False):
        self.arena = arena
        # fault injection for crash-fuzzer sanity checks
        self.skip_undo_fence = skip_undo_fence
        self._lock = threading.Lock()
        root = arena.get_root(ROOT_TXTABLE)
        if not root:
            root = arena.palloc(TX_SLOTS * SLOT_SIZE)
            arena.set_root(ROOT_TXTABLE, root)
        self.table = root.offset
        self._busy = [False] * TX_SLOTS
        self._next_id = (arena.incarnation << 32) + 1
        self._next_lsn = (arena.incarnation << 40) + 1
        self.committed = 0
        self.aborted = 0

    def _slot_off(self, slot: int) -> int:
        return self.table + slot * SLOT_SIZE

    def read_slot(self, slot: int) -> tuple[int, int, int]:
        return _SLOT.unpack_from(self.arena.buffer, (DATA_START + self._slot_off(slot)))

    def _write_slot(self, slot: int, state: int, tx_id: int, head: int) -> None:
        off = self._slot_off(slot)
        self.arena.write_at(off, _SLOT.pack(state, tx_id, head))
        self.arena.flush_at(off, 24)

    def next_lsn(self) -> int:
        with self._lock:
            lsn = self._next_lsn
            self._next_lsn += 1
            return lsn

    def begin(self) -> "Transaction":
        with self._lock:
            try:
                slot = self._busy.index(False)
            except ValueError:
                raise TxTableFull("all transaction slots are busy") from None
            self._busy[slot] = True
            tx_id = self._next_id
            self._next_id += 1
        self._write_slot(slot, TxState.ACTIVE, tx_id, 0)
        self.arena.fence()
        return Transaction(self, slot, tx_id)

    def _release(self, slot: int) -> None:
        with self._lock:
            self._busy[slot] = False

    def active_slots(self) -> list[int]:
        return [s for s in range(TX_SLOTS) if self.read_slot(s)[0] == TxState.ACTIVE]

    # -------------------------------------------------------------- recovery

    def _walk_chain(self, head: int) -> list[tuple[int, int, int, int, int]]:
        """(record off, kind, lsn, target, length) newest first."""
        arena = self.arena
        out = []
        seen = set()
        p = head
        while p:
            if p in seen:
                raise CorruptUndoChain(f"undo chain cycle at {p}")
            seen.add(p)
            if not arena.is_live(p):
                raise CorruptUndoChain(f"undo record {p} is not a live allocation")
            kind, _, lsn, target, length, nxt = _REC.unpack_from(arena.buffer, (DATA_START + p))
            if kind not in (REC_SNAPSHOT, REC_ALLOC):
                raise CorruptUndoChain(f"undo record {p} has kind {kind}")
            if kind == REC_SNAPSHOT:
                if length > arena.size_of(p) - REC_HEADER or target + length > arena.data_size:
                    raise CorruptUndoChain(f"undo record {p} has bad length {length}")
            out.append((p, kind, lsn, target, length))
            p = nxt
        return out

    def recover(self) -> RecoveryReport:
        """Roll back every ACTIVE transaction; idempotent under repeated crashes."""
        arena = self.arena
        report = RecoveryReport()
        records = []
        active = []
        for slot in range(TX_SLOTS):
            state, tx_id, head = self.read_slot(slot)
            if state == TxState.ACTIVE:
                chain = self._walk_chain(head)
                records.extend(chain)
                active.append((slot, tx_id, chain))
            elif state == TxState.COMMITTED:
                # commit point passed; reclaim is best effort (leaks allowed)
                self._write_slot(slot, TxState.FREE, 0, 0)
                report.finished_commits += 1
            elif state != TxState.FREE:
                raise CorruptUndoChain(f"slot {slot} has state {state}")
        if report.finished_commits:
            arena.fence()
        if not active:
            return report
        # newest first across all slots
        records.sort(key=lambda r: r[2], reverse=True)
        for p, kind, _, target, length in records:
            if kind == REC_SNAPSHOT and length:
                arena.write_at(target, arena.view_at(p + REC_HEADER, length).tobytes())
                arena.flush_at(target, length)
        arena.fence()
        to_free = []
        for p, kind, _, target, _ in records:
            if kind == REC_ALLOC and arena.is_live(target):
                to_free.append(target)
        if to_free:
            arena.pfree_many(to_free)
        for slot, tx_id, _ in active:
            self._write_slot(slot, TxState.FREE, 0, 0)
            report.rolled_back.append(tx_id)
        arena.fence()
        undo_blocks = [p for _, _, chain in active for (p, *_rest) in chain]
        if undo_blocks:
            arena.pfree_many(undo_blocks)
        return report


class Transaction:
    """One ACTIVE transaction; confined to the thread that began it."""

    def __init__(self, mgr: TxManager, slot: int, tx_id: int):
        self.mgr = mgr
        self.arena = mgr.arena
        self.slot = slot
        self.tx_id = tx_id
        self.state = TxState.ACTIVE
        self._head = 0
        self._undo: list[int] = []
        self._logged: dict[int, int] = {}  # start -> end of logged ranges
        self._written: list[tuple[int, int]] = []
        self._allocated: list[tuple[int, int]] = []  # (payload off, end)
        self._deferred_free: list[int] = []
        self.undo_records = 0

    def _require_active(self) -> None:
        if self.state != TxState.ACTIVE:
            raise TxNotActive(f"transaction {self.tx_id} is {self.state.name}")

    def _covered(self, start: int, end: int) -> bool:
        got = self._logged.get(start)
        if got is not None and got >= end:
            return True
        for s, e in self._logged.items():
            if s <= start and e >= end:
                return True
        for s, e in self._allocated:
            if s <= start and e >= end:
                return True
        return False

    def _append_record(self, kind: int, target: int, length: int, prior: bytes) -> None:
        arena = self.arena
        rec = arena.palloc(REC_HEADER + len(prior), zero=False)
        lsn = self.mgr.next_lsn()
        arena.write_at(rec.offset, _REC.pack(kind, 0, lsn, target, length, self._head) + prior)
        arena.flush_at(rec.offset, REC_HEADER + len(prior))
        if not self.mgr.skip_undo_fence:
            arena.fence()
        self._head = rec.offset
        slot_head = self.mgr._slot_off(self.slot) + 16
        arena.write_at(slot_head, _U64.pack(rec.offset))
        arena.flush_at(slot_head, 8)
        if not self.mgr.skip_undo_fence:
            arena.fence()
        self._undo.append(rec.offset)
        self.undo_records += 1

    def write_at(self, off: int, data) -> None:
        """Transactional store at a data-region offset."""
        self._require_active()
        n = len(data)
        if n == 0:
            return
        end = off + n
        if not self._covered(off, end):
            prior = self.arena.read_at(off, n)
            self._append_record(REC_SNAPSHOT, off, n, prior)
            self._logged[off] = max(self._logged.get(off, 0), end)
        self.arena.write_at(off, data)
        self._written.append((off, n))

    def write(self, h: PHandle, offset: int, data) -> None:
        """tx_write: range-checked store into an allocation."""
        self._require_active()
        size = self.arena.size_of(h)
        if offset < 0 or offset + len(data) > size:
            raise RangeOutOfBounds(f"[{offset}, {offset + len(data)}) outside allocation of {size}")
        self.write_at(h.offset + offset, data)

    def write_u64(self, off: int, value: int) -> None:
        self.write_at(off, _U64.pack(value))

    def alloc(self, size: int) -> PHandle:
        """Allocate inside the transaction; rolled back allocations are freed."""
        self._require_active()
        h = self.arena.palloc(size)
        self._append_record(REC_ALLOC, h.offset, 0, b"")
        self._allocated.append((h.offset, h.offset + self.arena.size_of(h)))
        return h

    def free(self, h: PHandle | int) -> None:
        """Free at commit time, after the commit point."""
        self._require_active()
        off = h.offset if isinstance(h, PHandle) else h
        self.arena.size_of(off)  # validates liveness now
        self._deferred_free.append(off)

    def commit(self) -> None:
        self._require_active()
        arena = self.arena
        for off, n in self._written:
            arena.flush_at(off, n)
        arena.fence()
        slot_off = self.mgr._slot_off(self.slot)
        arena.write_at(slot_off, _U64.pack(TxState.COMMITTED))
        arena.flush_at(slot_off, 8)
        arena.fence()
        self.state = TxState.COMMITTED
        if self._deferred_free:
            arena.pfree_many(self._deferred_free)
        self.mgr._write_slot(self.slot, TxState.FREE, 0, 0)
        arena.fence()
        if self._undo:
            arena.pfree_many(self._undo)
        self.mgr._release(self.slot)
        self.mgr.committed += 1

    def abort(self) -> None:
        """Roll back in-process (handler failure path)."""
        self._require_active()
        arena = self.arena
        records = self.mgr._walk_chain(self._head)
        for p, kind, _, target, length in records:
            if kind == REC_SNAPSHOT and length:
                arena.write_at(target, arena.view_at(p + REC_HEADER, length).tobytes())
                arena.flush_at(target, length)
        arena.fence()
        allocs = [t for _, kind, _, t, _ in records if kind == REC_ALLOC]
        if allocs:
            arena.pfree_many(allocs)
        self.mgr._write_slot(self.slot, TxState.FREE, 0, 0)
        arena.fence()
        if self._undo:
            arena.pfree_many(self._undo)
        self.state = TxState.FREE
        self.mgr._release(self.slot)
        self.mgr.aborted += 1


def tx_begin(arena_or_mgr) -> Transaction:
    mgr = arena_or_mgr if isinstance(arena_or_mgr, TxManager) else TxManager(arena_or_mgr)
    return mgr.begin()


def tx_write(tx: Transaction, h: PHandle, offset: int, data) -> None:
    tx.write(h, offset, data)


def tx_commit(tx: Transaction) -> None:
    tx.commit()


def recover_transactions(arena_or_mgr) -> int:
    mgr = arena_or_mgr if isinstance(arena_or_mgr, TxManager) else TxManager(arena_or_mgr)
    return mgr.recover().count


__all__ = [
    "NULL", "TxManager", "Transaction", "TxState", "TxError", "TxNotActive",
    "TxTableFull", "CorruptUndoChain", "RecoveryReport", "tx_begin", "tx_write",
    "tx_commit", "recover_transactions", "ROOT_TXTABLE",
]
