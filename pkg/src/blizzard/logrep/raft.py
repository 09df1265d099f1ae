"""RAFT over the coupled log.

Each entry is one arena allocation (see :mod:`blizzard.logrep.entry`).  The
persistent RAFT root holds::

    0   current_term u64
    8   voted_for    u64   node id + 1, 0 for none
    16  first_index  u64   oldest entry still in the log
    24  last_index   u64
    32  enq_index    u64   entries up to here have been pushed into Q
    40  capacity     u64
    48  snap_term    u64   term of entry first_index - 1
    56  reserved
    64  slots        capacity x u64 entry offsets, index i at i % capacity

Ownership of Q: a leader pushes its own entries at receive time, so reads can
interleave in arrival order; a follower pushes entries when it learns they
are committed.  ``enq_index`` keeps the two paths from enqueueing an entry
twice and keeps Q in log order.  Entries that are in Q but get truncated by a
new leader are marked FAILED_REPLICATION and freed by GC through Q; entries
not yet in Q are freed immediately.
"""

from __future__ import annotations

import random
import struct
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Protocol

from blizzard.logrep import wire
from blizzard.logrep.entry import (
    ENTRY_HEADER,
    WIRE_OFFSET,
    EntryKind,
    OpState,
    get_gc_flag,
    get_index,
    get_kind,
    get_state,
    get_term,
    pack_header,
    set_state,
    wire_view,
)
from blizzard.pheap import DATA_START, Arena
from blizzard.sched.queue import OpQueue

ROOT_RAFT = 1
RAFT_HEADER = 64

_HDR = struct.Struct("<QQQQQQQQ")
_U64 = struct.Struct("<Q")
_TERM_VOTE = struct.Struct("<QQ")


class Role(Enum):
    FOLLOWER = "follower"
    CANDIDATE = "candidate"
    LEADER = "leader"


class RaftError(Exception):
    pass


class NotLeader(RaftError):
    pass


class LogFull(RaftError):
    pass


@dataclass
class RaftConfig:
    node_id: int
    nodes: list[int]
    election_timeout: float = 12_000.0  # virtual us; randomized in [T, 2T]
    heartbeat_interval: float = 2_000.0
    batch_cap: int = 32
    log_capacity: int = 1 << 16
    gc_retain: int = 4096
    max_inflight_entries: int = 1024  # per peer, beyond match_index
    copy_mode: bool = False  # ablation: copy payloads at append and send

    @property
    def peers(self) -> list[int]:
        return [n for n in self.nodes if n != self.node_id]

    @property
    def majority(self) -> int:
        return len(self.nodes) // 2 + 1


@dataclass
class RaftStats:
    appended: int = 0
    batches: int = 0
    payload_writes: int = 0  # arena payload writes, leader append or follower store
    payload_copies: int = 0  # in-process copies beyond the arena write (copy ablation)
    copy_bytes: int = 0
    msgs_sent: int = 0
    append_msgs: int = 0
    entries_sent: int = 0
    msgs_recv: int = 0
    committed: int = 0
    truncated: int = 0
    gc_freed: int = 0
    elections: int = 0


class Observer(Protocol):
    def on_leader(self, node: int, term: int) -> None: ...
    def on_append(self, node: int, index: int, term: int, ident: tuple) -> None: ...
    def on_truncate(self, node: int, from_index: int, was_leader: bool) -> None: ...
    def on_commit(self, node: int, index: int, term: int, ident: tuple) -> None: ...


@dataclass
class _Peer:
    next_index: int
    match_index: int = 0
    last_contact: float = 0.0
    rewound_to: int = 0  # hint of the last rewind; repeats are stale rejections


class RaftNode:
    def __init__(self, arena: Arena, config: RaftConfig, queue: OpQueue, *,
                 send: Callable[[int, bytes], None], now: Callable[[], float],
                 rng: random.Random | None = None, observer: Observer | None = None):
        self.arena = arena
        self.cfg = config
        self.q = queue
        self.send = send
        self.now = now
        self.rng = rng or random.Random(config.node_id)
        self.obs = observer
        self.stats = RaftStats()
        root = arena.get_root(ROOT_RAFT)
        if not root:
            cap = config.log_capacity
            root = arena.palloc(RAFT_HEADER + 8 * cap)
            arena.write_at(root.offset, _HDR.pack(0, 0, 1, 0, 0, cap, 0, 0))
            arena.flush_at(root.offset, RAFT_HEADER)
            arena.fence()
            arena.set_root(ROOT_RAFT, root)
        self.base = root.offset
        (self.current_term, vf, self.first_index, self.last_index, self.enq_index,
         self.capacity, self.snap_term, _) = _HDR.unpack_from(arena.buffer, DATA_START + self.base)
        self.voted_for = vf - 1 if vf else None
        self.role = Role.FOLLOWER
        self.leader_id: int | None = None
        self.commit_index = self.first_index - 1
        self.ready = False  # leader: own no-op committed
        self.noop_index = 0
        self.votes: set[int] = set()
        self.peers: dict[int, _Peer] = {}
        self.election_deadline = 0.0
        self.last_heartbeat = 0.0
        self.reset_election_timer()

    # ------------------------------------------------------------ persistence

    def _slot_off(self, index: int) -> int:
        return self.base + RAFT_HEADER + 8 * (index % self.capacity)

    def entry_off(self, index: int) -> int:
        return _U64.unpack_from(self.arena.buffer, DATA_START + self._slot_off(index))[0]

    def _persist_term_vote(self) -> None:
        vf = 0 if self.voted_for is None else self.voted_for + 1
        self.arena.write_at(self.base, _TERM_VOTE.pack(self.current_term, vf))
        self.arena.flush_at(self.base, 16)
        self.arena.fence()

    def _write_header_u64(self, field_off: int, value: int) -> None:
        self.arena.write_at(self.base + field_off, _U64.pack(value))
        self.arena.flush_at(self.base + field_off, 8)

    def _set_last(self, last: int) -> None:
        self.last_index = last
        self._write_header_u64(24, last)

    def _set_enq(self, enq: int) -> None:
        self.enq_index = enq
        self._write_header_u64(32, enq)

    def term_at(self, index: int) -> int | None:
        if index == 0:
            return 0
        if index == self.first_index - 1:
            return self.snap_term
        if self.first_index <= index <= self.last_index:
            return get_term(self.arena, self.entry_off(index))
        return None

    def log_entries(self) -> list[tuple[int, int, tuple]]:
        """(index, term, ident) of every live entry, for checkers."""
        out = []
        for i in range(self.first_index, self.last_index + 1):
            off = self.entry_off(i)
            out.append((i, get_term(self.arena, off), self.ident(off)))
        return out

    def ident(self, off: int) -> tuple:
        buf = self.arena.buffer
        kind = get_kind(self.arena, off)
        cid, rid = struct.unpack_from("<QQ", buf, DATA_START + off + 24)
        return (kind, cid, rid)

    def is_raft_entry(self, off: int) -> bool:
        idx = get_index(self.arena, off)
        return self.first_index <= idx <= self.last_index and self.entry_off(idx) == off

    # ---------------------------------------------------------------- timers

    def reset_election_timer(self) -> None:
        t = self.cfg.election_timeout
        self.election_deadline = self.now() + self.rng.uniform(t, 2 * t)

    def tick(self) -> None:
        now = self.now()
        if self.role == Role.LEADER:
            if now >= self.last_heartbeat + self.cfg.heartbeat_interval:
                self.heartbeat()
        elif now >= self.election_deadline:
            self.start_election()

    def next_timer(self) -> float:
        if self.role == Role.LEADER:
            return self.last_heartbeat + self.cfg.heartbeat_interval
        return self.election_deadline

    # -------------------------------------------------------------- recovery

    def recover(self) -> dict:
        """Restart reconciliation between the RAFT log and Q.

        Committed entries are exactly those marked REPLICATED or later (and
        everything below one of them).  Q entries that are no longer part of
        the log are orphans; unresolved orphans fail.
        """
        arena = self.arena
        commit = self.first_index - 1
        for i in range(self.last_index, self.first_index - 1, -1):
            if get_state(arena, self.entry_off(i)) in (OpState.REPLICATED, OpState.COMPLETED):
                commit = i
                break
        touched = False
        for i in range(self.first_index, commit + 1):
            off = self.entry_off(i)
            if get_state(arena, off) in (OpState.RECEIVED, OpState.REPLICATING):
                set_state(arena, off, OpState.REPLICATED)
                touched = True
        in_q = self.first_index - 1
        orphans = 0
        for pos in self.q.positions():
            off, is_read = self.q.slot(pos)
            if is_read:
                continue
            if self.is_raft_entry(off):
                in_q = max(in_q, get_index(arena, off))
            elif get_state(arena, off) in (OpState.RECEIVED, OpState.REPLICATING):
                set_state(arena, off, OpState.FAILED_REPLICATION)
                orphans += 1
                touched = True
        if in_q != self.enq_index:
            self._set_enq(in_q)
            touched = True
        if touched:
            arena.fence()
        self.commit_index = self.first_index - 1
        requeued = self._apply_commit(commit) if commit > self.commit_index else 0
        self.commit_index = commit
        return {"commit_index": commit, "orphans_failed": orphans, "requeued": requeued}

    # ---------------------------------------------------------------- append

    def _room(self, n: int) -> bool:
        return self.last_index + n - self.first_index + 1 <= self.capacity

    def append_local(self, kind: int, payload, client_id: int, request_id: int) -> int:
        return self.append_batch([(kind, payload, client_id, request_id)])[0]

    def append_batch(self, items: list[tuple[int, object, int, int]]) -> list[int]:
        """Leader append: one palloc round and a constant number of fences.

        Returns entry offsets; entries are RECEIVED and durable, and are in Q
        when Q already holds the whole log.
        """
        if self.role != Role.LEADER:
            raise NotLeader(f"node {self.cfg.node_id} is {self.role.value}")
        n = len(items)
        if not n:
            return []
        if not self._room(n):
            raise LogFull(f"raft log holds {self.last_index - self.first_index + 1}")
        enqueue = self.enq_index == self.last_index
        if enqueue and self.q.room() < n:
            raise LogFull("operation queue is full")
        arena = self.arena
        copy = self.cfg.copy_mode
        sizes = [ENTRY_HEADER + len(p) for _, p, _, _ in items]
        handles = arena.palloc_many(sizes, zero=False, fence=False)
        offs = []
        idx = self.last_index
        term = self.current_term
        for h, (kind, payload, cid, rid) in zip(handles, items):
            idx += 1
            off = h.offset
            if copy:
                payload = bytes(payload)
                self.stats.payload_copies += 1
                self.stats.copy_bytes += len(payload)
            arena.write_at(off, pack_header(OpState.RECEIVED, kind, len(payload), term, idx, cid, rid))
            arena.write_at(off + ENTRY_HEADER, payload)
            arena.flush_at(off, ENTRY_HEADER + len(payload))
            self.stats.payload_writes += 1
            s = self._slot_off(idx)
            arena.write_at(s, _U64.pack(off))
            arena.flush_at(s, 8)
            offs.append(off)
        if enqueue:
            new_end = self.q.stage([(o, False) for o in offs])
        arena.fence()
        self._set_last(idx)
        if enqueue:
            self._set_enq(idx)
            self.q.publish(new_end)
        arena.fence()
        self.stats.appended += n
        self.stats.batches += 1
        if self.obs:
            for i, off in enumerate(offs, self.last_index - n + 1):
                self.obs.on_append(self.cfg.node_id, i, term, self.ident(off))
        return offs

    def replicate(self, offs: list[int]) -> None:
        """Mark a freshly appended batch REPLICATING and ship it to every peer."""
        if not offs:
            return
        arena = self.arena
        for off in offs:
            set_state(arena, off, OpState.REPLICATING)
        arena.fence()
        if len(self.cfg.nodes) == 1:
            self._advance_commit()
            return
        for peer in self.cfg.peers:
            self._pump(peer)

    # ----------------------------------------------------------- replication

    def _entries_msg(self, peer: int, start: int, end: int) -> bytes:
        """AppendBatch carrying [start, end] built from arena views."""
        views = []
        for i in range(start, end + 1):
            v = wire_view(self.arena, self.entry_off(i))
            if self.cfg.copy_mode:
                v = bytes(v)
                self.stats.payload_copies += 1
                self.stats.copy_bytes += len(v)
            views.append(v)
        prev = start - 1
        msg = wire.AppendBatch(self.current_term, self.cfg.node_id, prev, self.term_at(prev) or 0,
                               self.commit_index, views)
        self.stats.append_msgs += 1
        self.stats.entries_sent += len(views)
        return msg.encode()

    def _send(self, peer: int, data: bytes) -> None:
        self.stats.msgs_sent += 1
        self.send(peer, data)

    def _pump(self, peer: int, max_chunks: int | None = None) -> None:
        """Send whatever the peer has not been sent yet, in batch-cap chunks."""
        p = self.peers[peer]
        cap = self.cfg.batch_cap
        limit = min(self.last_index, p.match_index + self.cfg.max_inflight_entries)
        if max_chunks is not None:
            limit = min(limit, p.next_index + cap * max_chunks - 1)
        if p.next_index < self.first_index:
            p.next_index = self.first_index  # compacted: liveness only
        while p.next_index <= limit:
            end = min(limit, p.next_index + cap - 1)
            self._send(peer, self._entries_msg(peer, p.next_index, end))
            p.next_index = end + 1

    def heartbeat(self) -> None:
        now = self.last_heartbeat = self.now()
        for peer in self.cfg.peers:
            p = self.peers[peer]
            if p.match_index < self.last_index:
                # retransmit from the last known match; silent peers get a probe
                p.next_index = max(p.match_index + 1, self.first_index)
                p.rewound_to = 0
                silent = now - p.last_contact > self.cfg.election_timeout
                self._pump(peer, 1 if silent else None)
            else:
                prev = p.match_index
                msg = wire.AppendBatch(self.current_term, self.cfg.node_id, prev,
                                       self.term_at(prev) or 0, self.commit_index, [])
                self._send(peer, msg.encode())

    def on_message(self, src: int, msg) -> None:
        self.stats.msgs_recv += 1
        if isinstance(msg, wire.AppendBatch):
            self._on_append(src, msg)
        elif isinstance(msg, wire.AppendAck):
            self._on_ack(src, msg)
        elif isinstance(msg, wire.RequestVote):
            self._on_request_vote(src, msg)
        elif isinstance(msg, wire.Vote):
            self._on_vote(src, msg)

    def _observe_term(self, term: int) -> None:
        if term > self.current_term:
            self.current_term = term
            self.voted_for = None
            self._persist_term_vote()
            self._become_follower(None)

    def _become_follower(self, leader: int | None) -> None:
        if self.role != Role.FOLLOWER:
            self.role = Role.FOLLOWER
            self.ready = False
        self.leader_id = leader

    def _on_append(self, src: int, m: wire.AppendBatch) -> None:
        self._observe_term(m.term)
        if m.term < self.current_term:
            self._send(src, wire.AppendAck(self.current_term, False, 0).encode())
            return
        if self.role != Role.FOLLOWER or self.leader_id != m.leader_id:
            self._become_follower(m.leader_id)
        self.reset_election_timer()
        prev = m.prev_index
        if prev > self.last_index:
            self._send(src, wire.AppendAck(self.current_term, False, self.last_index + 1).encode())
            return
        if prev >= self.first_index - 1:
            t = self.term_at(prev)
            if t != m.prev_term:
                self._send(src, wire.AppendAck(self.current_term, False,
                                               self._conflict_hint(prev)).encode())
                return
        # else prev is compacted here, hence committed, hence matching
        new = []
        idx = prev
        for view in m.entries:
            idx += 1
            if idx < self.first_index:
                continue
            if idx <= self.last_index and not new:
                _, _, term, *_ = wire.entry_fields(view)
                if self.term_at(idx) == term:
                    continue
                self._truncate(idx)
            new.append(view)
        if new:
            self._follower_store(new)
        last_new = prev + len(m.entries)
        target = min(m.commit_index, last_new)
        if target > self.commit_index:
            self._apply_commit(target)
        self._send(src, wire.AppendAck(self.current_term, True, last_new).encode())

    def _conflict_hint(self, prev: int) -> int:
        t = self.term_at(prev)
        i = prev
        while i > max(self.first_index, self.commit_index + 1) and self.term_at(i - 1) == t:
            i -= 1
        return max(i, self.commit_index + 1)

    def _truncate(self, start: int) -> None:
        """Drop [start, last]; entries already in Q fail, the rest are freed."""
        if start <= self.commit_index:
            raise RaftError(f"truncating committed index {start} <= {self.commit_index}")
        arena = self.arena
        was_leader = self.role == Role.LEADER
        free = []
        for i in range(start, self.last_index + 1):
            off = self.entry_off(i)
            if i <= self.enq_index:
                set_state(arena, off, OpState.FAILED_REPLICATION)
            else:
                free.append(off)
        self.stats.truncated += self.last_index - start + 1
        self._set_last(start - 1)
        if self.enq_index >= start:
            self._set_enq(start - 1)
        arena.fence()
        if free:
            arena.pfree_many(free)
        if self.obs:
            self.obs.on_truncate(self.cfg.node_id, start, was_leader)

    def _follower_store(self, views: list) -> None:
        n = len(views)
        if not self._room(n):
            raise LogFull("raft log full on follower")
        arena = self.arena
        handles = arena.palloc_many([WIRE_OFFSET + len(v) for v in views], zero=False, fence=False)
        idx = self.last_index
        offs = []
        for h, v in zip(handles, views):
            idx += 1
            off = h.offset
            arena.write_at(off, bytes((OpState.REPLICATING, 0)))
            arena.write_at(off + WIRE_OFFSET, v)
            arena.flush_at(off, WIRE_OFFSET + len(v))
            self.stats.payload_writes += 1
            if get_index(arena, off) != idx:
                raise RaftError(f"entry index {get_index(arena, off)} arrived at slot {idx}")
            s = self._slot_off(idx)
            arena.write_at(s, _U64.pack(off))
            arena.flush_at(s, 8)
            offs.append(off)
        arena.fence()
        self._set_last(idx)
        arena.fence()
        if self.obs:
            for i, off in enumerate(offs, idx - n + 1):
                self.obs.on_append(self.cfg.node_id, i, get_term(arena, off), self.ident(off))

    def _on_ack(self, src: int, m: wire.AppendAck) -> None:
        self._observe_term(m.term)
        if self.role != Role.LEADER or m.term != self.current_term:
            return
        p = self.peers[src]
        p.last_contact = self.now()
        if m.success:
            if m.hint > p.match_index:
                p.match_index = m.hint
                self._advance_commit()
            p.next_index = max(p.next_index, p.match_index + 1)
        else:
            hint = max(p.match_index + 1, m.hint)
            if hint == p.rewound_to and p.next_index > hint:
                return  # already resent from there; heartbeats cover a lost resend
            p.rewound_to = hint
            p.next_index = min(p.next_index, hint)
        self._pump(src)

    def _advance_commit(self) -> None:
        matches = sorted([self.last_index] + [p.match_index for p in self.peers.values()],
                         reverse=True)
        n = matches[self.cfg.majority - 1]
        if n > self.commit_index and self.term_at(n) == self.current_term:
            self._apply_commit(n)

    def _apply_commit(self, n: int) -> int:
        """Mark (commit, n] REPLICATED and push what Q lacks; returns pushed count."""
        arena = self.arena
        lo = self.commit_index
        for i in range(lo + 1, n + 1):
            off = self.entry_off(i)
            if get_state(arena, off) in (OpState.RECEIVED, OpState.REPLICATING):
                set_state(arena, off, OpState.REPLICATED)
        arena.fence()
        pushed = 0
        if n > self.enq_index:
            start = max(self.enq_index + 1, self.first_index)
            items = [(self.entry_off(i), False) for i in range(start, n + 1)]
            new_end = self.q.stage(items)
            arena.fence()
            self.q.publish(new_end)
            self._set_enq(n)
            arena.fence()
            pushed = len(items)
        self.commit_index = n
        self.stats.committed += n - lo
        if self.obs:
            for i in range(lo + 1, n + 1):
                off = self.entry_off(i)
                self.obs.on_commit(self.cfg.node_id, i, get_term(arena, off), self.ident(off))
        if self.role == Role.LEADER and not self.ready and n >= self.noop_index:
            self.ready = True
        return pushed

    # -------------------------------------------------------------- election

    def start_election(self) -> None:
        self.role = Role.CANDIDATE
        self.ready = False
        self.leader_id = None
        self.current_term += 1
        self.voted_for = self.cfg.node_id
        self._persist_term_vote()
        self.stats.elections += 1
        self.votes = {self.cfg.node_id}
        self.reset_election_timer()
        if len(self.votes) >= self.cfg.majority:
            self._become_leader()
            return
        rv = wire.RequestVote(self.current_term, self.cfg.node_id, self.last_index,
                              self.term_at(self.last_index) or 0).encode()
        for peer in self.cfg.peers:
            self._send(peer, rv)

    def _on_request_vote(self, src: int, m: wire.RequestVote) -> None:
        self._observe_term(m.term)
        granted = False
        if m.term == self.current_term and self.voted_for in (None, m.candidate):
            my_last_term = self.term_at(self.last_index) or 0
            if (m.last_term, m.last_index) >= (my_last_term, self.last_index):
                granted = True
                if self.voted_for is None:
                    self.voted_for = m.candidate
                    self._persist_term_vote()
                self.reset_election_timer()
        self._send(src, wire.Vote(self.current_term, granted).encode())

    def _on_vote(self, src: int, m: wire.Vote) -> None:
        self._observe_term(m.term)
        if self.role != Role.CANDIDATE or m.term != self.current_term or not m.granted:
            return
        self.votes.add(src)
        if len(self.votes) >= self.cfg.majority:
            self._become_leader()

    def _become_leader(self) -> None:
        self.role = Role.LEADER
        self.leader_id = self.cfg.node_id
        self.ready = False
        now = self.now()
        self.peers = {p: _Peer(self.last_index + 1, 0, now) for p in self.cfg.peers}
        if self.obs:
            self.obs.on_leader(self.cfg.node_id, self.current_term)
        offs = self.append_batch([(EntryKind.NOOP, b"", 0, 0)])
        self.noop_index = self.last_index
        self.last_heartbeat = now
        self.replicate(offs)

    def step_down(self) -> None:
        self._become_follower(None)
        self.reset_election_timer()

    # -------------------------------------------------------------------- gc

    def gc_bound(self) -> int:
        bound = self.commit_index - self.cfg.gc_retain
        if self.role == Role.LEADER and self.peers:
            bound = max(bound, min(p.match_index for p in self.peers.values()))
        elif len(self.cfg.nodes) == 1:
            bound = self.commit_index
        return min(bound, self.commit_index)

    def gc_advance(self) -> int:
        """Free the maximal completed prefix of Q; returns freed entries."""
        arena = self.arena
        q = self.q
        bound = self.gc_bound()
        freed = []
        first = self.first_index
        snap = self.snap_term
        pos = q.tail
        stop = min(q.head, q.end)
        while pos < stop:
            off, is_read = q.slot(pos)
            if not get_gc_flag(arena, off):
                break
            if get_state(arena, off) not in (OpState.COMPLETED, OpState.FAILED_REPLICATION):
                break
            if not is_read and self.is_raft_entry(off):
                idx = get_index(arena, off)
                if idx != first or idx > bound:
                    break
                first += 1
                snap = get_term(arena, off)
            freed.append(off)
            pos += 1
        if not freed:
            return 0
        if first != self.first_index:
            # log prefix first: a crash before the tail moves leaves these
            # entries as plain Q orphans, freed on the next pass
            arena.write_at(self.base + 16, _U64.pack(first))
            arena.write_at(self.base + 48, _U64.pack(snap))
            arena.flush_at(self.base + 16, 40)
            arena.fence()
            self.first_index = first
            self.snap_term = snap
        q.set_tail(pos)
        arena.fence()
        arena.pfree_many(freed)
        self.stats.gc_freed += len(freed)
        return len(freed)
