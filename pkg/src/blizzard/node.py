"""One replica: arena, transactions, RAFT, Q, scheduler, service and executor.

A node is transport agnostic.  The transport feeds it inbox items and calls
:meth:`Node.run_tick`; the node talks back through a :class:`NodeEnv`.  Each
tick drains the inbox, runs RAFT timers, turns queued client requests into
log entries (one ``append_batch`` per batch-cap chunk), dispatches from Q,
fences the tick's flag writes once and advances GC.  ``run_tick`` returns the
tick's cost in virtual microseconds under :class:`CostModel`.
"""

from __future__ import annotations

import random
import struct
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Protocol

from blizzard.libds.services import Service, make_service
from blizzard.logrep import wire
from blizzard.logrep.entry import ENTRY_HEADER, EntryKind, OpState, pack_header
from blizzard.logrep.raft import LogFull, RaftConfig, RaftNode, Role
from blizzard.logrep.wire import Status
from blizzard.patomic import TxManager
from blizzard.pheap import DATA_START, Arena
from blizzard.sched.executor import (
    InlineExecutor,
    ShuffleExecutor,
    ThreadedExecutor,
    VirtualExecutor,
)
from blizzard.sched.locks import make_provider
from blizzard.sched.queue import OpQueue, QueueFull
from blizzard.sched.scheduler import ExecResult, Scheduler

_IDENT = struct.Struct("<QQ")


@dataclass
class CostModel:
    """Virtual microseconds charged to the event loop of a node."""

    recv: float = 1.0  # per message received
    send: float = 0.5  # per message sent
    fence: float = 0.3  # per fence issued by the loop
    entry: float = 0.3  # per log entry appended or stored
    copy_byte: float = 0.002  # per byte copied in the copy ablation


@dataclass
class NodeConfig:
    node_id: int
    nodes: list[int]
    service: str = "kv"
    service_args: dict = field(default_factory=dict)
    executors: int = 4
    executor: str = "virtual"  # virtual | inline | shuffle | threaded
    serial: bool = False
    batch_cap: int = 32
    copy_mode: bool = False
    election_timeout: float = 12_000.0
    heartbeat_interval: float = 2_000.0
    log_capacity: int = 1 << 16
    queue_capacity: int = 1 << 16
    gc_retain: int = 4096
    max_inflight_entries: int = 1024
    debug_checks: bool = False
    skip_undo_fence: bool = False  # broken build for crash-fuzzer sanity checks

    def raft_config(self) -> RaftConfig:
        return RaftConfig(self.node_id, list(self.nodes), self.election_timeout,
                          self.heartbeat_interval, self.batch_cap, self.log_capacity,
                          self.gc_retain, self.max_inflight_entries, self.copy_mode)


class NodeEnv(Protocol):
    def now(self) -> float: ...
    def send_peer(self, dst: int, data: bytes) -> None: ...
    def send_client(self, client_id: int, data: bytes) -> None: ...
    def call_at(self, t: float, fn: Callable[[], None]) -> None: ...


@dataclass
class NodeStats:
    client_requests: int = 0
    redirects: int = 0
    rejected: int = 0
    replies: int = 0
    read_writes: int = 0  # payload writes of read entries
    loop_cost: float = 0.0
    ticks: int = 0


class Node:
    def __init__(self, cfg: NodeConfig, arena: Arena, env: NodeEnv, *, observer=None,
                 rng: random.Random | None = None, service: Service | None = None,
                 costs: CostModel | None = None):
        self.cfg = cfg
        self.arena = arena
        self.env = env
        self.costs = costs or CostModel()
        self.rng = rng or random.Random(cfg.node_id)
        self.stats = NodeStats()
        # recovery order: undo logs, log/Q reconciliation, scheduler
        self.txm = TxManager(arena, skip_undo_fence=cfg.skip_undo_fence)
        self.tx_report = self.txm.recover()
        self.q = OpQueue(arena, cfg.queue_capacity)
        self.raft = RaftNode(arena, cfg.raft_config(), self.q, send=self._send_peer, now=env.now,
                             rng=self.rng, observer=observer)
        provider = make_provider({"virtual": "virtual", "inline": "plain", "shuffle": "plain",
                                  "threaded": "threading"}[cfg.executor])
        self.service = service or make_service(cfg.service, arena, provider, **cfg.service_args)
        self.sched = Scheduler(arena, self.q, self.txm, pool_size=cfg.executors, serial=cfg.serial,
                               now=env.now, debug_checks=cfg.debug_checks,
                               e_cap=max(2 * cfg.executors, cfg.batch_cap))
        self.sched.register_service(self.service.handle, self.service.commutes,
                                    samples=self.service.sample_requests(random.Random(0), 64),
                                    stateless=getattr(self.service, "stateless", False))
        self.sched.on_response = self._on_response
        self.sched.on_resend = self._on_resend
        self.raft_report = self.raft.recover()
        self.sched_report = self.sched.recover()
        if cfg.executor == "virtual":
            self.executor = VirtualExecutor(self.sched, cfg.executors, cost=self._op_cost,
                                            call_at=env.call_at, on_done=self._on_done)
        elif cfg.executor == "threaded":
            self.executor = ThreadedExecutor(self.sched, cfg.executors)
        elif cfg.executor == "shuffle":
            self.executor = ShuffleExecutor(self.sched, random.Random(self.rng.random()))
        else:
            self.executor = InlineExecutor(self.sched)
        self.inbox: list[tuple] = []
        self.pending_updates: deque = deque()  # (client_id, request_id, payload)
        self.pending_reads: deque = deque()
        self.owners: dict[int, tuple[int, int]] = {}
        self._sent = 0

    # ---------------------------------------------------------------- inbox

    def deliver_peer(self, src: int, data: bytes) -> None:
        self.inbox.append(("peer", src, data))

    def deliver_client(self, data: bytes) -> None:
        self.inbox.append(("client", None, data))

    def _on_done(self, off: int, res: ExecResult) -> None:
        self.inbox.append(("done", off, res))

    @property
    def is_leader(self) -> bool:
        return self.raft.role == Role.LEADER

    # ------------------------------------------------------------- sending

    def _send_peer(self, dst: int, data: bytes) -> None:
        self._sent += 1
        self.env.send_peer(dst, data)

    def _reply(self, cid: int, rid: int, status: int, payload=b"") -> None:
        self._sent += 1
        self.stats.replies += 1
        hint = self.raft.leader_id if self.raft.leader_id is not None else -1
        self.env.send_client(cid, wire.ClientReply(cid, rid, status, hint, payload).encode())

    def _on_response(self, off: int, status: int, payload: bytes) -> None:
        owner = self.owners.pop(off, None)
        if owner is not None:
            self._reply(owner[0], owner[1], status, payload)

    def _on_resend(self, off: int) -> None:
        cid, rid = _IDENT.unpack_from(self.arena.buffer, DATA_START + off + 24)
        owner = self.owners.pop(off, None)
        if owner is not None or cid:
            self._reply(cid, rid, Status.OK)

    def _op_cost(self, key) -> float:
        return self.service.cost(key) if len(key) else 0.1

    # ----------------------------------------------------------------- tick

    def _on_client(self, data: bytes) -> None:
        try:
            msg = wire.decode(data)
        except (wire.WireError, struct.error):
            return
        if isinstance(msg, wire.LeaderQuery):
            self._sent += 1
            leader = self.raft.leader_id if self.raft.leader_id is not None else -1
            self.env.send_client(msg.client_id, wire.LeaderInfo(leader, self.raft.current_term).encode())
            return
        if not isinstance(msg, wire.ClientRequest):
            return
        self.stats.client_requests += 1
        if not self.is_leader:
            self.stats.redirects += 1
            self._reply(msg.client_id, msg.request_id, Status.NOT_LEADER)
            return
        item = (msg.client_id, msg.request_id, msg.payload)
        if msg.kind == EntryKind.READ:
            self.pending_reads.append(item)
        else:
            self.pending_updates.append(item)

    def _redirect_pending(self) -> None:
        for dq in (self.pending_updates, self.pending_reads):
            while dq:
                cid, rid, _ = dq.popleft()
                self.stats.redirects += 1
                self._reply(cid, rid, Status.NOT_LEADER)

    def _flush_updates(self) -> int:
        raft = self.raft
        cap = max(1, self.cfg.batch_cap)
        n = 0
        while self.pending_updates:
            chunk = [self.pending_updates.popleft()
                     for _ in range(min(cap, len(self.pending_updates)))]
            try:
                offs = raft.append_batch([(EntryKind.UPDATE, p, c, r) for c, r, p in chunk])
            except (LogFull, QueueFull):
                for c, r, _ in chunk:
                    self.stats.rejected += 1
                    self._reply(c, r, Status.RETRYABLE)
                continue
            for off, (c, r, _) in zip(offs, chunk):
                self.owners[off] = (c, r)
            raft.replicate(offs)
            n += len(offs)
        return n

    def _flush_reads(self) -> int:
        """Reads skip the RAFT log: allocated REPLICATED, queued behind committed work."""
        if not self.raft.ready or not self.pending_reads:
            return 0
        reads = list(self.pending_reads)
        if self.q.room() < len(reads):
            reads = reads[:self.q.room()]
        arena = self.arena
        handles = arena.palloc_many([ENTRY_HEADER + len(p) for _, _, p in reads], zero=False,
                                    fence=False)
        items = []
        for h, (cid, rid, payload) in zip(handles, reads):
            off = h.offset
            arena.write_at(off, pack_header(OpState.REPLICATED, EntryKind.READ, len(payload),
                                            self.raft.current_term, 0, cid, rid))
            arena.write_at(off + ENTRY_HEADER, payload)
            arena.flush_at(off, ENTRY_HEADER + len(payload))
            self.stats.read_writes += 1
            self.owners[off] = (cid, rid)
            items.append((off, True))
        for _ in reads:
            self.pending_reads.popleft()
        new_end = self.q.stage(items)
        arena.fence()
        self.q.publish(new_end)
        arena.fence()
        return len(items)

    def run_tick(self) -> float:
        """Process everything queued for this node; returns the loop's virtual cost."""
        arena = self.arena
        rs = self.raft.stats
        fences0 = arena.stats.fences
        sent0 = self._sent
        entries0 = rs.payload_writes
        copy0 = rs.copy_bytes
        exec_fences = 0
        items, self.inbox = self.inbox, []
        received = 0
        for kind, src, data in items:
            if kind == "peer":
                received += 1
                try:
                    msg = wire.decode(data)
                except (wire.WireError, struct.error):
                    continue
                self.raft.on_message(src, msg)
            elif kind == "client":
                received += 1
                self._on_client(data)
            else:
                self.sched.finish(src, data)
        if isinstance(self.executor, ThreadedExecutor):
            self.executor.drain()
        self.raft.tick()
        if self.is_leader:
            self._flush_updates()
            self._flush_reads()
        else:
            self._redirect_pending()
        now = self.env.now()
        ex = self.executor
        while True:
            dispatched = self.sched.schedule_tick()
            for off in dispatched:
                if isinstance(ex, VirtualExecutor):
                    exec_fences += ex.submit(off, now).fences
                else:
                    res = ex.submit(off)
                    if res is not None:
                        exec_fences += res.fences
            if isinstance(ex, ShuffleExecutor):
                exec_fences += ex.flush()
            if not dispatched or not isinstance(ex, (InlineExecutor, ShuffleExecutor)):
                break
        self.sched.end_tick()
        self.raft.gc_advance()
        c = self.costs
        cost = (c.recv * received + c.send * (self._sent - sent0)
                + c.fence * max(0, arena.stats.fences - fences0 - exec_fences)
                + c.entry * (rs.payload_writes - entries0)
                + c.copy_byte * (rs.copy_bytes - copy0))
        self.stats.loop_cost += cost
        self.stats.ticks += 1
        return cost

    def next_wake(self) -> float:
        return self.raft.next_timer()

    def has_work(self) -> bool:
        return bool(self.inbox)

    def close(self) -> None:
        if isinstance(self.executor, ThreadedExecutor):
            self.executor.shutdown()
