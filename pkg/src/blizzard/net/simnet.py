"""Deterministic discrete-event transport for replicas and clients.

Time is virtual (microseconds).  Every random choice comes from one seeded
``random.Random``, events with equal timestamps run in insertion order, and
nothing reads the wall clock, so a (seed, schedule, workload) triple always
produces the same trace.

A node runs one tick at a time: a tick starting at ``t`` occupies the node
until ``t + cost`` and its outgoing messages leave at that point.  Messages
arriving meanwhile wait in the node's inbox for the next tick.
"""

from __future__ import annotations

import heapq
import random
import zlib
from dataclasses import dataclass, field
from typing import Callable

from blizzard.node import CostModel, Node, NodeConfig
from blizzard.pheap import Arena


@dataclass
class NetConfig:
    latency: float = 20.0  # one-way virtual us
    jitter: float = 5.0
    client_latency: float = 20.0
    drop_rate: float = 0.0
    fifo: bool = True  # per-link ordering, as with a session transport; drops still happen


@dataclass
class FaultEvent:
    time: float
    action: str  # one of ACTIONS; *_leader resolve the leader when the event fires
    nodes: list[int] = field(default_factory=list)
    groups: list[list[int]] = field(default_factory=list)
    rate: float = 0.0
    clients: list[int] = field(default_factory=list)

    ACTIONS = ("kill", "restart", "partition", "isolate", "heal", "drops", "cut_client",
               "heal_client", "kill_leader", "isolate_leader", "restart_all")

    def __post_init__(self):
        if self.action not in self.ACTIONS:
            raise ValueError(f"unknown fault action {self.action!r}")


@dataclass
class _Slot:
    node: Node | None
    env: "_Env"
    inc: int = 0
    busy_until: float = 0.0
    wake: float | None = None
    image: bytes | None = None


class _Env:
    def __init__(self, sim: "SimNet", nid: int, inc: int):
        self.sim = sim
        self.nid = nid
        self.inc = inc
        self.outbox: list[tuple] = []

    def now(self) -> float:
        return self.sim.now_t

    def send_peer(self, dst: int, data: bytes) -> None:
        self.outbox.append((True, dst, data))

    def send_client(self, client_id: int, data: bytes) -> None:
        self.outbox.append((False, client_id, data))

    def call_at(self, t: float, fn: Callable[[], None]) -> None:
        self.sim._push(t, "call", self.nid, self.inc, fn)


class SimNet:
    def __init__(self, node_configs: list[NodeConfig], *, net: NetConfig | None = None,
                 seed: int = 0, arena_capacity: int = 8 << 20, arena_mode: str = "fast",
                 observer=None, costs: CostModel | None = None, trace: bool = True):
        self.net = net or NetConfig()
        self.seed = seed
        self.rng = random.Random(seed)
        self.arena_capacity = arena_capacity
        self.arena_mode = arena_mode
        self.observer = observer
        self.costs = costs or CostModel()
        self.now_t = 0.0
        self._events: list = []
        self._seq = 0
        self.drop_rate = self.net.drop_rate
        self.blocked: set[tuple[int, int]] = set()
        self.cut_clients: set[int] = set()
        self.clients: dict[int, object] = {}
        self.cfgs = {c.node_id: c for c in node_configs}
        self.slots: dict[int, _Slot] = {}
        self.trace: list | None = [] if trace else None
        self.digest = 0
        self.delivered = 0
        self.dropped = 0
        self.kills = 0
        self._link_last: dict[tuple[int, int], float] = {}
        for cfg in node_configs:
            arena = Arena.create(None, arena_capacity, mode=arena_mode)
            self.slots[cfg.node_id] = _Slot(None, _Env(self, cfg.node_id, 0))
            self._boot(cfg.node_id, arena)

    # ------------------------------------------------------------ bookkeeping

    def _push(self, t: float, *ev) -> None:
        self._seq += 1
        heapq.heappush(self._events, (t, self._seq, ev))

    def _record(self, *ev) -> None:
        self.digest = zlib.crc32(repr(ev).encode(), self.digest)
        if self.trace is not None:
            self.trace.append(ev)

    def now(self) -> float:
        return self.now_t

    def call_at(self, t: float, fn: Callable[[], None]) -> None:
        self._push(t, "call", None, 0, fn)

    @property
    def nodes(self) -> dict[int, Node]:
        return {n: s.node for n, s in self.slots.items() if s.node is not None}

    def node(self, nid: int) -> Node | None:
        return self.slots[nid].node

    def leader(self) -> Node | None:
        """The live leader with the highest term, if any."""
        best = None
        for n in self.nodes.values():
            if n.is_leader and (best is None or n.raft.current_term > best.raft.current_term):
                best = n
        return best

    # ------------------------------------------------------------ node life

    def _boot(self, nid: int, arena: Arena) -> None:
        slot = self.slots[nid]
        env = _Env(self, nid, slot.inc)
        rng = random.Random(self.seed * 1_000_003 + nid * 7919 + slot.inc)
        slot.env = env
        slot.node = Node(self.cfgs[nid], arena, env, observer=self.observer, rng=rng,
                         costs=self.costs)
        slot.busy_until = self.now_t
        slot.wake = None
        self._record(self.now_t, "boot", nid, slot.inc)
        self._kick(nid, self.now_t)

    def kill(self, nid: int) -> None:
        slot = self.slots[nid]
        if slot.node is None:
            return
        slot.image = slot.node.arena.crash()
        slot.node = None
        slot.inc += 1
        slot.wake = None
        self.kills += 1
        self._record(self.now_t, "kill", nid)

    def restart(self, nid: int) -> None:
        slot = self.slots[nid]
        if slot.node is not None or slot.image is None:
            return
        arena = Arena.from_image(slot.image, mode=self.arena_mode)
        slot.image = None
        self._boot(nid, arena)

    def partition(self, groups: list[list[int]]) -> None:
        self.blocked.clear()
        where = {n: i for i, g in enumerate(groups) for n in g}
        for a in self.slots:
            for b in self.slots:
                if a != b and where.get(a, -1 - a) != where.get(b, -1 - b):
                    self.blocked.add((a, b))
        self._record(self.now_t, "partition", tuple(tuple(g) for g in groups))

    def isolate(self, nodes: list[int]) -> None:
        for a in nodes:
            for b in self.slots:
                if a != b:
                    self.blocked.add((a, b))
                    self.blocked.add((b, a))
        self._record(self.now_t, "isolate", tuple(nodes))

    def heal(self) -> None:
        self.blocked.clear()
        self._record(self.now_t, "heal")

    def apply_fault(self, ev: FaultEvent) -> None:
        if ev.action == "kill":
            for n in ev.nodes:
                self.kill(n)
        elif ev.action == "restart":
            for n in ev.nodes:
                self.restart(n)
        elif ev.action == "partition":
            self.partition(ev.groups)
        elif ev.action == "isolate":
            self.isolate(ev.nodes)
        elif ev.action == "heal":
            self.heal()
        elif ev.action == "drops":
            self.drop_rate = ev.rate
            self._record(self.now_t, "drops", ev.rate)
        elif ev.action == "kill_leader":
            n = self.leader()
            if n is not None:
                self.kill(n.cfg.node_id)
        elif ev.action == "isolate_leader":
            n = self.leader()
            if n is not None:
                self.isolate([n.cfg.node_id])
        elif ev.action == "restart_all":
            for nid in sorted(self.slots):
                self.restart(nid)
        elif ev.action == "cut_client":
            self.cut_clients.update(ev.clients)
        elif ev.action == "heal_client":
            self.cut_clients.difference_update(ev.clients or list(self.cut_clients))

    def schedule(self, faults: list[FaultEvent]) -> None:
        for ev in faults:
            self._push(ev.time, "fault", None, 0, ev)

    # -------------------------------------------------------------- messaging

    def _kick(self, nid: int, t: float) -> None:
        slot = self.slots[nid]
        if slot.node is None:
            return
        t = max(t, slot.busy_until)
        if slot.wake is None or t < slot.wake:
            slot.wake = t
            self._push(t, "wake", nid, slot.inc, None)

    def _lost(self) -> bool:
        return self.drop_rate > 0 and self.rng.random() < self.drop_rate

    def _delay(self, base: float) -> float:
        return base + (self.rng.random() * self.net.jitter if self.net.jitter else 0.0)

    def _arrival(self, src: int, dst: int, t: float) -> float:
        if self.net.fifo:
            t = max(t, self._link_last.get((src, dst), 0.0))
            self._link_last[(src, dst)] = t
        return t

    def register_client(self, client_id: int, endpoint) -> None:
        """``endpoint.on_message(src_node, data)`` receives replies."""
        self.clients[client_id] = endpoint

    def client_send(self, client_id: int, dst: int, data: bytes) -> None:
        if client_id in self.cut_clients or self._lost():
            self.dropped += 1
            return
        t = self._arrival(-1 - client_id, dst, self.now_t + self._delay(self.net.client_latency))
        self._push(t, "to_node", dst, -1 - client_id, data)

    def _flush_outbox(self, nid: int, t: float) -> None:
        env = self.slots[nid].env
        out, env.outbox = env.outbox, []
        for to_peer, dst, data in out:
            if to_peer:
                if (nid, dst) in self.blocked or self._lost():
                    self.dropped += 1
                    continue
                self._push(self._arrival(nid, dst, t + self._delay(self.net.latency)), "to_node",
                           dst, nid, data)
            else:
                if dst in self.cut_clients or self._lost():
                    self.dropped += 1
                    continue
                self._push(self._arrival(nid, -1 - dst, t + self._delay(self.net.client_latency)),
                           "to_client", dst, nid, data)

    # ------------------------------------------------------------------- loop

    def step(self) -> bool:
        if not self._events:
            return False
        t, _, ev = heapq.heappop(self._events)
        self.now_t = t
        kind = ev[0]
        if kind == "wake":
            _, nid, inc, _ = ev
            slot = self.slots[nid]
            if slot.node is None or slot.inc != inc or slot.wake != t:
                return True
            slot.wake = None
            node = slot.node
            cost = node.run_tick()
            slot.busy_until = t + cost
            self._flush_outbox(nid, slot.busy_until)
            if node.has_work():
                self._kick(nid, slot.busy_until)
            else:
                self._kick(nid, max(slot.busy_until, node.next_wake()))
        elif kind == "to_node":
            _, dst, src, data = ev
            slot = self.slots.get(dst)
            if slot is None or slot.node is None or (src >= 0 and (src, dst) in self.blocked):
                self.dropped += 1
                return True
            if src < 0 and (-1 - src) in self.cut_clients:
                self.dropped += 1
                return True
            self.delivered += 1
            self._record(t, "msg", src, dst, zlib.crc32(data))
            if src >= 0:
                slot.node.deliver_peer(src, data)
            else:
                slot.node.deliver_client(data)
            self._kick(dst, t)
        elif kind == "to_client":
            _, cid, src, data = ev
            ep = self.clients.get(cid)
            if ep is None or cid in self.cut_clients:
                return True
            self.delivered += 1
            self._record(t, "reply", src, cid, zlib.crc32(data))
            ep.on_message(src, data)
        elif kind == "call":
            _, nid, inc, fn = ev
            if nid is not None:
                slot = self.slots[nid]
                if slot.node is None or slot.inc != inc:
                    return True
                fn()
                self._kick(nid, t)
            else:
                fn()
        elif kind == "fault":
            self.apply_fault(ev[3])
        return True

    def run_until(self, t_end: float | None = None, pred: Callable[[], bool] | None = None,
                  max_events: int = 50_000_000) -> bool:
        """Run events up to ``t_end`` or until ``pred()`` holds; returns pred's final value."""
        for _ in range(max_events):
            if pred is not None and pred():
                return True
            if not self._events:
                break
            if t_end is not None and self._events[0][0] > t_end:
                self.now_t = max(self.now_t, t_end)
                break
            self.step()
        return pred() if pred is not None else False

    def run_for(self, duration: float) -> None:
        self.run_until(self.now_t + duration)

    def wait_leader(self, timeout: float = 1e6) -> Node | None:
        self.run_until(self.now_t + timeout, lambda: self._ready_leader() is not None)
        return self._ready_leader()

    def _ready_leader(self) -> Node | None:
        n = self.leader()
        return n if n is not None and n.raft.ready else None
