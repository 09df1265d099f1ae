"""Crash-point fuzzing of a single replica over a strict (line-granular) arena.

A run feeds a short op sequence to a one-node cluster, one op per tick, and
stops the arena after exactly ``k`` cache-line persists.  The surviving image
is rebooted, recovery runs, Q drains, and the result is checked:

* allocator and data-structure invariants hold;
* the state equals the reference model applied to the committed log;
* committed updates are a prefix of the submitted ones and acked ones survived;
* a persistent counter bumped inside every update transaction equals the
  number of committed updates (each handler's effects landed exactly once),
  and the recovering node ran exactly the handlers that had not landed yet.

Exhaustive mode tries every ``k`` from 0 to the run's total persist count
under both line persist orders; seeded mode draws random ops, a random crash
point and optionally a second crash during recovery.
"""

from __future__ import annotations

import random
import struct
from dataclasses import dataclass, field

from blizzard.checkers import SafetyChecker
from blizzard.libds import codec
from blizzard.libds.models import make_model
from blizzard.libds.services import Service, make_service
from blizzard.logrep import wire
from blizzard.logrep.entry import EntryKind, OpState
from blizzard.node import Node, NodeConfig
from blizzard.pheap import Arena, SimulatedCrash
from blizzard.sched.locks import make_provider

ROOT_FUZZ = 8
_U64 = struct.Struct("<Q")
CLIENT = 1

SERVICE_ARGS = {
    "kv": {"bucket_count": 8},
    "graph": {"bucket_count": 8},
    "vote": {"k": 2, "shards": 2, "bucket_count": 8},
}


class CountingService(Service):
    """Wraps a service; every update transaction also bumps a persistent counter."""

    def __init__(self, inner: Service, arena: Arena):
        self.inner = inner
        self.arena = arena
        self.name = inner.name
        self.tag = inner.tag
        root = arena.get_root(ROOT_FUZZ)
        if not root:
            root = arena.palloc(8, zero=True)
            arena.set_root(ROOT_FUZZ, root)
        self.off = root.offset

    @property
    def count(self) -> int:
        return _U64.unpack_from(self.arena.view_at(self.off, 8))[0]

    def handle(self, req, locks, tx) -> bytes:
        resp = self.inner.handle(req, locks, tx)
        if tx is not None:
            tx.write_at(self.off, _U64.pack(self.count + 1))
        return resp

    def commutes(self, a, b) -> bool:
        return False  # the counter makes every pair of updates conflict

    def is_read(self, req) -> bool:
        return self.inner.is_read(req)

    def cost(self, req) -> float:
        return self.inner.cost(req)

    def check(self) -> list[str]:
        return self.inner.check()

    def state(self):
        return self.inner.state()

    def sample_requests(self, rng, n):
        return self.inner.sample_requests(rng, n)


def fuzz_ops(service: str, rng: random.Random, n: int) -> list[tuple[int, bytes]]:
    """A short (kind, request) sequence over a tiny key space so ops collide."""
    out: list[tuple[int, bytes]] = []
    U, R = EntryKind.UPDATE, EntryKind.READ
    for i in range(n):
        r = rng.random()
        if service == "kv":
            k = b"k%d" % rng.randrange(3)
            if r < 0.6:
                out.append((U, codec.kv_put(k, rng.randbytes(rng.randint(1, 40)))))
            elif r < 0.8:
                out.append((U, codec.kv_del(k)))
            else:
                out.append((R, codec.kv_get(k)))
        elif service == "graph":
            u, v = rng.randrange(4), rng.randrange(4)
            if r < 0.55:
                out.append((U, codec.graph_add(u, v, rng.randbytes(rng.randint(0, 24)))))
            elif r < 0.8:
                out.append((U, codec.graph_del(u, v)))
            else:
                out.append((R, codec.graph_degree(u)))
        elif service == "vote":
            a = rng.randrange(4)
            if i == 0 or r < 0.25:
                out.append((U, codec.vote_submit(a, b"t%d" % a)))
            elif r < 0.65:
                out.append((U, codec.vote_up(a)))
            elif r < 0.85:
                out.append((U, codec.vote_down(a)))
            else:
                out.append((R, codec.vote_topk()))
        else:
            raise ValueError(f"crash fuzzing does not cover {service!r}")
    return out


class _LocalEnv:
    """Clock that jumps far ahead every tick, so the lone node elects itself at once."""

    def __init__(self):
        self.t = 0.0
        self.replies: list = []

    def now(self) -> float:
        return self.t

    def send_peer(self, dst: int, data: bytes) -> None:
        raise AssertionError("single-node cluster sent a peer message")

    def send_client(self, client_id: int, data: bytes) -> None:
        self.replies.append(wire.decode(data))

    def call_at(self, t, fn) -> None:
        raise AssertionError("inline executor scheduled a callback")


@dataclass
class FuzzConfig:
    service: str = "kv"
    ops: int = 5
    persist_orders: tuple[str, ...] = ("flush", "reverse")
    capacity: int = 1 << 20
    skip_undo_fence: bool = False


@dataclass
class Trial:
    crash_point: int | None
    order: str
    crashed: bool
    committed_updates: int
    handler_calls: int
    problems: list[str] = field(default_factory=list)


@dataclass
class FuzzReport:
    service: str
    trials: list[Trial] = field(default_factory=list)

    @property
    def failures(self) -> list[Trial]:
        return [t for t in self.trials if t.problems]

    @property
    def ok(self) -> bool:
        return not self.failures

    def summary(self) -> str:
        bad = self.failures
        crashed = sum(t.crashed for t in self.trials)
        line = f"{self.service}: {len(self.trials)} trials, {crashed} crashed, {len(bad)} failed"
        if bad:
            line += f"; first: k={bad[0].crash_point} {bad[0].order}: {bad[0].problems[0]}"
        return line


class _Harness:
    def __init__(self, cfg: FuzzConfig):
        self.cfg = cfg
        self.args = SERVICE_ARGS[cfg.service]
        self.node_cfg = NodeConfig(0, [0], cfg.service, dict(self.args), executors=1,
                                   executor="inline", log_capacity=256, queue_capacity=256,
                                   gc_retain=0, skip_undo_fence=cfg.skip_undo_fence)

    def boot(self, arena: Arena, checker: SafetyChecker) -> tuple[Node, _LocalEnv]:
        env = _LocalEnv()
        inner = make_service(self.cfg.service, arena, make_provider("plain"), **self.args)
        svc = CountingService(inner, arena)
        node = Node(self.node_cfg, arena, env, observer=checker, rng=random.Random(0), service=svc)
        checker.lookup = lambda nid: node.raft
        return node, env

    @staticmethod
    def tick(node: Node, env: _LocalEnv) -> None:
        env.t += 1e6
        node.run_tick()

    def base_image(self) -> bytes:
        arena = Arena.create(None, self.cfg.capacity, mode="strict")
        node, env = self.boot(arena, SafetyChecker())
        self.tick(node, env)
        self.tick(node, env)
        if not node.raft.ready:
            raise RuntimeError("single node failed to become a ready leader")
        arena.lines.persist_all()
        return arena.durable_image()

    def drain(self, node: Node, env: _LocalEnv, limit: int = 50) -> bool:
        for _ in range(limit):
            self.tick(node, env)
            if node.is_leader and node.raft.ready and node.q.head == node.q.end:
                return True
        return False


def _feed(harness: _Harness, node: Node, env: _LocalEnv, ops, rid0: int = 1) -> None:
    harness.tick(node, env)  # re-election after the reboot
    for i, (kind, req) in enumerate(ops):
        node.deliver_client(wire.ClientRequest(CLIENT, rid0 + i, kind, req).encode())
        harness.tick(node, env)
    harness.drain(node, env)


def count_persists(cfg: FuzzConfig, ops, base: bytes | None = None) -> int:
    """Line persists of a crash-free run, i.e. the number of distinct crash points."""
    h = _Harness(cfg)
    base = base if base is not None else h.base_image()
    arena = Arena.from_image(base, mode="strict")
    node, env = h.boot(arena, SafetyChecker())
    start = arena.lines.persisted
    _feed(h, node, env, ops)
    return arena.lines.persisted - start


def run_trial(cfg: FuzzConfig, ops, base: bytes, crash_point: int | None, order: str, *,
              second_crash: int | None = None) -> Trial:
    h = _Harness(cfg)
    checker = SafetyChecker()
    payloads = {(CLIENT, 1 + i): req for i, (kind, req) in enumerate(ops)
                if kind == EntryKind.UPDATE}
    arena = Arena.from_image(base, mode="strict", persist_order=order)
    node, env = h.boot(arena, checker)
    arena.set_persist_budget(crash_point)
    crashed = False
    try:
        _feed(h, node, env, ops)
    except SimulatedCrash:
        crashed = True
    replies = list(env.replies)
    image = arena.crash()
    problems: list[str] = []

    if second_crash is not None:
        arena = Arena.from_image(image, mode="strict", persist_order=order)
        arena.set_persist_budget(second_crash)
        try:
            node, env = h.boot(arena, checker)
            h.drain(node, env)
        except SimulatedCrash:
            pass
        image = arena.crash()

    arena = Arena.from_image(image, mode="strict", persist_order=order)
    try:
        node, env = h.boot(arena, checker)
    except Exception as e:  # noqa: BLE001 - a corrupt image is a finding
        return Trial(crash_point, order, crashed, 0, 0, [f"recovery failed: {e!r}"])
    landed = node.service.count
    calls0 = node.sched.stats.handler_calls
    if not h.drain(node, env):
        problems.append("queue did not drain after recovery")
    calls = node.sched.stats.handler_calls - calls0

    problems += [f"allocator: {v}" for v in arena.check_allocator()]
    problems += [f"structure: {v}" for v in node.service.check()]
    problems += [str(v) for v in checker.violations]

    committed = [checker.committed[i][1] for i in sorted(checker.committed)]
    updates = [(cid, rid) for kind, cid, rid in committed if kind == EntryKind.UPDATE]
    want_prefix = sorted(payloads)[:len(updates)]
    if updates != want_prefix:
        problems.append(f"committed updates {updates} are not a prefix of {sorted(payloads)}")
    acked = {(r.client_id, r.request_id) for r in replies
             if isinstance(r, wire.ClientReply) and r.status == wire.Status.OK}
    lost = {a for a in acked if a in payloads} - set(updates)
    if lost:
        problems.append(f"acked updates lost: {sorted(lost)}")

    model = make_model(cfg.service, **h.args)
    expected_resp = {}
    for key in updates:
        if key in payloads:
            expected_resp[key] = model.apply(payloads[key])
    if node.service.state() != model.state():
        problems.append("state differs from the committed-log replay")
    for r in replies:
        key = (r.client_id, r.request_id) if isinstance(r, wire.ClientReply) else None
        if (key in expected_resp and r.status == wire.Status.OK and len(r.payload)
                and bytes(r.payload) != bytes(expected_resp[key])):
            problems.append(f"response to {key} differs from the serial replay")

    final = node.service.count
    if final != len(updates):
        problems.append(f"update effects landed {final} times for {len(updates)} committed")
    if landed + calls != len(updates):
        problems.append(f"{landed} landed before the crash + {calls} handler calls after "
                        f"!= {len(updates)} committed")
    for pos in node.q.positions():
        off, _ = node.q.slot(pos)
        state = arena.view_at(off, 1)[0]
        if state not in (OpState.COMPLETED, OpState.FAILED):
            problems.append(f"Q entry at {off} left in state {state}")
    arena.close()
    return Trial(crash_point, order, crashed, len(updates), calls, problems)


def exhaustive(cfg: FuzzConfig, ops=None, *, seed: int = 0) -> FuzzReport:
    """Every crash point of one op sequence under every persist order."""
    ops = ops if ops is not None else fuzz_ops(cfg.service, random.Random(seed), cfg.ops)
    base = _Harness(cfg).base_image()
    total = count_persists(cfg, ops, base)
    report = FuzzReport(cfg.service)
    for order in cfg.persist_orders:
        for k in range(total + 1):
            report.trials.append(run_trial(cfg, ops, base, k, order))
    return report


def seeded(cfg: FuzzConfig, seeds: range, *, double_crash: bool = True) -> FuzzReport:
    """Random ops and a random crash point (and maybe a crash during recovery) per seed."""
    base = _Harness(cfg).base_image()
    report = FuzzReport(cfg.service)
    for seed in seeds:
        rng = random.Random(seed)
        ops = fuzz_ops(cfg.service, rng, rng.randint(1, max(1, cfg.ops * 2)))
        total = count_persists(cfg, ops, base)
        k = rng.randint(0, total)
        order = rng.choice(cfg.persist_orders)
        second = rng.randint(0, 60) if double_crash and rng.random() < 0.5 else None
        t = run_trial(cfg, ops, base, k, order, second_crash=second)
        report.trials.append(t)
    return report
