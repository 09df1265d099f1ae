"""Services: request codec + handler + commutativity predicate per structure.

A handler has the shape ``handle(request, locks, tx) -> response``.  Updates
run inside ``tx``; reads get ``tx=None``.  Locks taken through ``locks`` are
held until the runtime releases them after commit.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field

from blizzard.libds import codec
from blizzard.libds.codec import (
    GraphOp,
    GraphStatus,
    KVOp,
    KVStatus,
    MalformedRequest,
    VoteOp,
    VoteStatus,
)
from blizzard.libds.models import EchoModel, GraphModel, KVModel, MuxModel, VoteModel
from blizzard.libds.padjlist import PAdjList
from blizzard.libds.phashmap import PHashMap
from blizzard.libds.topk import ShardedTopK
from blizzard.pheap import Arena
from blizzard.sched.locks import LockProvider, LockTable

ROOT_KV = 3
ROOT_GRAPH = 4
ROOT_VOTE = 5


class ReadOnlyViolation(RuntimeError):
    pass


def _need_tx(tx):
    if tx is None:
        raise ReadOnlyViolation("update handler called without a transaction")
    return tx


def _claim_root(arena: Arena, index: int, build) -> int:
    root = arena.get_root(index)
    if not root:
        off = build()
        root = arena.handle(off)
        arena.set_root(index, root)
    return root.offset


@dataclass
class CheckReport:
    ok: bool
    violations: list[str] = field(default_factory=list)


def ds_recover_check(service) -> CheckReport:
    """Run a structure's invariant scan; never mutates."""
    v = service.check()
    return CheckReport(not v, v)


class Service:
    name = "base"
    tag = 0
    stateless = False

    def handle(self, req, locks, tx) -> bytes:
        raise NotImplementedError

    def commutes(self, a, b) -> bool:
        raise NotImplementedError

    def is_read(self, req) -> bool:
        return False

    def cost(self, req) -> float:
        return 1.0

    def check(self) -> list[str]:
        return []

    def model(self):
        raise NotImplementedError

    def sample_requests(self, rng: random.Random, n: int) -> list[bytes]:
        raise NotImplementedError


# ------------------------------------------------------------------------ KV

class KVService(Service):
    name = "kv"
    tag = 1

    def __init__(self, arena: Arena, provider: LockProvider | None = None, *,
                 bucket_count: int = 1 << 16):
        self.arena = arena
        off = _claim_root(arena, ROOT_KV, lambda: PHashMap.create(arena, bucket_count).root)
        self.map = PHashMap(arena, off)
        self.locks = LockTable(provider or LockProvider())

    def handle(self, req, locks, tx) -> bytes:
        r = codec.decode_kv(req)
        locks.acquire(self.locks.get(self.map.bucket_of(r.key)))
        if r.op == KVOp.GET:
            v = self.map.get(r.key)
            if v is None:
                return codec.kv_response(KVStatus.NOT_FOUND)
            return codec.kv_response(KVStatus.OK, v)
        if r.op == KVOp.PUT:
            self.map.put(_need_tx(tx), r.key, r.value)
            return codec.kv_response(KVStatus.OK)
        if self.map.delete(_need_tx(tx), r.key):
            return codec.kv_response(KVStatus.OK)
        return codec.kv_response(KVStatus.NOT_FOUND)

    def commutes(self, a, b) -> bool:
        try:
            return codec.kv_key(a) != codec.kv_key(b)
        except MalformedRequest:
            return False

    def is_read(self, req) -> bool:
        return req[0] == KVOp.GET

    def cost(self, req) -> float:
        return 8.0

    def check(self) -> list[str]:
        return self.map.check()

    def state(self) -> dict:
        return dict(self.map.items())

    def model(self) -> KVModel:
        return KVModel()

    def sample_requests(self, rng: random.Random, n: int, keys: int = 6) -> list[bytes]:
        out = []
        for _ in range(n):
            k = b"k%d" % rng.randrange(keys)
            op = rng.choice((KVOp.GET, KVOp.PUT, KVOp.PUT, KVOp.DEL))
            if op == KVOp.PUT:
                out.append(codec.kv_put(k, b"v%d" % rng.randrange(1000) * rng.randint(1, 3)))
            elif op == KVOp.GET:
                out.append(codec.kv_get(k))
            else:
                out.append(codec.kv_del(k))
        return out


# --------------------------------------------------------------------- graph

class GraphService(Service):
    name = "graph"
    tag = 2

    def __init__(self, arena: Arena, provider: LockProvider | None = None, *,
                 bucket_count: int = 1 << 16):
        self.arena = arena
        off = _claim_root(arena, ROOT_GRAPH, lambda: PHashMap.create(arena, bucket_count).root)
        self.g = PAdjList(arena, PHashMap(arena, off))
        self.locks = LockTable(provider or LockProvider())

    def _lock(self, locks, vertices) -> None:
        # vertex locks are striped by index bucket; canonical order avoids deadlock
        for b in sorted({self.g.bucket_of(v) for v in vertices}):
            locks.acquire(self.locks.get(b))

    def handle(self, req, locks, tx) -> bytes:
        r = codec.decode_graph(req)
        self._lock(locks, r.vertices)
        if r.op == GraphOp.OUT_DEGREE:
            return codec.graph_response(GraphStatus.OK, self.g.out_degree(r.u).to_bytes(8, "little"))
        if r.u == r.v:
            return codec.graph_response(GraphStatus.SELF_LOOP)
        if r.op == GraphOp.EDGE_ATTR:
            attr = self.g.edge_attr(r.u, r.v)
            if attr is None:
                return codec.graph_response(GraphStatus.EDGE_MISSING)
            return codec.graph_response(GraphStatus.OK, attr)
        if r.op == GraphOp.ADD_EDGE:
            return codec.graph_response(self.g.add_edge(_need_tx(tx), r.u, r.v, r.attr))
        return codec.graph_response(self.g.del_edge(_need_tx(tx), r.u, r.v))

    def commutes(self, a, b) -> bool:
        try:
            return not set(codec.graph_vertices(a)) & set(codec.graph_vertices(b))
        except MalformedRequest:
            return False

    def is_read(self, req) -> bool:
        return req[0] in (GraphOp.OUT_DEGREE, GraphOp.EDGE_ATTR)

    def cost(self, req) -> float:
        return 10.0 if self.is_read(req) else 12.0

    def check(self) -> list[str]:
        return self.g.check()

    def state(self) -> set:
        return self.g.edges()

    def model(self) -> GraphModel:
        return GraphModel()

    def sample_requests(self, rng: random.Random, n: int, vertices: int = 6) -> list[bytes]:
        out = []
        for _ in range(n):
            u, v = rng.randrange(vertices), rng.randrange(vertices)
            op = rng.choice(list(GraphOp))
            if op == GraphOp.ADD_EDGE:
                out.append(codec.graph_add(u, v, b"w%d" % rng.randrange(100)))
            elif op == GraphOp.DEL_EDGE:
                out.append(codec.graph_del(u, v))
            elif op == GraphOp.OUT_DEGREE:
                out.append(codec.graph_degree(u))
            else:
                out.append(codec.graph_attr(u, v))
        return out


# ---------------------------------------------------------------------- vote

class VoteService(Service):
    name = "vote"
    tag = 3

    def __init__(self, arena: Arena, provider: LockProvider | None = None, *, k: int = 8,
                 shards: int = 4, bucket_count: int = 1 << 12):
        self.arena = arena
        off = _claim_root(arena, ROOT_VOTE,
                          lambda: ShardedTopK.create(arena, k, shards, bucket_count).root)
        self.idx = ShardedTopK(arena, off)
        self.locks = LockTable(provider or LockProvider())

    def handle(self, req, locks, tx) -> bytes:
        r = codec.decode_vote(req)
        if r.op == VoteOp.TOPK:
            return codec.topk_response(self.idx.topk())
        locks.acquire(self.locks.get(self.idx.shard_of(r.article)))
        if r.op == VoteOp.SUBMIT:
            ok = self.idx.submit(_need_tx(tx), r.article, r.title)
            return codec.vote_response(VoteStatus.OK if ok else VoteStatus.EXISTS)
        ok = self.idx.vote(_need_tx(tx), r.article, 1 if r.op == VoteOp.UPVOTE else -1)
        return codec.vote_response(VoteStatus.OK if ok else VoteStatus.UNKNOWN_ARTICLE)

    def commutes(self, a, b) -> bool:
        try:
            ra, rb = codec.decode_vote(a), codec.decode_vote(b)
        except MalformedRequest:
            return False
        if ra.op == VoteOp.TOPK or rb.op == VoteOp.TOPK:
            return ra.op == rb.op
        if VoteOp.SUBMIT in (ra.op, rb.op):
            return ra.article != rb.article
        return True  # vote increments commute, same story or not

    def is_read(self, req) -> bool:
        return req[0] == VoteOp.TOPK

    def cost(self, req) -> float:
        return 6.0 if req[0] == VoteOp.TOPK else 10.0

    def check(self) -> list[str]:
        return self.idx.check()

    def state(self) -> dict:
        return self.idx.all_votes()

    def model(self) -> VoteModel:
        return VoteModel(self.idx.k)

    def sample_requests(self, rng: random.Random, n: int, articles: int = 6) -> list[bytes]:
        out = []
        for _ in range(n):
            a = rng.randrange(articles)
            op = rng.choice((VoteOp.SUBMIT, VoteOp.UPVOTE, VoteOp.UPVOTE, VoteOp.DOWNVOTE, VoteOp.TOPK))
            if op == VoteOp.SUBMIT:
                out.append(codec.vote_submit(a, b"t%d" % a))
            elif op == VoteOp.TOPK:
                out.append(codec.vote_topk())
            elif op == VoteOp.UPVOTE:
                out.append(codec.vote_up(a))
            else:
                out.append(codec.vote_down(a))
        return out


# ---------------------------------------------------------------------- echo

class EchoService(Service):
    """No-op service for replication benchmarks."""

    name = "echo"
    tag = 4
    stateless = True

    def __init__(self, arena: Arena | None = None, provider: LockProvider | None = None):
        self.arena = arena

    def handle(self, req, locks, tx) -> bytes:
        return b""

    def commutes(self, a, b) -> bool:
        return True

    def cost(self, req) -> float:
        return 0.5

    def model(self) -> EchoModel:
        return EchoModel()

    def sample_requests(self, rng: random.Random, n: int) -> list[bytes]:
        return [rng.randbytes(rng.randint(1, 16)) for _ in range(n)]


# ----------------------------------------------------------------------- mux

class MuxService(Service):
    """Several services behind one registration; the first request byte picks one."""

    name = "mux"
    tag = 0

    def __init__(self, services: list[Service]):
        self.services = {s.tag: s for s in services}
        if len(self.services) != len(services):
            raise ValueError("duplicate service tags")

    def _split(self, req):
        try:
            return self.services[req[0]], req[1:]
        except (KeyError, IndexError):
            raise MalformedRequest(f"unknown service tag in {bytes(req[:1])!r}") from None

    def handle(self, req, locks, tx) -> bytes:
        svc, inner = self._split(req)
        return svc.handle(inner, locks, tx)

    def commutes(self, a, b) -> bool:
        if not a or not b:
            return False
        if a[0] != b[0]:
            return a[0] in self.services and b[0] in self.services
        svc = self.services.get(a[0])
        return svc is not None and svc.commutes(a[1:], b[1:])

    def is_read(self, req) -> bool:
        svc, inner = self._split(req)
        return svc.is_read(inner)

    def cost(self, req) -> float:
        svc, inner = self._split(req)
        return svc.cost(inner)

    def check(self) -> list[str]:
        return [f"{s.name}: {p}" for s in self.services.values() for p in s.check()]

    def state(self) -> dict:
        return {t: s.state() for t, s in self.services.items() if hasattr(s, "state")}

    def model(self) -> MuxModel:
        return MuxModel({t: s.model() for t, s in self.services.items()})

    def sample_requests(self, rng: random.Random, n: int) -> list[bytes]:
        tags = sorted(self.services)
        out = []
        for _ in range(n):
            t = rng.choice(tags)
            out.append(codec.mux(t, self.services[t].sample_requests(rng, 1)[0]))
        return out


SERVICES = {"kv": KVService, "graph": GraphService, "vote": VoteService, "echo": EchoService}


def make_service(name: str, arena: Arena, provider: LockProvider | None = None, **kw) -> Service:
    if name == "mixed":
        return MuxService([KVService(arena, provider, **kw), GraphService(arena, provider, **kw),
                           VoteService(arena, provider)])
    try:
        cls = SERVICES[name]
    except KeyError:
        raise ValueError(f"unknown service {name!r}") from None
    return cls(arena, provider, **kw)
