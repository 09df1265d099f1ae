"""Plain in-memory reference models: same request/response bytes as the services."""

from __future__ import annotations

import copy

from blizzard.libds import codec
from blizzard.libds.codec import GraphOp, GraphStatus, KVOp, KVStatus, VoteOp, VoteStatus


class KVModel:
    def __init__(self):
        self.data: dict[bytes, bytes] = {}

    def apply(self, req) -> bytes:
        r = codec.decode_kv(req)
        if r.op == KVOp.GET:
            v = self.data.get(r.key)
            return codec.kv_response(KVStatus.OK, v) if v is not None else codec.kv_response(KVStatus.NOT_FOUND)
        if r.op == KVOp.PUT:
            self.data[r.key] = r.value
            return codec.kv_response(KVStatus.OK)
        if self.data.pop(r.key, None) is None:
            return codec.kv_response(KVStatus.NOT_FOUND)
        return codec.kv_response(KVStatus.OK)

    def state(self):
        return dict(self.data)

    def copy(self) -> "KVModel":
        m = KVModel()
        m.data = dict(self.data)
        return m


class GraphModel:
    def __init__(self):
        self.adj: dict[int, dict[int, bytes]] = {}

    def apply(self, req) -> bytes:
        r = codec.decode_graph(req)
        if r.op == GraphOp.OUT_DEGREE:
            return codec.graph_response(GraphStatus.OK, len(self.adj.get(r.u, {})).to_bytes(8, "little"))
        if r.u == r.v:
            return codec.graph_response(GraphStatus.SELF_LOOP)
        if r.op == GraphOp.EDGE_ATTR:
            attr = self.adj.get(r.u, {}).get(r.v)
            if attr is None:
                return codec.graph_response(GraphStatus.EDGE_MISSING)
            return codec.graph_response(GraphStatus.OK, attr)
        if r.op == GraphOp.ADD_EDGE:
            if r.v in self.adj.get(r.u, {}):
                return codec.graph_response(GraphStatus.EDGE_EXISTS)
            self.adj.setdefault(r.u, {})[r.v] = r.attr
            self.adj.setdefault(r.v, {})[r.u] = r.attr
            return codec.graph_response(GraphStatus.OK)
        if r.v not in self.adj.get(r.u, {}):
            return codec.graph_response(GraphStatus.EDGE_MISSING)
        del self.adj[r.u][r.v]
        del self.adj[r.v][r.u]
        return codec.graph_response(GraphStatus.OK)

    def state(self):
        return {(u, v, a) for u, nb in self.adj.items() for v, a in nb.items() if u < v}

    def copy(self) -> "GraphModel":
        m = GraphModel()
        m.adj = {u: dict(nb) for u, nb in self.adj.items()}
        return m


class VoteModel:
    def __init__(self, k: int = 8):
        self.k = k
        self.votes: dict[int, int] = {}

    def apply(self, req) -> bytes:
        r = codec.decode_vote(req)
        if r.op == VoteOp.TOPK:
            return codec.topk_response(self.topk())
        if r.op == VoteOp.SUBMIT:
            if r.article in self.votes:
                return codec.vote_response(VoteStatus.EXISTS)
            self.votes[r.article] = 0
            return codec.vote_response(VoteStatus.OK)
        if r.article not in self.votes:
            return codec.vote_response(VoteStatus.UNKNOWN_ARTICLE)
        self.votes[r.article] += 1 if r.op == VoteOp.UPVOTE else -1
        return codec.vote_response(VoteStatus.OK)

    def topk(self) -> list[tuple[int, int]]:
        return sorted(self.votes.items(), key=lambda p: (-p[1], p[0]))[:self.k]

    def state(self):
        return dict(self.votes)

    def copy(self) -> "VoteModel":
        m = VoteModel(self.k)
        m.votes = dict(self.votes)
        return m


class EchoModel:
    def apply(self, req) -> bytes:
        return b""

    def state(self):
        return None

    def copy(self) -> "EchoModel":
        return self


class MuxModel:
    def __init__(self, models: dict[int, object]):
        self.models = models

    def apply(self, req) -> bytes:
        return self.models[req[0]].apply(req[1:])

    def state(self):
        return {t: m.state() for t, m in self.models.items()}

    def copy(self) -> "MuxModel":
        return MuxModel({t: m.copy() for t, m in self.models.items()})


def clone(model):
    return model.copy() if hasattr(model, "copy") else copy.deepcopy(model)


def make_model(name: str, *, k: int = 8, **_ignored):
    """Reference model for a service name (sizing arguments are irrelevant)."""
    if name == "kv":
        return KVModel()
    if name == "graph":
        return GraphModel()
    if name == "vote":
        return VoteModel(k)
    if name == "echo":
        return EchoModel()
    if name == "mixed":
        return MuxModel({1: KVModel(), 2: GraphModel(), 3: VoteModel(k)})
    raise ValueError(f"unknown service {name!r}")
