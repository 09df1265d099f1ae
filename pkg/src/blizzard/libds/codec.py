"""Length-prefixed binary request/response codecs (little endian).

KV request::

    op u8 (GET=1, PUT=2, DEL=3) | klen u16 | key | [PUT: vlen u32 | value]

KV response: ``status u8`` (OK=0, NOT_FOUND=1) then the value for a hit.

Graph request::

    op u8 (ADD_EDGE=1, DEL_EDGE=2, OUT_DEGREE=3, EDGE_ATTR=4) | u u64
    [ADD_EDGE, DEL_EDGE, EDGE_ATTR: v u64] [ADD_EDGE: alen u16 | attr]

Graph response: ``status u8`` (OK=0, EDGE_EXISTS=1, EDGE_MISSING=2,
SELF_LOOP=3) then ``degree u64`` for OUT_DEGREE or the attr bytes for
EDGE_ATTR.

Vote request::

    op u8 (SUBMIT=1, UPVOTE=2, DOWNVOTE=3, TOPK=4) | [id u64]
    [SUBMIT: tlen u16 | title]

Vote response: ``status u8`` (OK=0, UNKNOWN_ARTICLE=1, EXISTS=2); TOPK adds
``n u32`` then ``n x (id u64, votes i64)`` sorted by votes descending, id
ascending.

A mux request is ``service tag u8`` followed by the inner request.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import IntEnum


class MalformedRequest(ValueError):
    pass


class KVOp(IntEnum):
    GET = 1
    PUT = 2
    DEL = 3


class GraphOp(IntEnum):
    ADD_EDGE = 1
    DEL_EDGE = 2
    OUT_DEGREE = 3
    EDGE_ATTR = 4


class VoteOp(IntEnum):
    SUBMIT = 1
    UPVOTE = 2
    DOWNVOTE = 3
    TOPK = 4


class KVStatus(IntEnum):
    OK = 0
    NOT_FOUND = 1


class GraphStatus(IntEnum):
    OK = 0
    EDGE_EXISTS = 1
    EDGE_MISSING = 2
    SELF_LOOP = 3


class VoteStatus(IntEnum):
    OK = 0
    UNKNOWN_ARTICLE = 1
    EXISTS = 2


_H = struct.Struct("<BH")
_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")
_BQ = struct.Struct("<BQ")
_BQQ = struct.Struct("<BQQ")
_PAIR = struct.Struct("<Qq")


# ------------------------------------------------------------------------ KV

@dataclass(frozen=True, slots=True)
class KVRequest:
    op: KVOp
    key: bytes
    value: bytes = b""

    def encode(self) -> bytes:
        out = _H.pack(self.op, len(self.key)) + self.key
        if self.op == KVOp.PUT:
            out += _U32.pack(len(self.value)) + self.value
        return out


def kv_get(key: bytes) -> bytes:
    return KVRequest(KVOp.GET, key).encode()


def kv_put(key: bytes, value: bytes) -> bytes:
    return KVRequest(KVOp.PUT, key, value).encode()


def kv_del(key: bytes) -> bytes:
    return KVRequest(KVOp.DEL, key).encode()


def kv_key(data) -> bytes:
    """Key bytes without decoding the whole request (predicate fast path)."""
    if len(data) < 3:
        raise MalformedRequest("short KV request")
    n = data[1] | (data[2] << 8)
    return bytes(data[3:3 + n])


def decode_kv(data) -> KVRequest:
    try:
        op, klen = _H.unpack_from(data, 0)
        op = KVOp(op)
    except (struct.error, ValueError) as e:
        raise MalformedRequest(str(e)) from e
    pos = 3 + klen
    key = bytes(data[3:pos])
    if len(key) != klen:
        raise MalformedRequest("truncated key")
    value = b""
    if op == KVOp.PUT:
        try:
            (vlen,) = _U32.unpack_from(data, pos)
        except struct.error as e:
            raise MalformedRequest(str(e)) from e
        value = bytes(data[pos + 4:pos + 4 + vlen])
        if len(value) != vlen:
            raise MalformedRequest("truncated value")
        pos += 4 + vlen
    if pos != len(data):
        raise MalformedRequest("trailing bytes in KV request")
    return KVRequest(op, key, value)


def kv_response(status: KVStatus, value: bytes = b"") -> bytes:
    return bytes((status,)) + value


def decode_kv_response(data) -> tuple[KVStatus, bytes]:
    return KVStatus(data[0]), bytes(data[1:])


# --------------------------------------------------------------------- graph

@dataclass(frozen=True, slots=True)
class GraphRequest:
    op: GraphOp
    u: int
    v: int = 0
    attr: bytes = b""

    def encode(self) -> bytes:
        if self.op == GraphOp.OUT_DEGREE:
            return _BQ.pack(self.op, self.u)
        out = _BQQ.pack(self.op, self.u, self.v)
        if self.op == GraphOp.ADD_EDGE:
            out += struct.pack("<H", len(self.attr)) + self.attr
        return out

    @property
    def vertices(self) -> frozenset[int]:
        if self.op == GraphOp.OUT_DEGREE:
            return frozenset((self.u,))
        return frozenset((self.u, self.v))


def graph_add(u: int, v: int, attr: bytes = b"") -> bytes:
    return GraphRequest(GraphOp.ADD_EDGE, u, v, attr).encode()


def graph_del(u: int, v: int) -> bytes:
    return GraphRequest(GraphOp.DEL_EDGE, u, v).encode()


def graph_degree(v: int) -> bytes:
    return GraphRequest(GraphOp.OUT_DEGREE, v).encode()


def graph_attr(u: int, v: int) -> bytes:
    return GraphRequest(GraphOp.EDGE_ATTR, u, v).encode()


def graph_vertices(data) -> tuple[int, ...]:
    if len(data) < 9:
        raise MalformedRequest("short graph request")
    u = _U64.unpack_from(data, 1)[0]
    if data[0] == GraphOp.OUT_DEGREE:
        return (u,)
    if len(data) < 17:
        raise MalformedRequest("short graph request")
    return (u, _U64.unpack_from(data, 9)[0])


def decode_graph(data) -> GraphRequest:
    try:
        op = GraphOp(data[0])
        if op == GraphOp.OUT_DEGREE:
            _, u = _BQ.unpack_from(data, 0)
            end = _BQ.size
            req = GraphRequest(op, u)
        else:
            _, u, v = _BQQ.unpack_from(data, 0)
            end = _BQQ.size
            attr = b""
            if op == GraphOp.ADD_EDGE:
                (alen,) = struct.unpack_from("<H", data, end)
                attr = bytes(data[end + 2:end + 2 + alen])
                if len(attr) != alen:
                    raise MalformedRequest("truncated attr")
                end += 2 + alen
            req = GraphRequest(op, u, v, attr)
    except (struct.error, ValueError, IndexError) as e:
        if isinstance(e, MalformedRequest):
            raise
        raise MalformedRequest(str(e)) from e
    if end != len(data):
        raise MalformedRequest("trailing bytes in graph request")
    return req


def graph_response(status: GraphStatus, body: bytes = b"") -> bytes:
    return bytes((status,)) + body


# ---------------------------------------------------------------------- vote

@dataclass(frozen=True, slots=True)
class VoteRequest:
    op: VoteOp
    article: int = 0
    title: bytes = b""

    def encode(self) -> bytes:
        if self.op == VoteOp.TOPK:
            return bytes((self.op,))
        out = _BQ.pack(self.op, self.article)
        if self.op == VoteOp.SUBMIT:
            out += struct.pack("<H", len(self.title)) + self.title
        return out


def vote_submit(article: int, title: bytes = b"") -> bytes:
    return VoteRequest(VoteOp.SUBMIT, article, title).encode()


def vote_up(article: int) -> bytes:
    return VoteRequest(VoteOp.UPVOTE, article).encode()


def vote_down(article: int) -> bytes:
    return VoteRequest(VoteOp.DOWNVOTE, article).encode()


def vote_topk() -> bytes:
    return VoteRequest(VoteOp.TOPK).encode()


def decode_vote(data) -> VoteRequest:
    try:
        op = VoteOp(data[0])
        if op == VoteOp.TOPK:
            end = 1
            req = VoteRequest(op)
        else:
            _, art = _BQ.unpack_from(data, 0)
            end = _BQ.size
            title = b""
            if op == VoteOp.SUBMIT:
                (tlen,) = struct.unpack_from("<H", data, end)
                title = bytes(data[end + 2:end + 2 + tlen])
                if len(title) != tlen:
                    raise MalformedRequest("truncated title")
                end += 2 + tlen
            req = VoteRequest(op, art, title)
    except (struct.error, ValueError, IndexError) as e:
        if isinstance(e, MalformedRequest):
            raise
        raise MalformedRequest(str(e)) from e
    if end != len(data):
        raise MalformedRequest("trailing bytes in vote request")
    return req


def vote_response(status: VoteStatus) -> bytes:
    return bytes((status,))


def topk_response(pairs: list[tuple[int, int]]) -> bytes:
    return bytes((VoteStatus.OK,)) + _U32.pack(len(pairs)) + b"".join(_PAIR.pack(i, c) for i, c in pairs)


def decode_topk(data) -> list[tuple[int, int]]:
    if data[0] != VoteStatus.OK:
        raise MalformedRequest(f"TOPK status {data[0]}")
    (n,) = _U32.unpack_from(data, 1)
    return [_PAIR.unpack_from(data, 5 + 16 * i) for i in range(n)]


# ----------------------------------------------------------------------- mux

def mux(tag: int, inner: bytes) -> bytes:
    return bytes((tag,)) + inner
