"""Byte-exact wire messages.

Every message starts with a one-byte tag.  AppendBatch carries its entries in
the same encoding the arena stores them in (see :mod:`blizzard.logrep.entry`),
so encoding a batch only concatenates views taken straight from the arena.

====  =============  =====================================================
tag   message        body
====  =============  =====================================================
1     AppendBatch    term u64, leader u32, prev_index u64, prev_term u64,
                     commit_index u64, count u32, entries...
2     AppendAck      term u64, success u8, hint u64
3     RequestVote    term u64, candidate u32, last_index u64, last_term u64
4     Vote           term u64, granted u8
5     ClientRequest  client_id u64, request_id u64, kind u8, len u32, payload
6     ClientReply    client_id u64, request_id u64, status u8, leader i32,
                     len u32, payload
7     LeaderQuery    client_id u64
8     LeaderInfo     leader i32, term u64
====  =============  =====================================================

A heartbeat is an AppendBatch with no entries.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from enum import IntEnum

from blizzard.logrep.entry import WIRE_CTRL, WIRE_HEADER


class Tag(IntEnum):
    APPEND_BATCH = 1
    APPEND_ACK = 2
    REQUEST_VOTE = 3
    VOTE = 4
    CLIENT_REQUEST = 5
    CLIENT_REPLY = 6
    LEADER_QUERY = 7
    LEADER_INFO = 8


class Status(IntEnum):
    """Client-visible outcome carried in ClientReply."""

    OK = 0
    RETRYABLE = 1  # replication failed or the node lost leadership
    NO_LEADER = 2  # client side: retry budget exhausted
    APP_ERROR = 3
    NOT_LEADER = 4  # redirect; leader_hint names the leader if known


class WireError(ValueError):
    pass


_APPEND = struct.Struct("<BQIQQQI")
_ACK = struct.Struct("<BQBQ")
_RV = struct.Struct("<BQIQQ")
_VOTE = struct.Struct("<BQB")
_CREQ = struct.Struct("<BQQBI")
_CREP = struct.Struct("<BQQBiI")
_LQ = struct.Struct("<BQ")
_LI = struct.Struct("<BiQ")


@dataclass(slots=True)
class AppendBatch:
    term: int
    leader_id: int
    prev_index: int
    prev_term: int
    commit_index: int
    entries: list = field(default_factory=list)  # wire-encoded entry views

    def encode(self) -> bytes:
        head = _APPEND.pack(Tag.APPEND_BATCH, self.term, self.leader_id, self.prev_index,
                            self.prev_term, self.commit_index, len(self.entries))
        if not self.entries:
            return head
        return b"".join([head, *self.entries])


@dataclass(slots=True)
class AppendAck:
    term: int
    success: bool
    hint: int

    def encode(self) -> bytes:
        return _ACK.pack(Tag.APPEND_ACK, self.term, int(self.success), self.hint)


@dataclass(slots=True)
class RequestVote:
    term: int
    candidate: int
    last_index: int
    last_term: int

    def encode(self) -> bytes:
        return _RV.pack(Tag.REQUEST_VOTE, self.term, self.candidate, self.last_index, self.last_term)


@dataclass(slots=True)
class Vote:
    term: int
    granted: bool

    def encode(self) -> bytes:
        return _VOTE.pack(Tag.VOTE, self.term, int(self.granted))


@dataclass(slots=True)
class ClientRequest:
    client_id: int
    request_id: int
    kind: int
    payload: bytes

    def encode(self) -> bytes:
        return _CREQ.pack(Tag.CLIENT_REQUEST, self.client_id, self.request_id, self.kind,
                          len(self.payload)) + bytes(self.payload)


@dataclass(slots=True)
class ClientReply:
    client_id: int
    request_id: int
    status: int
    leader_hint: int
    payload: bytes = b""

    def encode(self) -> bytes:
        return _CREP.pack(Tag.CLIENT_REPLY, self.client_id, self.request_id, self.status,
                          self.leader_hint, len(self.payload)) + bytes(self.payload)


@dataclass(slots=True)
class LeaderQuery:
    client_id: int

    def encode(self) -> bytes:
        return _LQ.pack(Tag.LEADER_QUERY, self.client_id)


@dataclass(slots=True)
class LeaderInfo:
    leader_hint: int
    term: int

    def encode(self) -> bytes:
        return _LI.pack(Tag.LEADER_INFO, self.leader_hint, self.term)


def entry_fields(view) -> tuple[int, int, int, int, int, int]:
    """(kind, payload_len, term, index, client_id, request_id) of a wire entry."""
    kind, _, n, term, index, cid, rid = WIRE_CTRL.unpack_from(view, 0)
    return kind, n, term, index, cid, rid


def encode_entry(kind: int, term: int, index: int, client_id: int, request_id: int,
                 payload: bytes) -> bytes:
    return WIRE_CTRL.pack(kind, 0, len(payload), term, index, client_id, request_id) + bytes(payload)


def decode(data) -> object:
    mv = memoryview(data)
    if not len(mv):
        raise WireError("empty message")
    tag = mv[0]
    try:
        if tag == Tag.APPEND_BATCH:
            _, term, leader, prev_i, prev_t, commit, count = _APPEND.unpack_from(mv, 0)
            pos = _APPEND.size
            entries = []
            for _ in range(count):
                n = struct.unpack_from("<I", mv, pos + 2)[0]
                end = pos + WIRE_HEADER + n
                if end > len(mv):
                    raise WireError("truncated entry")
                entries.append(mv[pos:end])
                pos = end
            if pos != len(mv):
                raise WireError("trailing bytes after AppendBatch")
            return AppendBatch(term, leader, prev_i, prev_t, commit, entries)
        if tag == Tag.APPEND_ACK:
            _, term, ok, hint = _ACK.unpack_from(mv, 0)
            return AppendAck(term, bool(ok), hint)
        if tag == Tag.REQUEST_VOTE:
            _, term, cand, li, lt = _RV.unpack_from(mv, 0)
            return RequestVote(term, cand, li, lt)
        if tag == Tag.VOTE:
            _, term, granted = _VOTE.unpack_from(mv, 0)
            return Vote(term, bool(granted))
        if tag == Tag.CLIENT_REQUEST:
            _, cid, rid, kind, n = _CREQ.unpack_from(mv, 0)
            payload = mv[_CREQ.size:_CREQ.size + n]
            if len(payload) != n:
                raise WireError("truncated request payload")
            return ClientRequest(cid, rid, kind, payload)
        if tag == Tag.CLIENT_REPLY:
            _, cid, rid, status, leader, n = _CREP.unpack_from(mv, 0)
            payload = bytes(mv[_CREP.size:_CREP.size + n])
            if len(payload) != n:
                raise WireError("truncated reply payload")
            return ClientReply(cid, rid, status, leader, payload)
        if tag == Tag.LEADER_QUERY:
            return LeaderQuery(_LQ.unpack_from(mv, 0)[1])
        if tag == Tag.LEADER_INFO:
            _, leader, term = _LI.unpack_from(mv, 0)
            return LeaderInfo(leader, term)
    except struct.error as e:
        raise WireError(str(e)) from e
    raise WireError(f"unknown tag {tag}")
