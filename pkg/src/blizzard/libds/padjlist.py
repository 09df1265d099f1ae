"""Persistent undirected adjacency list.

The vertex index is a :class:`PHashMap` from vertex id (u64, little endian)
to the head of that vertex's neighbour list.  Neighbour node::

    0   next  u64
    8   nbr   u64
    16  alen  u32
    20  pad   u32
    24  attr

An edge lives in both endpoint lists with the same attr; both inserts (or
both unlinks) happen in one transaction.
"""

from __future__ import annotations

import struct

from blizzard.libds.codec import GraphStatus
from blizzard.libds.phashmap import PHashMap
from blizzard.pheap import DATA_START, Arena

NBR_HEADER = 24
_NBR = struct.Struct("<QQII")
_U64 = struct.Struct("<Q")


def vkey(v: int) -> bytes:
    return _U64.pack(v)


class PAdjList:
    def __init__(self, arena: Arena, index: PHashMap):
        self.arena = arena
        self.index = index

    @classmethod
    def create(cls, arena: Arena, bucket_count: int = 1 << 16) -> "PAdjList":
        return cls(arena, PHashMap.create(arena, bucket_count))

    @property
    def root(self) -> int:
        return self.index.root

    def bucket_of(self, v: int) -> int:
        return self.index.bucket_of(vkey(v))

    def _u64(self, off: int) -> int:
        return _U64.unpack_from(self.arena.buffer, DATA_START + off)[0]

    def _head_link(self, v: int) -> int:
        return self.index.value_offset(vkey(v))

    def _ensure_vertex(self, tx, v: int) -> int:
        link = self._head_link(v)
        if not link:
            self.index.put(tx, vkey(v), _U64.pack(0))
            link = self._head_link(v)
        return link

    def _find(self, u: int, v: int) -> tuple[int, int]:
        """(link pointing at the node for neighbour v in u's list, node or 0)."""
        link = self._head_link(u)
        if not link:
            return 0, 0
        node = self._u64(link)
        buf = self.arena.buffer
        while node:
            nxt, nbr, _, _ = _NBR.unpack_from(buf, DATA_START + node)
            if nbr == v:
                return link, node
            link, node = node, nxt
        return link, 0

    def has_edge(self, u: int, v: int) -> bool:
        return self._find(u, v)[1] != 0

    def _insert(self, tx, u: int, v: int, attr: bytes) -> None:
        link = self._ensure_vertex(tx, u)
        node = tx.alloc(NBR_HEADER + len(attr)).offset
        tx.write_at(node, _NBR.pack(self._u64(link), v, len(attr), 0) + attr)
        tx.write_at(link, _U64.pack(node))

    def _unlink(self, tx, u: int, v: int) -> bool:
        link, node = self._find(u, v)
        if not node:
            return False
        tx.write_at(link, _U64.pack(self._u64(node)))
        tx.free(node)
        return True

    def add_edge(self, tx, u: int, v: int, attr: bytes = b"") -> GraphStatus:
        if u == v:
            return GraphStatus.SELF_LOOP
        if self.has_edge(u, v):
            return GraphStatus.EDGE_EXISTS
        self._insert(tx, u, v, attr)
        self._insert(tx, v, u, attr)
        return GraphStatus.OK

    def del_edge(self, tx, u: int, v: int) -> GraphStatus:
        if u == v:
            return GraphStatus.SELF_LOOP
        if not self._unlink(tx, u, v):
            return GraphStatus.EDGE_MISSING
        self._unlink(tx, v, u)
        return GraphStatus.OK

    def neighbours(self, u: int):
        link = self._head_link(u)
        if not link:
            return
        node = self._u64(link)
        buf = self.arena.buffer
        while node:
            nxt, nbr, alen, _ = _NBR.unpack_from(buf, DATA_START + node)
            a = DATA_START + node + NBR_HEADER
            yield nbr, bytes(buf[a:a + alen])
            node = nxt

    def out_degree(self, u: int) -> int:
        return sum(1 for _ in self.neighbours(u))

    def edge_attr(self, u: int, v: int) -> bytes | None:
        _, node = self._find(u, v)
        if not node:
            return None
        alen = _NBR.unpack_from(self.arena.buffer, DATA_START + node)[2]
        return self.arena.read_at(node + NBR_HEADER, alen)

    def vertices(self) -> list[int]:
        return [_U64.unpack(k)[0] for k, _ in self.index.items()]

    def edges(self) -> set[tuple[int, int, bytes]]:
        out = set()
        for u in self.vertices():
            for v, attr in self.neighbours(u):
                if u < v:
                    out.add((u, v, attr))
        return out

    def check(self) -> list[str]:
        """Index sound, lists acyclic and live, undirected consistency."""
        problems = [f"index: {p}" for p in self.index.check()]
        if problems:
            return problems
        arena = self.arena
        adj: dict[int, dict[int, bytes]] = {}
        seen: set[int] = set()
        for u in self.vertices():
            nbrs: dict[int, bytes] = {}
            node = self._u64(self._head_link(u))
            while node:
                if node in seen:
                    problems.append(f"vertex {u}: node {node} reached twice")
                    break
                seen.add(node)
                if not arena.is_live(node):
                    problems.append(f"vertex {u}: node {node} is not live")
                    break
                nxt, nbr, alen, _ = _NBR.unpack_from(arena.buffer, DATA_START + node)
                if nbr in nbrs:
                    problems.append(f"vertex {u}: duplicate neighbour {nbr}")
                if nbr == u:
                    problems.append(f"vertex {u}: self loop")
                nbrs[nbr] = arena.read_at(node + NBR_HEADER, alen)
                node = nxt
            adj[u] = nbrs
        for u, nbrs in adj.items():
            for v, attr in nbrs.items():
                back = adj.get(v, {}).get(u)
                if back is None:
                    problems.append(f"edge ({u},{v}) missing from {v}'s list")
                elif back != attr:
                    problems.append(f"edge ({u},{v}) attr differs between endpoints")
        return problems
