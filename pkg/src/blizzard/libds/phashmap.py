"""Persistent chained hash map.

Root block::

    0   magic         u64  "BLZHMAP1"
    8   bucket_count  u64  power of two
    16  heads         bucket_count x u64 node offsets

Node::

    0   next  u64
    8   klen  u32
    12  vlen  u32
    16  key | value

Mutations go through a :class:`~blizzard.patomic.Transaction`; a node whose
new value has the same length is updated in place, otherwise a fresh node
replaces it.  Bucket locks are the caller's business (see ``bucket_of``).
"""

from __future__ import annotations

import struct
import zlib

from blizzard.pheap import DATA_START, Arena

MAGIC = struct.unpack("<Q", b"BLZHMAP1")[0]
MAP_HEADER = 16
NODE_HEADER = 16

_NODE = struct.Struct("<QII")
_U64 = struct.Struct("<Q")


def key_hash(key: bytes) -> int:
    return zlib.crc32(key)


class PHashMap:
    def __init__(self, arena: Arena, root: int):
        self.arena = arena
        self.root = root
        magic, count = struct.unpack_from("<QQ", arena.buffer, DATA_START + root)
        if magic != MAGIC or count == 0 or count & (count - 1):
            raise ValueError(f"no hash map at offset {root}")
        self.bucket_count = count
        self._mask = count - 1

    @classmethod
    def create(cls, arena: Arena, bucket_count: int = 1 << 16) -> "PHashMap":
        if bucket_count <= 0 or bucket_count & (bucket_count - 1):
            raise ValueError("bucket_count must be a power of two")
        h = arena.palloc(MAP_HEADER + 8 * bucket_count)
        arena.write_at(h.offset, struct.pack("<QQ", MAGIC, bucket_count))
        arena.flush_at(h.offset, MAP_HEADER)
        arena.fence()
        return cls(arena, h.offset)

    def bucket_of(self, key: bytes) -> int:
        return key_hash(key) & self._mask

    def _head_off(self, bucket: int) -> int:
        return self.root + MAP_HEADER + 8 * bucket

    def _u64(self, off: int) -> int:
        return _U64.unpack_from(self.arena.buffer, DATA_START + off)[0]

    def _find(self, key: bytes) -> tuple[int, int]:
        """(offset of the link pointing at the node, node offset or 0)."""
        buf = self.arena.buffer
        link = self._head_off(self.bucket_of(key))
        node = self._u64(link)
        n = len(key)
        while node:
            nxt, klen, _ = _NODE.unpack_from(buf, DATA_START + node)
            if klen == n:
                a = DATA_START + node + NODE_HEADER
                if buf[a:a + n] == key:
                    return link, node
            link, node = node, nxt
        return link, 0

    def get(self, key: bytes) -> bytes | None:
        _, node = self._find(key)
        if not node:
            return None
        _, klen, vlen = _NODE.unpack_from(self.arena.buffer, DATA_START + node)
        a = DATA_START + node + NODE_HEADER + klen
        return bytes(self.arena.buffer[a:a + vlen])

    def value_offset(self, key: bytes) -> int:
        """Data offset of the stored value (0 if absent), for fixed-width values."""
        _, node = self._find(key)
        if not node:
            return 0
        return node + NODE_HEADER + _NODE.unpack_from(self.arena.buffer, DATA_START + node)[1]

    def __contains__(self, key: bytes) -> bool:
        return self._find(key)[1] != 0

    def put(self, tx, key: bytes, value: bytes) -> bool:
        """Insert or overwrite; returns True when the key was new."""
        link, node = self._find(key)
        if node:
            nxt, klen, vlen = _NODE.unpack_from(self.arena.buffer, DATA_START + node)
            if vlen == len(value):
                tx.write_at(node + NODE_HEADER + klen, value)
                return False
        else:
            nxt = self._u64(link)
        new = tx.alloc(NODE_HEADER + len(key) + len(value)).offset
        tx.write_at(new, _NODE.pack(nxt, len(key), len(value)) + key + value)
        tx.write_at(link, _U64.pack(new))
        if node:
            tx.free(node)
        return not node

    def delete(self, tx, key: bytes) -> bool:
        link, node = self._find(key)
        if not node:
            return False
        nxt = self._u64(node)
        tx.write_at(link, _U64.pack(nxt))
        tx.free(node)
        return True

    def items(self):
        buf = self.arena.buffer
        for b in range(self.bucket_count):
            node = self._u64(self._head_off(b))
            while node:
                nxt, klen, vlen = _NODE.unpack_from(buf, DATA_START + node)
                a = DATA_START + node + NODE_HEADER
                yield bytes(buf[a:a + klen]), bytes(buf[a + klen:a + klen + vlen])
                node = nxt

    def __len__(self) -> int:
        return sum(1 for _ in self.items())

    def check(self) -> list[str]:
        """Chains acyclic, nodes live, keys in their own bucket, no duplicates."""
        arena = self.arena
        problems = []
        seen_nodes: set[int] = set()
        for b in range(self.bucket_count):
            node = self._u64(self._head_off(b))
            keys = set()
            while node:
                if node in seen_nodes:
                    problems.append(f"bucket {b}: node {node} reached twice (cycle or shared)")
                    break
                seen_nodes.add(node)
                if not arena.is_live(node):
                    problems.append(f"bucket {b}: node {node} is not a live allocation")
                    break
                nxt, klen, vlen = _NODE.unpack_from(arena.buffer, DATA_START + node)
                if NODE_HEADER + klen + vlen > arena.size_of(node):
                    problems.append(f"bucket {b}: node {node} overruns its block")
                    break
                key = arena.read_at(node + NODE_HEADER, klen)
                if self.bucket_of(key) != b:
                    problems.append(f"bucket {b}: key {key!r} belongs to {self.bucket_of(key)}")
                if key in keys:
                    problems.append(f"bucket {b}: duplicate key {key!r}")
                keys.add(key)
                node = nxt
        return problems
