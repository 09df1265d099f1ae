"""Sharded persistent top-K vote index.

Stories are spread over S shards by ``crc32(id) mod S``.  Each shard keeps
its k best stories in one heap and all others in a second heap, plus a
:class:`PHashMap` from story id to a story record.  The top heap is ordered
worst-first and the rest heap best-first, so the two stories on either side
of the top-k boundary are both heap roots and a vote moves at most one
story across the boundary in O(log n).

Rank of a story is ``(votes, -id)``: more votes first, smaller id on ties.

Root::

    0   magic   u64 "BLZTOPK1"
    8   k       u64
    16  shards  u64
    24  shard   shards x u64 shard block offsets

Shard block::

    0 top_n | 8 rest_n | 16 rest_cap | 24 top_arr | 32 rest_arr | 40 map_root

Heap item (24 bytes): ``votes i64 | id u64 | record u64``.  Story record:
``pos u64 | tlen u32 | pad u32 | title`` where ``pos`` is the heap slot with
bit 63 set for the top heap.
"""

from __future__ import annotations

import struct
import zlib

from blizzard.libds.phashmap import PHashMap
from blizzard.pheap import DATA_START, Arena

MAGIC = struct.unpack("<Q", b"BLZTOPK1")[0]
ITEM = 24
SHARD_SIZE = 48
TOP_BIT = 1 << 63
TOP, REST = 0, 1

_ITEM = struct.Struct("<qQQ")
_U64 = struct.Struct("<Q")
_SHARD = struct.Struct("<QQQQQQ")


def shard_of(article: int, shards: int) -> int:
    return zlib.crc32(_U64.pack(article)) % shards


def rank(votes: int, article: int) -> tuple[int, int]:
    return (votes, -article)


class ShardedTopK:
    def __init__(self, arena: Arena, root: int):
        self.arena = arena
        self.root = root
        magic, self.k, self.shards = struct.unpack_from("<QQQ", arena.buffer, DATA_START + root)
        if magic != MAGIC:
            raise ValueError(f"no top-k index at offset {root}")
        self.shard_offs = [self._u64(root + 24 + 8 * s) for s in range(self.shards)]
        self.maps = [PHashMap(arena, self._shard(s)[5]) for s in range(self.shards)]

    @classmethod
    def create(cls, arena: Arena, k: int = 8, shards: int = 4, bucket_count: int = 1 << 12,
               rest_cap: int = 64) -> "ShardedTopK":
        root = arena.palloc(24 + 8 * shards)
        offs = []
        for _ in range(shards):
            m = PHashMap.create(arena, bucket_count)
            top = arena.palloc(ITEM * k)
            rest = arena.palloc(ITEM * rest_cap)
            blk = arena.palloc(SHARD_SIZE)
            arena.write_at(blk.offset, _SHARD.pack(0, 0, rest_cap, top.offset, rest.offset, m.root))
            arena.flush_at(blk.offset, SHARD_SIZE)
            offs.append(blk.offset)
        arena.write_at(root.offset, struct.pack("<QQQ", MAGIC, k, shards)
                       + b"".join(_U64.pack(o) for o in offs))
        arena.flush_at(root.offset, 24 + 8 * shards)
        arena.fence()
        return cls(arena, root.offset)

    # ------------------------------------------------------------ raw access

    def _u64(self, off: int) -> int:
        return _U64.unpack_from(self.arena.buffer, DATA_START + off)[0]

    def _shard(self, s: int) -> tuple[int, int, int, int, int, int]:
        return _SHARD.unpack_from(self.arena.buffer, DATA_START + self.shard_offs[s])

    def _item(self, arr: int, i: int) -> tuple[int, int, int]:
        return _ITEM.unpack_from(self.arena.buffer, DATA_START + arr + ITEM * i)

    def _arr(self, s: int, which: int) -> int:
        sh = self._shard(s)
        return sh[3] if which == TOP else sh[4]

    def _put(self, tx, s: int, which: int, i: int, item: tuple[int, int, int]) -> None:
        arr = self._arr(s, which)
        tx.write_at(arr + ITEM * i, _ITEM.pack(*item))
        tx.write_at(item[2], _U64.pack((TOP_BIT if which == TOP else 0) | i))

    def _set_count(self, tx, s: int, which: int, n: int) -> None:
        tx.write_at(self.shard_offs[s] + (0 if which == TOP else 8), _U64.pack(n))

    @staticmethod
    def _before(which: int, a, b) -> bool:
        """Should item a sit above item b in heap ``which``?"""
        ra, rb = rank(a[0], a[1]), rank(b[0], b[1])
        return ra < rb if which == TOP else ra > rb

    def _sift_up(self, tx, s: int, which: int, i: int) -> None:
        arr = self._arr(s, which)
        item = self._item(arr, i)
        while i > 0:
            p = (i - 1) // 2
            parent = self._item(arr, p)
            if not self._before(which, item, parent):
                break
            self._put(tx, s, which, i, parent)
            i = p
        self._put(tx, s, which, i, item)

    def _sift_down(self, tx, s: int, which: int, i: int) -> None:
        arr = self._arr(s, which)
        n = self._shard(s)[0 if which == TOP else 1]
        item = self._item(arr, i)
        while True:
            c = 2 * i + 1
            if c >= n:
                break
            child = self._item(arr, c)
            if c + 1 < n:
                other = self._item(arr, c + 1)
                if self._before(which, other, child):
                    c, child = c + 1, other
            if not self._before(which, child, item):
                break
            self._put(tx, s, which, i, child)
            i = c
        self._put(tx, s, which, i, item)

    def _push_rest(self, tx, s: int, item) -> None:
        top_n, rest_n, cap, _, rest_arr, _ = self._shard(s)
        if rest_n == cap:
            new = tx.alloc(ITEM * cap * 2).offset
            tx.write_at(new, self.arena.read_at(rest_arr, ITEM * rest_n))
            tx.write_at(self.shard_offs[s] + 16, _U64.pack(cap * 2))
            tx.write_at(self.shard_offs[s] + 32, _U64.pack(new))
            tx.free(rest_arr)
        self._set_count(tx, s, REST, rest_n + 1)
        self._put(tx, s, REST, rest_n, item)
        self._sift_up(tx, s, REST, rest_n)

    def _rebalance(self, tx, s: int) -> None:
        top_n, rest_n, _, top_arr, rest_arr, _ = self._shard(s)
        if top_n < self.k or rest_n == 0:
            return
        t, r = self._item(top_arr, 0), self._item(rest_arr, 0)
        if rank(r[0], r[1]) > rank(t[0], t[1]):
            self._put(tx, s, TOP, 0, r)
            self._put(tx, s, REST, 0, t)
            self._sift_down(tx, s, TOP, 0)
            self._sift_down(tx, s, REST, 0)

    # ------------------------------------------------------------ operations

    def shard_of(self, article: int) -> int:
        return shard_of(article, self.shards)

    def _record(self, article: int) -> int:
        m = self.maps[self.shard_of(article)]
        v = m.get(_U64.pack(article))
        return _U64.unpack(v)[0] if v is not None else 0

    def contains(self, article: int) -> bool:
        return self._record(article) != 0

    def submit(self, tx, article: int, title: bytes = b"") -> bool:
        s = self.shard_of(article)
        key = _U64.pack(article)
        if key in self.maps[s]:
            return False
        rec = tx.alloc(16 + len(title)).offset
        tx.write_at(rec, struct.pack("<QII", 0, len(title), 0) + title)
        self.maps[s].put(tx, key, _U64.pack(rec))
        item = (0, article, rec)
        top_n = self._shard(s)[0]
        if top_n < self.k:
            self._set_count(tx, s, TOP, top_n + 1)
            self._put(tx, s, TOP, top_n, item)
            self._sift_up(tx, s, TOP, top_n)
        else:
            self._push_rest(tx, s, item)
            self._rebalance(tx, s)
        return True

    def vote(self, tx, article: int, delta: int) -> bool:
        rec = self._record(article)
        if not rec:
            return False
        s = self.shard_of(article)
        pos = self._u64(rec)
        which = TOP if pos & TOP_BIT else REST
        i = pos & ~TOP_BIT
        votes, art, r = self._item(self._arr(s, which), i)
        self._put(tx, s, which, i, (votes + delta, art, r))
        # top heap is worst-first: a gain sinks, a loss rises; rest is the mirror
        if (which == TOP) == (delta > 0):
            self._sift_down(tx, s, which, i)
        else:
            self._sift_up(tx, s, which, i)
        self._rebalance(tx, s)
        return True

    def votes(self, article: int) -> int | None:
        rec = self._record(article)
        if not rec:
            return None
        s = self.shard_of(article)
        pos = self._u64(rec)
        which = TOP if pos & TOP_BIT else REST
        return self._item(self._arr(s, which), pos & ~TOP_BIT)[0]

    def shard_top(self, s: int) -> list[tuple[int, int]]:
        top_n, _, _, top_arr, _, _ = self._shard(s)
        return [(a, v) for v, a, _ in (self._item(top_arr, i) for i in range(top_n))]

    def topk(self, k: int | None = None) -> list[tuple[int, int]]:
        k = self.k if k is None else k
        cand = [p for s in range(self.shards) for p in self.shard_top(s)]
        cand.sort(key=lambda p: (-p[1], p[0]))
        return cand[:k]

    def all_votes(self) -> dict[int, int]:
        out = {}
        for s in range(self.shards):
            top_n, rest_n, _, top_arr, rest_arr, _ = self._shard(s)
            for arr, n in ((top_arr, top_n), (rest_arr, rest_n)):
                for i in range(n):
                    v, a, _ = self._item(arr, i)
                    out[a] = v
        return out

    # ----------------------------------------------------------------- check

    def check(self) -> list[str]:
        arena = self.arena
        problems = []
        for s in range(self.shards):
            problems += [f"shard {s} map: {p}" for p in self.maps[s].check()]
            top_n, rest_n, cap, top_arr, rest_arr, _ = self._shard(s)
            if top_n > self.k or rest_n > cap:
                problems.append(f"shard {s}: counts top={top_n} rest={rest_n} cap={cap}")
                continue
            if rest_n and top_n < self.k:
                problems.append(f"shard {s}: rest non-empty while top has room")
            for arr in (top_arr, rest_arr):
                if not arena.is_live(arr):
                    problems.append(f"shard {s}: heap array {arr} not live")
            if problems:
                continue
            ids = set()
            for which, arr, n in ((TOP, top_arr, top_n), (REST, rest_arr, rest_n)):
                for i in range(n):
                    item = self._item(arr, i)
                    if i and self._before(which, item, self._item(arr, (i - 1) // 2)):
                        problems.append(f"shard {s}: heap {which} order broken at {i}")
                    if self.shard_of(item[1]) != s:
                        problems.append(f"shard {s}: story {item[1]} in wrong shard")
                    if item[1] in ids:
                        problems.append(f"shard {s}: story {item[1]} stored twice")
                    ids.add(item[1])
                    if not arena.is_live(item[2]):
                        problems.append(f"shard {s}: record of {item[1]} not live")
                        continue
                    want = (TOP_BIT if which == TOP else 0) | i
                    if self._u64(item[2]) != want:
                        problems.append(f"shard {s}: record of {item[1]} points at wrong slot")
                    if self._record(item[1]) != item[2]:
                        problems.append(f"shard {s}: map entry of {item[1]} is stale")
            if top_n and rest_n:
                t, r = self._item(top_arr, 0), self._item(rest_arr, 0)
                if rank(r[0], r[1]) > rank(t[0], t[1]):
                    problems.append(f"shard {s}: rest story {r[1]} outranks top story {t[1]}")
            if len(self.maps[s]) != top_n + rest_n:
                problems.append(f"shard {s}: map holds {len(self.maps[s])}, heaps {top_n + rest_n}")
        return problems
