"""Simulated persistent-memory arena.

An arena is a flat byte image (optionally backed by a file) with a fixed
header, a table of 16 named roots, a crash-safe size-class allocator and a
data region addressed by offset handles.

Two modes share one API:

``strict``
    Every store lands in a *working* image and marks its 64-byte line dirty.
    ``flush_range`` snapshots dirty lines into a pending set and ``fence``
    copies the pending snapshots into the *durable* image.  A simulated crash
    keeps only the durable image.  A persist budget makes the fence raise
    :class:`SimulatedCrash` after an exact number of line persists, which is
    how the crash fuzzer enumerates crash points.

``fast``
    The working image *is* the durable image (a bytearray or an ``mmap`` of
    the heap file).  Fences are counted and, for file-backed arenas, turn into
    ``msync`` of the touched pages.

Heap file layout (little endian, packed)::

    0    magic        8s   b"BLZHEAP1"
    8    version      u32
    12   capacity     u64
    20   incarnation  u64
    28   roots        16 x u64   data-region offsets, 0 = null
    156  bump cursor  u64        first never-allocated data offset
    164  free heads   48 x u64   one singly linked free list per size class
    4096 data region

Every allocation is a block of ``2**k`` bytes (k >= 5) starting with a
16-byte header ``(size u64, state u32, reserved u32)``; handles point at the
payload, 16 bytes past the block start.  Free blocks keep the next free
payload offset in their first 8 payload bytes.
"""

from __future__ import annotations

import mmap
import os
import struct
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

MAGIC = b"BLZHEAP1"
VERSION = 1
LINE_SIZE = 64
MIN_CAPACITY = 1 << 20
DATA_START = 4096
NUM_ROOTS = 16
NUM_CLASSES = 48
MIN_BLOCK_SHIFT = 5
BLOCK_HEADER = 16

_OFF_VERSION = 8
_OFF_CAPACITY = 12
_OFF_INCARNATION = 20
_OFF_ROOTS = 28
_OFF_BUMP = _OFF_ROOTS + 8 * NUM_ROOTS
_OFF_HEADS = _OFF_BUMP + 8
HEADER_END = _OFF_HEADS + 8 * NUM_CLASSES

BLOCK_ALLOC = 0xA110CA7E
BLOCK_FREE = 0xF4EEB10C

_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")
_BLOCK_HDR = struct.Struct("<QII")
_ZERO_LINE = bytes(LINE_SIZE)


class ArenaError(Exception):
    pass


class CapacityTooSmall(ArenaError):
    pass


class BadMagic(ArenaError):
    pass


class VersionMismatch(ArenaError):
    pass


class OutOfSpace(ArenaError):
    pass


class InvalidHandle(ArenaError):
    pass


class DoubleFree(ArenaError):
    pass


class RangeOutOfBounds(ArenaError):
    pass


class ArenaIOError(ArenaError):
    pass


class SimulatedCrash(BaseException):
    """Raised by a strict arena when its persist budget runs out.

    Derives from BaseException so that handler-failure paths catching
    ``Exception`` never swallow a crash.
    """


@dataclass(frozen=True, slots=True)
class PHandle:
    """Offset of a payload inside the data region.

    ``generation`` records the arena incarnation the handle was minted in; it
    is informational and does not take part in equality, so a handle stays
    valid across restarts.
    """

    offset: int
    generation: int = field(default=0, compare=False)

    def __bool__(self) -> bool:
        return self.offset != 0


NULL = PHandle(0)


@dataclass
class ArenaStats:
    fences: int = 0
    flush_calls: int = 0
    lines_flushed: int = 0
    lines_persisted: int = 0
    allocs: int = 0
    frees: int = 0
    bytes_written: int = 0

    def copy(self) -> "ArenaStats":
        return ArenaStats(**vars(self))


def block_size_for(size: int) -> int:
    need = size + BLOCK_HEADER
    shift = max(MIN_BLOCK_SHIFT, (need - 1).bit_length())
    return 1 << shift


def _size_class(block_size: int) -> int:
    return block_size.bit_length() - 1 - MIN_BLOCK_SHIFT


class LineStore:
    """Cache-line persistence model used by strict arenas."""

    def __init__(self, image: bytes | bytearray, *, persist_order: str = "flush"):
        self.working = bytearray(image)
        self.durable = bytearray(image)
        self.dirty: set[int] = set()
        self.pending: dict[int, bytes] = {}
        self.persist_order = persist_order
        self.budget: int | None = None
        self.persisted = 0
        self.crashed = False
        self.on_persist = None  # callable(list[(line, bytes)]) for file mirroring

    def mark(self, start: int, length: int) -> None:
        first = start // LINE_SIZE
        last = (start + length - 1) // LINE_SIZE
        if first == last:
            self.dirty.add(first)
        else:
            self.dirty.update(range(first, last + 1))

    def flush(self, start: int, length: int) -> int:
        first = start // LINE_SIZE
        last = (start + length - 1) // LINE_SIZE
        n = 0
        dirty = self.dirty
        for line in range(first, last + 1):
            if line in dirty:
                dirty.discard(line)
                base = line * LINE_SIZE
                # re-flushing a pending line keeps its slot in the persist order
                self.pending[line] = bytes(self.working[base:base + LINE_SIZE])
                n += 1
        return n

    def fence(self) -> int:
        if not self.pending:
            return 0
        items = list(self.pending.items())
        if self.persist_order == "reverse":
            items.reverse()
        self.pending.clear()
        durable = self.durable
        done = []
        for line, data in items:
            if self.budget is not None:
                if self.budget <= 0:
                    self.crashed = True
                    if self.on_persist and done:
                        self.on_persist(done)
                    raise SimulatedCrash(f"crash after {self.persisted} line persists")
                self.budget -= 1
            base = line * LINE_SIZE
            durable[base:base + LINE_SIZE] = data
            self.persisted += 1
            done.append((line, data))
        if self.on_persist:
            self.on_persist(done)
        return len(done)

    def persist_all(self) -> None:
        """Clean shutdown: everything written becomes durable."""
        self.flush(0, len(self.working))
        self.budget = None
        self.fence()


class Arena:
    """Persistent arena; build with :meth:`create`, :meth:`open` or :meth:`from_image`."""

    def __init__(self, image, *, mode: str, path: Path | None, fh=None,
                 persist_order: str = "flush"):
        if mode not in ("strict", "fast"):
            raise ValueError(f"unknown arena mode {mode!r}")
        self.mode = mode
        self.path = path
        self._fh = fh
        self._mmap = None
        self._alloc_lock = threading.RLock()
        self.stats = ArenaStats()
        self.lines: LineStore | None = None
        self._pending_pages: set[int] = set()
        if mode == "strict":
            self.lines = LineStore(image, persist_order=persist_order)
            self._buf = self.lines.working
            if fh is not None:
                self.lines.on_persist = self._mirror_lines
        elif isinstance(image, mmap.mmap):
            self._mmap = image
            self._buf = image
        else:
            self._buf = bytearray(image)
        self._check_header()
        self.capacity = _U64.unpack_from(self._buf, _OFF_CAPACITY)[0]
        self.data_size = self.capacity - DATA_START
        self._bump = _U64.unpack_from(self._buf, _OFF_BUMP)[0]
        self._heads = [
            _U64.unpack_from(self._buf, _OFF_HEADS + 8 * i)[0] for i in range(NUM_CLASSES)
        ]
        self.incarnation = _U64.unpack_from(self._buf, _OFF_INCARNATION)[0]

    # ------------------------------------------------------------------ build

    @staticmethod
    def _fresh_image(capacity: int) -> bytearray:
        img = bytearray(capacity)
        img[0:8] = MAGIC
        _U32.pack_into(img, _OFF_VERSION, VERSION)
        _U64.pack_into(img, _OFF_CAPACITY, capacity)
        _U64.pack_into(img, _OFF_INCARNATION, 1)
        return img

    @classmethod
    def create(cls, path: str | os.PathLike | None, capacity: int, *,
               mode: str = "strict", persist_order: str = "flush") -> "Arena":
        if capacity < MIN_CAPACITY:
            raise CapacityTooSmall(f"capacity {capacity} < {MIN_CAPACITY}")
        img = cls._fresh_image(capacity)
        if path is None:
            return cls(img, mode=mode, path=None, persist_order=persist_order)
        path = Path(path)
        try:
            with open(path, "wb") as f:
                f.write(img[:HEADER_END])
                f.truncate(capacity)
        except OSError as e:
            raise ArenaIOError(str(e)) from e
        return cls._load(path, mode, persist_order, bump_incarnation=False)

    @classmethod
    def open(cls, path: str | os.PathLike, *, mode: str = "strict",
             persist_order: str = "flush") -> "Arena":
        return cls._load(Path(path), mode, persist_order, bump_incarnation=True)

    @classmethod
    def _load(cls, path: Path, mode: str, persist_order: str, *, bump_incarnation: bool):
        try:
            fh = open(path, "r+b")
        except OSError as e:
            raise ArenaIOError(str(e)) from e
        try:
            if mode == "fast":
                size = os.fstat(fh.fileno()).st_size
                if size < HEADER_END:
                    raise BadMagic(f"{path}: file too short")
                image = mmap.mmap(fh.fileno(), size)
            else:
                image = fh.read()
            arena = cls(image, mode=mode, path=path, fh=fh, persist_order=persist_order)
        except BaseException:
            fh.close()
            raise
        if bump_incarnation:
            arena._bump_incarnation()
        return arena

    @classmethod
    def from_image(cls, image: bytes, *, mode: str = "strict",
                   persist_order: str = "flush") -> "Arena":
        """Reopen an in-memory arena from a (crash) image."""
        arena = cls(bytearray(image), mode=mode, path=None, persist_order=persist_order)
        arena._bump_incarnation()
        return arena

    def _check_header(self) -> None:
        buf = self._buf
        if len(buf) < HEADER_END or bytes(buf[0:8]) != MAGIC:
            raise BadMagic("arena header magic mismatch")
        version = _U32.unpack_from(buf, _OFF_VERSION)[0]
        if version != VERSION:
            raise VersionMismatch(f"heap version {version}, expected {VERSION}")

    def _bump_incarnation(self) -> None:
        self.incarnation += 1
        self._write_abs(_OFF_INCARNATION, _U64.pack(self.incarnation))
        self._flush_abs(_OFF_INCARNATION, 8)
        self.fence()

    # -------------------------------------------------------------- raw bytes

    def _write_abs(self, start: int, data) -> None:
        n = len(data)
        lines = self.lines
        if lines is not None:
            if lines.crashed:
                raise SimulatedCrash("arena already crashed")
            lines.mark(start, n)
        self._buf[start:start + n] = data
        self.stats.bytes_written += n

    def _flush_abs(self, start: int, length: int) -> None:
        if length <= 0:
            return
        self.stats.flush_calls += 1
        if self.lines is not None:
            self.stats.lines_flushed += self.lines.flush(start, length)
        elif self._mmap is not None:
            first = start // mmap.PAGESIZE
            last = (start + length - 1) // mmap.PAGESIZE
            self._pending_pages.update(range(first, last + 1))

    def fence(self) -> None:
        self.stats.fences += 1
        if self.lines is not None:
            if self.lines.crashed:
                raise SimulatedCrash("arena already crashed")
            self.stats.lines_persisted += self.lines.fence()
        elif self._pending_pages:
            pages = sorted(self._pending_pages)
            self._pending_pages.clear()
            run_start = prev = pages[0]
            for p in pages[1:] + [None]:
                if p is not None and p == prev + 1:
                    prev = p
                    continue
                self._mmap.flush(run_start * mmap.PAGESIZE, (prev - run_start + 1) * mmap.PAGESIZE)
                if p is not None:
                    run_start = prev = p

    def _mirror_lines(self, done) -> None:
        fh = self._fh
        for line, data in done:
            fh.seek(line * LINE_SIZE)
            fh.write(data)
        fh.flush()

    def _check_data_range(self, off: int, length: int) -> None:
        if off < 0 or length < 0 or off + length > self.data_size:
            raise RangeOutOfBounds(f"[{off}, {off + length}) outside data region")

    def write_at(self, off: int, data) -> None:
        """Store bytes at a data-region offset (no allocation check)."""
        self._check_data_range(off, len(data))
        self._write_abs(DATA_START + off, data)

    def read_at(self, off: int, length: int) -> bytes:
        self._check_data_range(off, length)
        a = DATA_START + off
        return bytes(self._buf[a:a + length])

    def view_at(self, off: int, length: int) -> memoryview:
        """Zero-copy view of data-region bytes."""
        self._check_data_range(off, length)
        a = DATA_START + off
        return memoryview(self._buf)[a:a + length]

    def read_u64(self, off: int) -> int:
        return _U64.unpack_from(self._buf, DATA_START + off)[0]

    def write_u64(self, off: int, value: int) -> None:
        self.write_at(off, _U64.pack(value))

    def flush_at(self, off: int, length: int) -> None:
        self._check_data_range(off, length)
        self._flush_abs(DATA_START + off, length)

    @property
    def buffer(self):
        """Underlying working image; data offset ``o`` lives at ``DATA_START + o``."""
        return self._buf

    # ------------------------------------------------------------ allocations

    def _block_header(self, payload_off: int) -> tuple[int, int]:
        size, state, _ = _BLOCK_HDR.unpack_from(self._buf, DATA_START + payload_off - BLOCK_HEADER)
        return size, state

    def size_of(self, h: PHandle | int) -> int:
        """Usable payload bytes of a live allocation."""
        off = h.offset if isinstance(h, PHandle) else h
        self._validate_live(off)
        return self._block_header(off)[0] - BLOCK_HEADER

    def _validate_live(self, off: int) -> None:
        if off == 0:
            raise InvalidHandle("null handle")
        if off < BLOCK_HEADER or (off - BLOCK_HEADER) % (1 << MIN_BLOCK_SHIFT) or off >= self._bump:
            raise InvalidHandle(f"offset {off} is not a block payload")
        size, state = self._block_header(off)
        if state == BLOCK_FREE:
            raise DoubleFree(f"offset {off} is free")
        if state != BLOCK_ALLOC or size < 32 or size & (size - 1):
            raise InvalidHandle(f"offset {off} has no valid block header")

    def is_live(self, off: int) -> bool:
        try:
            self._validate_live(off)
        except ArenaError:
            return False
        return True

    def handle(self, off: int) -> PHandle:
        return PHandle(off, self.incarnation) if off else NULL

    def palloc(self, size: int, *, zero: bool = True) -> PHandle:
        return self.palloc_many([size], zero=zero)[0]

    def palloc_many(self, sizes: Sequence[int], *, zero: bool = True,
                    fence: bool = True) -> list[PHandle]:
        """Allocate several blocks with a constant number of fences.

        Phase A persists new bump-block headers and popped free-list heads;
        phase B advances the bump cursor and marks popped blocks allocated.
        A crash between or inside the phases leaks blocks and never corrupts
        the allocator.  With ``fence=False`` phase B is left unfenced and the
        caller must fence before publishing the handles.
        """
        with self._alloc_lock:
            heads: dict[int, int] = {}
            bump = self._bump
            fresh: list[tuple[int, int]] = []
            popped: list[tuple[int, int]] = []
            out: list[int] = []
            for size in sizes:
                if size <= 0:
                    raise ValueError("allocation size must be positive")
                bsize = block_size_for(size)
                cls = _size_class(bsize)
                if cls >= NUM_CLASSES:
                    raise OutOfSpace(f"allocation of {size} bytes too large")
                head = heads.get(cls, self._heads[cls])
                if head:
                    heads[cls] = self.read_u64(head)
                    popped.append((head, bsize))
                    out.append(head)
                else:
                    if bump + bsize > self.data_size:
                        raise OutOfSpace(f"arena full allocating {size} bytes")
                    fresh.append((bump, bsize))
                    out.append(bump + BLOCK_HEADER)
                    bump += bsize

            for blk, bsize in fresh:
                self._write_abs(DATA_START + blk, _BLOCK_HDR.pack(bsize, BLOCK_ALLOC, 0))
                self._flush_abs(DATA_START + blk, BLOCK_HEADER)
            for cls, head in heads.items():
                self._write_abs(_OFF_HEADS + 8 * cls, _U64.pack(head))
                self._flush_abs(_OFF_HEADS + 8 * cls, 8)
            self.fence()

            if fresh:
                self._write_abs(_OFF_BUMP, _U64.pack(bump))
                self._flush_abs(_OFF_BUMP, 8)
            for off, bsize in popped:
                a = DATA_START + off - BLOCK_HEADER
                self._write_abs(a, _BLOCK_HDR.pack(bsize, BLOCK_ALLOC, 0))
                self._flush_abs(a, BLOCK_HEADER)
            if zero:
                for off in out:
                    n = self._block_header(off)[0] - BLOCK_HEADER
                    a = DATA_START + off
                    self._write_abs(a, bytes(n))
                    self._flush_abs(a, n)
            if fence:
                self.fence()

            self._bump = bump
            for cls, head in heads.items():
                self._heads[cls] = head
            self.stats.allocs += len(out)
            gen = self.incarnation
            return [PHandle(o, gen) for o in out]

    def pfree(self, h: PHandle | int) -> None:
        self.pfree_many([h])

    def pfree_many(self, handles: Iterable[PHandle | int]) -> None:
        """Return blocks to their free lists (two fences for the whole set)."""
        offs = [h.offset if isinstance(h, PHandle) else h for h in handles]
        if not offs:
            return
        with self._alloc_lock:
            seen: set[int] = set()
            for off in offs:
                if off in seen:
                    raise DoubleFree(f"offset {off} freed twice")
                seen.add(off)
                self._validate_live(off)
            new_heads: dict[int, int] = {}
            for off in offs:
                bsize = self._block_header(off)[0]
                cls = _size_class(bsize)
                nxt = new_heads.get(cls, self._heads[cls])
                a = DATA_START + off - BLOCK_HEADER
                self._write_abs(a, _BLOCK_HDR.pack(bsize, BLOCK_FREE, 0) + _U64.pack(nxt))
                self._flush_abs(a, BLOCK_HEADER + 8)
                new_heads[cls] = off
            self.fence()
            for cls, head in new_heads.items():
                self._write_abs(_OFF_HEADS + 8 * cls, _U64.pack(head))
                self._flush_abs(_OFF_HEADS + 8 * cls, 8)
            self.fence()
            for cls, head in new_heads.items():
                self._heads[cls] = head
            self.stats.frees += len(offs)

    # --------------------------------------------------------- handle access

    def _check_handle_range(self, h: PHandle | int, offset: int, length: int) -> int:
        off = h.offset if isinstance(h, PHandle) else h
        size = self.size_of(off)
        if offset < 0 or length < 0 or offset + length > size:
            raise RangeOutOfBounds(f"[{offset}, {offset + length}) outside allocation of {size}")
        return off + offset

    def write(self, h: PHandle, offset: int, data) -> None:
        self._write_abs(DATA_START + self._check_handle_range(h, offset, len(data)), data)

    def read(self, h: PHandle, offset: int, length: int) -> bytes:
        a = DATA_START + self._check_handle_range(h, offset, length)
        return bytes(self._buf[a:a + length])

    def resolve(self, h: PHandle) -> memoryview:
        """Zero-copy view over a whole allocation."""
        size = self.size_of(h)
        return self.view_at(h.offset, size)

    def flush_range(self, h: PHandle, offset: int, length: int) -> None:
        self._flush_abs(DATA_START + self._check_handle_range(h, offset, length), length)

    # ------------------------------------------------------------------ roots

    def get_root(self, index: int) -> PHandle:
        if not 0 <= index < NUM_ROOTS:
            raise IndexError(index)
        return self.handle(_U64.unpack_from(self._buf, _OFF_ROOTS + 8 * index)[0])

    def set_root(self, index: int, h: PHandle) -> None:
        if not 0 <= index < NUM_ROOTS:
            raise IndexError(index)
        if h:
            self._validate_live(h.offset)
        a = _OFF_ROOTS + 8 * index
        self._write_abs(a, _U64.pack(h.offset))
        self._flush_abs(a, 8)
        self.fence()

    # -------------------------------------------------------------- lifecycle

    @property
    def crashed(self) -> bool:
        return self.lines is not None and self.lines.crashed

    def set_persist_budget(self, budget: int | None) -> None:
        """Strict mode: crash after ``budget`` more line persists."""
        if self.lines is None:
            raise ArenaError("persist budget needs a strict arena")
        self.lines.budget = budget

    def durable_image(self) -> bytes:
        if self.lines is not None:
            return bytes(self.lines.durable)
        return bytes(self._buf)

    def crash(self) -> bytes:
        """Simulate power loss; returns the surviving image."""
        image = self.durable_image()
        if self.lines is not None:
            self.lines.crashed = True
        self._close_files()
        return image

    def close(self) -> None:
        """Clean shutdown: all written bytes become durable."""
        if self.lines is not None and not self.lines.crashed:
            self.lines.persist_all()
        elif self._mmap is not None:
            self._mmap.flush()
        self._close_files()

    def _close_files(self) -> None:
        if self._mmap is not None:
            try:
                self._mmap.close()
            except BufferError:
                pass  # live memoryviews; the OS unmaps at exit
            self._mmap = None
        if self._fh is not None:
            self._fh.close()
            self._fh = None

    # ------------------------------------------------------------- self-check

    @property
    def bump_cursor(self) -> int:
        return self._bump

    def blocks(self) -> list[tuple[int, int, int]]:
        """(payload offset, block size, state) for every block below the cursor."""
        out = []
        off = 0
        while off < self._bump:
            size, state, _ = _BLOCK_HDR.unpack_from(self._buf, DATA_START + off)
            if size < 32 or size & (size - 1) or off + size > self._bump:
                break
            out.append((off + BLOCK_HEADER, size, state))
            off += size
        return out

    def check_allocator(self) -> list[str]:
        """Return allocator invariant violations (empty list means sound)."""
        problems = []
        tiles: dict[int, tuple[int, int]] = {}
        off = 0
        while off < self._bump:
            size, state, _ = _BLOCK_HDR.unpack_from(self._buf, DATA_START + off)
            if size < 32 or size & (size - 1) or off + size > self._bump:
                problems.append(f"bad block size {size} at {off}")
                break
            if state not in (BLOCK_ALLOC, BLOCK_FREE):
                problems.append(f"bad block state {state:#x} at {off}")
                break
            tiles[off + BLOCK_HEADER] = (size, state)
            off += size
        on_list: set[int] = set()
        for cls in range(NUM_CLASSES):
            p = self._heads[cls]
            while p:
                if p in on_list:
                    problems.append(f"free list {cls}: cycle or shared node at {p}")
                    break
                tile = tiles.get(p)
                if tile is None:
                    problems.append(f"free list {cls}: {p} is not a block")
                    break
                if tile[1] != BLOCK_FREE:
                    problems.append(f"free list {cls}: {p} is allocated")
                if _size_class(tile[0]) != cls:
                    problems.append(f"free list {cls}: {p} has size {tile[0]}")
                on_list.add(p)
                p = self.read_u64(p)
        return problems

    # -------------------------------------------------------------- snapshots

    def snapshot(self):
        """Fast-mode copy of the used image plus allocator mirrors."""
        if self.mode != "fast":
            raise ArenaError("snapshots are only supported in fast mode")
        hw = DATA_START + self._bump
        return (bytes(self._buf[:hw]), self._bump, list(self._heads))

    def restore(self, snap) -> None:
        image, bump, heads = snap
        hw = DATA_START + max(bump, self._bump)
        self._buf[:len(image)] = image
        if hw > len(image):
            self._buf[len(image):hw] = bytes(hw - len(image))
        self._bump = bump
        self._heads = list(heads)


# Module-level names matching the operation vocabulary.

def arena_create(path, capacity: int, *, mode: str = "strict") -> Arena:
    return Arena.create(path, capacity, mode=mode)


def arena_open(path, *, mode: str = "strict") -> Arena:
    return Arena.open(path, mode=mode)


def palloc(arena: Arena, size: int) -> PHandle:
    return arena.palloc(size)


def pfree(arena: Arena, h: PHandle) -> None:
    arena.pfree(h)


def flush_range(arena: Arena, h: PHandle, length: int, offset: int = 0) -> None:
    arena.flush_range(h, offset, length)


def fence(arena: Arena) -> None:
    arena.fence()
