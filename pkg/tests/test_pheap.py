import random

import pytest
from hypothesis import given, settings, strategies as st

from blizzard.pheap import (BLOCK_ALLOC, LINE_SIZE, NULL, NUM_ROOTS, Arena, BadMagic,
                            CapacityTooSmall, DoubleFree, InvalidHandle, OutOfSpace, PHandle,
                            RangeOutOfBounds, SimulatedCrash, VersionMismatch, arena_create,
                            arena_open, fence, flush_range, palloc, pfree)

MiB = 1 << 20


def live_ranges(arena):
    return sorted((off, off + size - 16) for off, size, state in arena.blocks()
                  if state == BLOCK_ALLOC)


def assert_disjoint(ranges):
    for (a0, a1), (b0, b1) in zip(ranges, ranges[1:]):
        assert a1 <= b0, f"overlap [{a0},{a1}) [{b0},{b1})"


def test_create_fresh_has_null_roots(tmp_path):
    a = arena_create(tmp_path / "heap.img", 16 * MiB)
    assert all(a.get_root(i) == NULL for i in range(NUM_ROOTS))
    assert a.incarnation == 1
    assert (tmp_path / "heap.img").stat().st_size == 16 * MiB
    a.close()


def test_create_too_small(tmp_path):
    with pytest.raises(CapacityTooSmall):
        arena_create(tmp_path / "heap.img", 4096)


@pytest.mark.parametrize("mode", ["strict", "fast"])
def test_root_round_trip(tmp_path, mode):
    p = tmp_path / "heap.img"
    a = arena_create(p, MiB, mode=mode)
    h = palloc(a, 24)
    a.write(h, 0, b"root payload")
    flush_range(a, h, 12)
    fence(a)
    a.set_root(0, h)
    a.close()
    b = arena_open(p, mode=mode)
    assert b.get_root(0) == h
    assert b.read(b.get_root(0), 0, 12) == b"root payload"
    b.close()


def test_open_increments_incarnation(tmp_path):
    p = tmp_path / "heap.img"
    arena_create(p, MiB).close()
    a = arena_open(p)
    assert a.incarnation == 2
    a.close()
    assert arena_open(p).incarnation == 3


def test_open_zeros_is_bad_magic(tmp_path):
    p = tmp_path / "zeros.img"
    p.write_bytes(bytes(MiB))
    with pytest.raises(BadMagic):
        arena_open(p)
    with pytest.raises(BadMagic):
        arena_open(p, mode="fast")


def test_open_wrong_version(tmp_path):
    p = tmp_path / "heap.img"
    arena_create(p, MiB).close()
    raw = bytearray(p.read_bytes())
    raw[8] = 99
    p.write_bytes(raw)
    with pytest.raises(VersionMismatch):
        arena_open(p)


def test_crash_keeps_flushed_drops_unflushed(tmp_path):
    p = tmp_path / "heap.img"
    a = arena_create(p, MiB)
    h1 = palloc(a, 64)
    h2 = palloc(a, 64)
    a.write(h1, 0, b"flushed!")
    a.write(h2, 0, b"volatile")
    flush_range(a, h1, 8)
    fence(a)
    a.crash()
    b = arena_open(p)
    assert b.read(h1, 0, 8) == b"flushed!"
    assert b.read(h2, 0, 8) == bytes(8)


def test_palloc_zeroed_even_after_reuse():
    a = Arena.create(None, MiB)
    h = palloc(a, 64)
    assert a.read(h, 0, 64) == bytes(64)
    a.write(h, 0, b"\xff" * 64)
    pfree(a, h)
    h2 = palloc(a, 64)
    assert h2 == h  # same size class reuses the block
    assert bytes(a.resolve(h2)[:64]) == bytes(64)


def test_out_of_space():
    a = Arena.create(None, MiB, mode="fast")
    with pytest.raises(OutOfSpace):
        while True:
            palloc(a, 4000)
    assert a.check_allocator() == []


def test_free_null_and_double_free():
    a = Arena.create(None, MiB)
    with pytest.raises(InvalidHandle):
        pfree(a, NULL)
    h = palloc(a, 40)
    pfree(a, h)
    with pytest.raises(DoubleFree):
        pfree(a, h)
    with pytest.raises(InvalidHandle):
        pfree(a, PHandle(h.offset + 8))


def test_range_checks():
    a = Arena.create(None, MiB)
    h = palloc(a, 16)
    size = a.size_of(h)
    with pytest.raises(RangeOutOfBounds):
        a.write(h, size - 2, b"abcd")
    with pytest.raises(RangeOutOfBounds):
        flush_range(a, h, size + 1)


def test_unflushed_write_lost_flushed_write_kept():
    a = Arena.create(None, MiB)
    h = palloc(a, 8)
    a.write(h, 0, b"12345678")
    img = a.crash()
    assert Arena.from_image(img).read(h, 0, 8) == bytes(8)

    a = Arena.create(None, MiB)
    h = palloc(a, 8)
    a.write(h, 0, b"12345678")
    flush_range(a, h, 8)
    fence(a)
    img = a.crash()
    assert Arena.from_image(img).read(h, 0, 8) == b"12345678"


def test_flush_two_of_three_lines():
    a = Arena.create(None, MiB)
    h = palloc(a, 4 * LINE_SIZE)
    base = (h.offset + LINE_SIZE - 1) // LINE_SIZE * LINE_SIZE - h.offset  # line-aligned offset
    lines = [bytes([i + 1]) * LINE_SIZE for i in range(3)]
    for i, data in enumerate(lines):
        a.write(h, base + i * LINE_SIZE, data)
    flush_range(a, h, LINE_SIZE, base)
    flush_range(a, h, LINE_SIZE, base + 2 * LINE_SIZE)
    fence(a)
    b = Arena.from_image(a.crash())
    got = [b.read(h, base + i * LINE_SIZE, LINE_SIZE) for i in range(3)]
    assert got == [lines[0], bytes(LINE_SIZE), lines[2]]


def test_flush_without_fence_is_lost():
    a = Arena.create(None, MiB)
    h = palloc(a, 8)
    a.write(h, 0, b"pending!")
    flush_range(a, h, 8)
    b = Arena.from_image(a.crash())
    assert b.read(h, 0, 8) == bytes(8)


def _random_alloc_free(arena, rng, steps, live):
    for _ in range(steps):
        if live and rng.random() < 0.45:
            h = live.pop(rng.randrange(len(live)))
            arena.pfree(h)
        else:
            h = arena.palloc(rng.choice([1, 8, 40, 100, 300, 2000]))
            live.append(h)


@pytest.mark.parametrize("seed", range(12))
@pytest.mark.parametrize("order", ["flush", "reverse"])
def test_crash_during_alloc_free_keeps_allocator_sound(seed, order):
    rng = random.Random(seed)
    a = Arena.create(None, 4 * MiB, persist_order=order)
    live: list[PHandle] = []
    _random_alloc_free(a, rng, 300, live)
    a.set_persist_budget(rng.randrange(0, 600))
    try:
        _random_alloc_free(a, rng, 700, live)
    except SimulatedCrash:
        pass
    b = Arena.from_image(a.durable_image(), persist_order=order)
    assert b.check_allocator() == []
    before = live_ranges(b)
    assert_disjoint(before)
    # allocating after recovery never hands out a block that is still live
    fresh = [b.palloc(rng.choice([8, 100, 2000])) for _ in range(200)]
    assert_disjoint(live_ranges(b))
    for h in fresh:
        assert all(not (s <= h.offset < e) for s, e in before)


def test_free_then_crash_never_double_allocates():
    a = Arena.create(None, MiB)
    hs = [a.palloc(100) for _ in range(10)]
    total = a.lines.persisted
    for budget in range(0, 20):
        a2 = Arena.from_image(a.durable_image())
        a2.set_persist_budget(budget)
        try:
            for h in hs[:5]:
                a2.pfree(h)
        except SimulatedCrash:
            pass
        b = Arena.from_image(a2.durable_image())
        assert b.check_allocator() == []
        live = {off for off, _, st in b.blocks() if st == BLOCK_ALLOC}
        new = {b.palloc(100).offset for _ in range(10)}
        assert not (new & live)
    assert total > 0


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.integers(1, 500), st.binary(min_size=1, max_size=64)),
                min_size=1, max_size=30),
       st.sampled_from(["strict", "fast"]))
def test_restart_stability(tmp_path_factory, items, mode):
    p = tmp_path_factory.mktemp("heap") / "heap.img"
    a = arena_create(p, MiB, mode=mode)
    seen = []
    for size, data in items:
        h = a.palloc(size)
        data = data[:size]
        a.write(h, 0, data)
        a.flush_range(h, 0, len(data))
        seen.append((h, data))
    a.fence()
    a.close()
    b = arena_open(p, mode=mode)
    for h, data in seen:
        assert b.read(h, 0, len(data)) == data
    b.close()


@settings(max_examples=60, deadline=None)
@given(st.lists(st.one_of(st.integers(1, 3000), st.just(-1)), max_size=120), st.randoms())
def test_no_overlapping_allocations(ops, rnd):
    a = Arena.create(None, 2 * MiB, mode="fast")
    live = []
    for op in ops:
        if op == -1:
            if live:
                a.pfree(live.pop(rnd.randrange(len(live))))
        else:
            try:
                live.append(a.palloc(op))
            except OutOfSpace:
                pass
    spans = sorted((h.offset, h.offset + a.size_of(h)) for h in live)
    assert_disjoint(spans)
    assert a.check_allocator() == []
