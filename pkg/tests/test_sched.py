import random
import struct
import threading
import time

import pytest
from hypothesis import given, settings, strategies as st

from blizzard.libds import codec
from blizzard.libds.services import KVService
from blizzard.logrep.entry import (ENTRY_HEADER, EntryKind, OpState, get_gc_flag, get_state,
                                   pack_header, set_state)
from blizzard.logrep.wire import Status
from blizzard.patomic import TxManager
from blizzard.pheap import Arena
from blizzard.sched.executor import ThreadedExecutor
from blizzard.sched.locks import LockProvider
from blizzard.sched.queue import OpQueue
from blizzard.sched.scheduler import (AsymmetricPredicate, DuplicateRegistration, SchedError,
                                      Scheduler)

MiB = 1 << 20


class Rig:
    def __init__(self, *, pool=4, serial=False, arena=None, provider=None, mode="fast"):
        self.arena = arena or Arena.create(None, 4 * MiB, mode=mode)
        self.txm = TxManager(self.arena)
        self.txm.recover()
        self.q = OpQueue(self.arena, 1024)
        self.kv = KVService(self.arena, provider or LockProvider(), bucket_count=64)
        self.calls = 0
        self.sched = Scheduler(self.arena, self.q, self.txm, pool_size=pool, serial=serial,
                               debug_checks=True)
        self.sched.register_service(self._handle, self.kv.commutes,
                                    samples=self.kv.sample_requests(random.Random(0), 32))
        self.sched.recover()
        self.responses: list[tuple[int, int, bytes]] = []
        self.resent: list[int] = []
        self.sched.on_response = lambda off, st_, p: self.responses.append((off, st_, p))
        self.sched.on_resend = self.resent.append
        self.idx = 0

    def _handle(self, req, locks, tx):
        self.calls += 1
        return self.kv.handle(req, locks, tx)

    def add(self, payload, state=OpState.REPLICATED, kind=EntryKind.UPDATE):
        self.idx += 1
        h = self.arena.palloc(ENTRY_HEADER + len(payload))
        self.arena.write_at(h.offset, pack_header(state, kind, len(payload), 1, self.idx, 1,
                                                  self.idx))
        self.arena.write_at(h.offset + ENTRY_HEADER, payload)
        self.arena.flush_at(h.offset, ENTRY_HEADER + len(payload))
        self.q.push([(h.offset, kind == EntryKind.READ)])
        return h.offset

    def run(self, off):
        self.sched.finish(off, self.sched.execute(off))


def test_empty_e_dispatches_replicated_head():
    r = Rig()
    off = r.add(codec.kv_put(b"a", b"1"))
    assert r.sched.schedule_tick() == [off]


def test_replicating_head_blocks_everything():
    r = Rig()
    head = r.add(codec.kv_put(b"a", b"1"), state=OpState.REPLICATING)
    r.add(codec.kv_put(b"b", b"1"))
    assert r.sched.schedule_tick() == []
    assert r.sched.stats.hol_blocks == 1
    set_state(r.arena, head, OpState.REPLICATED)
    assert len(r.sched.schedule_tick()) == 2


def test_different_keys_dispatch_together_same_key_waits():
    r = Rig()
    a = r.add(codec.kv_put(b"k1", b"x"))
    b = r.add(codec.kv_put(b"k2", b"y"))
    c = r.add(codec.kv_put(b"k1", b"z"))
    assert r.sched.schedule_tick() == [a, b]
    assert r.sched.schedule_tick() == []
    r.run(a)
    assert r.sched.schedule_tick() == [c]


def test_failed_replication_head_gets_error_reply():
    r = Rig()
    bad = r.add(codec.kv_put(b"k", b"v"), state=OpState.FAILED_REPLICATION)
    ok = r.add(codec.kv_put(b"k", b"w"))
    assert r.sched.schedule_tick() == [ok]
    assert r.responses == [(bad, Status.RETRYABLE, b"")]
    assert get_gc_flag(r.arena, bad)
    assert r.calls == 0


def test_execute_marks_completed_and_gc_flag():
    r = Rig()
    off = r.add(codec.kv_put(b"k", b"v"))
    r.sched.schedule_tick()
    r.run(off)
    assert get_state(r.arena, off) == OpState.COMPLETED
    assert get_gc_flag(r.arena, off)
    assert r.responses == [(off, Status.OK, codec.kv_response(codec.KVStatus.OK))]
    assert r.sched.E == {}


def test_serial_mode_one_at_a_time():
    r = Rig(serial=True)
    for i in range(4):
        r.add(codec.kv_put(b"k%d" % i, b"v"))
    assert len(r.sched.schedule_tick()) == 1


def test_e_capped():
    r = Rig(pool=2)
    for i in range(10):
        r.add(codec.kv_put(b"k%d" % i, b"v"))
    assert len(r.sched.schedule_tick()) == 4


def test_read_does_not_bypass_write():
    r = Rig()
    w = r.add(codec.kv_put(b"k", b"new"))
    rd = r.add(codec.kv_get(b"k"), kind=EntryKind.READ)
    assert r.sched.schedule_tick() == [w]
    assert r.sched.schedule_tick() == []
    r.run(w)
    assert r.sched.schedule_tick() == [rd]
    r.run(rd)
    assert r.responses[-1][2] == codec.kv_response(codec.KVStatus.OK, b"new")


def test_register_twice_rejected():
    r = Rig()
    with pytest.raises(DuplicateRegistration):
        r.sched.register_service(r._handle, r.kv.commutes)


def test_asymmetric_predicate_rejected():
    r = Rig()
    s = Scheduler(r.arena, r.q, r.txm)
    samples = [bytes([i]) for i in range(8)]
    with pytest.raises(AsymmetricPredicate):
        s.register_service(r._handle, lambda a, b: a[0] < b[0], samples=samples)
    s.register_service(r._handle, lambda a, b: a[0] != b[0], samples=samples)


def test_handler_error_retried_once_then_app_error():
    r = Rig()
    s = Scheduler(r.arena, r.q, r.txm)
    calls = []

    def boom(req, locks, tx):
        calls.append(1)
        tx.write_at(r.kv.map.root, b"\xff" * 8)  # rolled back
        raise ValueError("bad input")

    s.register_service(boom, lambda a, b: False)
    out = []
    s.on_response = lambda off, st_, p: out.append((st_, p))
    before = r.arena.read_at(r.kv.map.root, 8)
    off = r.add(codec.kv_put(b"k", b"v"))
    s.run_inline()
    assert len(calls) == 2
    assert out == [(Status.APP_ERROR, b"ValueError")]
    assert r.arena.read_at(r.kv.map.root, 8) == before
    assert get_state(r.arena, off) == OpState.COMPLETED


def test_counter_increments_serialize_under_delayed_lock():
    """Two increments commute, yet both need the lock around read-modify-write."""
    arena = Arena.create(None, MiB, mode="fast")
    txm = TxManager(arena)
    q = OpQueue(arena, 64)
    counter = arena.palloc(8).offset
    lock = threading.Lock()
    seen = []

    def incr(req, locks, tx):
        locks.acquire(lock)
        v = struct.unpack("<Q", arena.read_at(counter, 8))[0]
        time.sleep(0.01)  # widen the race window
        tx.write_u64(counter, v + 1)
        seen.append(v)
        return b""

    s = Scheduler(arena, q, txm, pool_size=2)
    s.register_service(incr, lambda a, b: True)
    for i in range(2):
        h = arena.palloc(ENTRY_HEADER + 1)
        arena.write_at(h.offset, pack_header(OpState.REPLICATED, EntryKind.UPDATE, 1, 1, i + 1,
                                             1, i + 1) + b"+")
        q.push([(h.offset, False)])
    ex = ThreadedExecutor(s, 2)
    batch = s.schedule_tick()
    assert len(batch) == 2  # dispatched concurrently
    for off in batch:
        ex.submit(off)
    while s.E:
        ex.drain(block=True, timeout=1.0)
    ex.shutdown()
    assert struct.unpack("<Q", arena.read_at(counter, 8))[0] == 2
    assert sorted(seen) == [0, 1]


def test_crash_after_commit_skips_reexecution_and_resends():
    r = Rig(mode="strict")
    off = r.add(codec.kv_put(b"k", b"v"))
    r.sched.schedule_tick()
    r.sched.execute(off)  # committed, response never sent
    img = r.arena.crash()
    r2 = Rig(arena=Arena.from_image(img))
    assert r2.sched.run_inline() == 0
    assert r2.calls == 0
    assert r2.resent == [off]
    assert r2.kv.map.get(b"k") == b"v"


def test_restart_runs_only_pending_entries():
    r = Rig(mode="strict")
    offs = [r.add(codec.kv_put(b"k%d" % i, b"v")) for i in range(5)]
    r.sched.schedule_tick()
    for off in offs[:3]:
        r.run(off)
    r.sched.end_tick()
    img = r.arena.crash()
    r2 = Rig(arena=Arena.from_image(img))
    r2.sched.run_inline()
    assert r2.calls == 2
    assert r2.kv.state() == {b"k%d" % i: b"v" for i in range(5)}


def test_restart_drops_reads():
    r = Rig(mode="strict")
    r.add(codec.kv_get(b"k"), kind=EntryKind.READ)
    r.add(codec.kv_put(b"k", b"v"))
    img = r.arena.crash()
    r2 = Rig(arena=Arena.from_image(img))
    r2.sched.run_inline()
    assert r2.calls == 1
    assert r2.responses == [(r2.q.slot(1)[0], Status.OK, codec.kv_response(codec.KVStatus.OK))]


def test_crash_mid_handler_reexecutes_to_same_result():
    clean = Rig(mode="strict")
    ops = [codec.kv_put(b"k%d" % (i % 3), b"v%d" % i) for i in range(6)]
    for op in ops:
        clean.add(op)
    clean.sched.run_inline()
    want = clean.kv.state()
    from blizzard.pheap import SimulatedCrash
    for budget in range(0, 200, 7):
        r = Rig(mode="strict")
        for op in ops:
            r.add(op)
        r.arena.set_persist_budget(budget)
        try:
            r.sched.run_inline()
        except SimulatedCrash:
            pass
        r2 = Rig(arena=Arena.from_image(r.arena.durable_image()))
        r2.sched.run_inline()
        assert r2.kv.state() == want
        assert r2.kv.check() == []


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.sampled_from("pgd"), st.integers(0, 4)), min_size=1, max_size=40),
       st.randoms(use_true_random=False))
def test_e_pairwise_commutative_and_model_equivalent(ops, rnd):
    r = Rig()
    reqs = []
    for op, k in ops:
        key = b"k%d" % k
        reqs.append({"p": codec.kv_put(key, b"v%d" % rnd.randrange(9)), "g": codec.kv_get(key),
                     "d": codec.kv_del(key)}[op])
        r.add(reqs[-1], kind=EntryKind.READ if op == "g" else EntryKind.UPDATE)
    done: dict[int, bytes] = {}
    r.sched.on_response = lambda off, st_, p: done.__setitem__(off, p)
    pending: list[int] = []
    while len(done) < len(reqs):
        pending += r.sched.schedule_tick()  # debug_checks asserts E is pairwise commutative
        offs = list(r.sched.E)
        for a in range(len(offs)):
            for b in range(a + 1, len(offs)):
                assert r.kv.commutes(r.sched.E[offs[a]], r.sched.E[offs[b]])
        # finish a random non-empty subset in random order
        rnd.shuffle(pending)
        k = rnd.randint(1, len(pending))
        for off in pending[:k]:
            r.run(off)
        pending = pending[k:]
    model = r.kv.model()
    positions = [r.q.slot(p)[0] for p in r.q.positions()]
    for off, req in zip(positions, reqs):
        assert done[off] == model.apply(req)


def test_debug_check_catches_bad_predicate():
    r = Rig()
    s = Scheduler(r.arena, r.q, r.txm, debug_checks=True)
    flip = {"n": 0}

    def liar(a, b):
        flip["n"] += 1
        return flip["n"] <= 1  # says yes once, then no
    s.register_service(r._handle, liar)
    r.add(codec.kv_put(b"a", b"1"))
    r.add(codec.kv_put(b"a", b"2"))
    with pytest.raises(SchedError):
        s.schedule_tick()
