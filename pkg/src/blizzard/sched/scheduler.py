"""Commutativity scheduler (Alg. 1), failure-atomic executor (Alg. 2), recovery.

Q is the persistent :class:`~blizzard.sched.queue.OpQueue`; E is a volatile
dict of entries dispatched and not yet finished.  The scheduler only ever
looks at the head of Q: a head that is still replicating, or that does not
commute with every member of E, blocks everything behind it.

Execution is split in two so the same code serves inline, threaded and
simulated executors: :meth:`Scheduler.execute` runs the handler inside a
transaction and commits (COMPLETED is written inside that transaction);
:meth:`Scheduler.finish` releases delayed locks, removes the entry from E,
sets its gc flag and hands the response to the transport.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from typing import Callable, Sequence

from blizzard.logrep.entry import (
    EntryKind,
    OpState,
    get_gc_flag,
    get_kind,
    get_state,
    payload_view,
    read_header,
    set_gc_flag,
    set_state,
)
from blizzard.logrep.wire import Status
from blizzard.patomic import TxManager
from blizzard.pheap import Arena
from blizzard.sched.locks import DelayedLocks
from blizzard.sched.queue import OpQueue

Handler = Callable[[memoryview, DelayedLocks, object], bytes]
Predicate = Callable[[bytes, bytes], bool]


class SchedError(Exception):
    pass


class DuplicateRegistration(SchedError):
    pass


class AsymmetricPredicate(SchedError):
    pass


class NotRegistered(SchedError):
    pass


@dataclass
class ExecResult:
    status: int
    payload: bytes
    locks: DelayedLocks | None = None
    fences: int = 0
    attempts: int = 1
    cost_key: bytes | memoryview = b""


@dataclass
class SchedStats:
    dispatched: int = 0
    completed: int = 0
    failed: int = 0
    resent: int = 0
    handler_calls: int = 0  # handler invocations that committed (exactly-once hook)
    handler_errors: int = 0
    reads: int = 0
    e_high_water: int = 0
    e_sum: int = 0  # sum of |E| sampled per tick
    ticks: int = 0
    hol_blocks: int = 0
    hol_hist: dict = field(default_factory=dict)  # log2(us) bucket -> count

    def record_block(self, duration: float) -> None:
        b = max(0, int(duration).bit_length())
        self.hol_hist[b] = self.hol_hist.get(b, 0) + 1


def check_symmetry(predicate: Predicate, samples: Sequence[bytes], *, pairs: int = 512,
                   rng: random.Random | None = None) -> tuple[bytes, bytes] | None:
    """Return an asymmetric sample pair, or None."""
    if len(samples) < 2:
        return None
    rng = rng or random.Random(0)
    for _ in range(pairs):
        a, b = rng.choice(samples), rng.choice(samples)
        if bool(predicate(a, b)) != bool(predicate(b, a)):
            return a, b
    return None


class Scheduler:
    def __init__(self, arena: Arena, queue: OpQueue, txm: TxManager, *, pool_size: int = 4,
                 serial: bool = False, now: Callable[[], float] = lambda: 0.0,
                 debug_checks: bool = False, e_cap: int | None = None):
        self.arena = arena
        self.q = queue
        self.txm = txm
        self.pool_size = pool_size
        self.e_cap = e_cap or pool_size * 2  # in flight: running plus queued at executors
        self.serial = serial
        self.now = now
        self.debug_checks = debug_checks
        self.handler: Handler | None = None
        self.predicate: Predicate | None = None
        self.stateless = False
        self.E: dict[int, memoryview] = {}
        self.stats = SchedStats()
        self.on_response: Callable[[int, int, bytes], None] = lambda off, status, payload: None
        # recovery path: reply for an update whose effects were already durable
        self.on_resend: Callable[[int], None] = lambda off: None
        self._blocked_since: float | None = None
        self._unfenced = False

    # ---------------------------------------------------------- registration

    def register_service(self, handler: Handler, predicate: Predicate, *,
                         samples: Sequence[bytes] = (), stateless: bool = False,
                         rng: random.Random | None = None) -> None:
        if self.handler is not None:
            raise DuplicateRegistration("a service is already registered")
        bad = check_symmetry(predicate, samples, rng=rng)
        if bad is not None:
            raise AsymmetricPredicate(f"commutes(a, b) != commutes(b, a) for {bad[0]!r}, {bad[1]!r}")
        self.handler = handler
        self.predicate = predicate
        self.stateless = stateless

    # --------------------------------------------------------------- recovery

    def recover(self) -> dict:
        """Run after transaction and log recovery: drop reads, tag completed work."""
        arena = self.arena
        reads = completed = pending = 0
        for pos in self.q.positions():
            off, is_read = self.q.slot(pos)
            state = get_state(arena, off)
            if is_read:
                if state != OpState.COMPLETED:
                    set_state(arena, off, OpState.COMPLETED)
                set_gc_flag(arena, off)
                reads += 1
            elif state == OpState.COMPLETED:
                if not get_gc_flag(arena, off):
                    set_gc_flag(arena, off)
                completed += 1
            else:
                pending += 1
        arena.fence()
        self.q.reset_head()
        self.E.clear()
        return {"reads_dropped": reads, "completed": completed, "pending": pending}

    # ------------------------------------------------------------------ Alg. 1

    def _commutes_with_e(self, off: int, kind: int) -> bool:
        if kind == EntryKind.NOOP:
            return True
        if self.serial:
            return not self.E
        req = payload_view(self.arena, off)
        pred = self.predicate
        for other_off, other in self.E.items():
            if get_kind(self.arena, other_off) == EntryKind.NOOP:
                continue
            if not pred(req, other):
                return False
        return True

    def schedule_tick(self) -> list[int]:
        """Dispatch heads of Q into E until blocked; returns dispatched entries."""
        arena = self.arena
        q = self.q
        out = []
        self.stats.ticks += 1
        while q.head < q.end:
            off, is_read = q.slot(q.head)
            state = get_state(arena, off)
            if state == OpState.FAILED_REPLICATION:
                q.advance_head()
                set_gc_flag(arena, off)
                self._unfenced = True
                self.stats.failed += 1
                self.on_response(off, Status.RETRYABLE, b"")
                continue
            if state == OpState.COMPLETED:
                # recovery path: effects are durable, only the reply may be missing
                q.advance_head()
                if not get_gc_flag(arena, off):
                    set_gc_flag(arena, off)
                    self._unfenced = True
                kind = get_kind(arena, off)
                if not is_read and kind == EntryKind.UPDATE:
                    self.stats.resent += 1
                    self.on_resend(off)
                continue
            if state != OpState.REPLICATED or len(self.E) >= self.e_cap:
                self._block()
                break
            kind = get_kind(arena, off)
            if not self._commutes_with_e(off, kind):
                self._block()
                break
            self._unblock()
            q.advance_head()
            self.E[off] = payload_view(arena, off)
            out.append(off)
        n = len(self.E)
        self.stats.e_sum += n
        self.stats.e_high_water = max(self.stats.e_high_water, n)
        self.stats.dispatched += len(out)
        if self.debug_checks:
            self.check_pairwise()
        return out

    def _block(self) -> None:
        if self._blocked_since is None:
            self._blocked_since = self.now()
            self.stats.hol_blocks += 1

    def _unblock(self) -> None:
        if self._blocked_since is not None:
            self.stats.record_block(self.now() - self._blocked_since)
            self._blocked_since = None

    def check_pairwise(self) -> None:
        items = [(o, v) for o, v in self.E.items() if get_kind(self.arena, o) != EntryKind.NOOP]
        for i, (_, a) in enumerate(items):
            for _, b in items[i + 1:]:
                if not self.serial and not self.predicate(a, b):
                    raise SchedError("E holds a non-commuting pair")
        if self.serial and len(items) > 1:
            raise SchedError("serial mode with |E| > 1")

    # ------------------------------------------------------------------ Alg. 2

    def execute(self, off: int) -> ExecResult:
        """Run one dispatched entry up to and including its commit."""
        arena = self.arena
        hdr = read_header(arena, off)
        fences0 = arena.stats.fences
        req = self.E.get(off)
        if req is None:
            req = payload_view(arena, off)
        if hdr.state == OpState.COMPLETED:
            return ExecResult(Status.OK, b"", cost_key=req)
        if hdr.kind == EntryKind.NOOP:
            set_state(arena, off, OpState.COMPLETED)
            self._unfenced = True
            return ExecResult(Status.OK, b"")
        if hdr.kind == EntryKind.READ or self.stateless:
            locks = DelayedLocks()
            try:
                resp = self.handler(req, locks, None)
                status = Status.OK
            except Exception as e:  # noqa: BLE001 - reported to the client
                locks.release_all()
                locks = None
                resp, status = _error_payload(e), Status.APP_ERROR
                self.stats.handler_errors += 1
            set_state(arena, off, OpState.COMPLETED)
            self._unfenced = True
            if hdr.kind == EntryKind.READ:
                self.stats.reads += 1
            else:
                self.stats.handler_calls += 1
            return ExecResult(status, resp, locks, arena.stats.fences - fences0, cost_key=req)
        err = None
        for attempt in (1, 2):
            tx = self.txm.begin()
            locks = DelayedLocks()
            try:
                resp = self.handler(req, locks, tx)
            except Exception as e:  # noqa: BLE001 - one retry, then an error reply
                tx.abort()
                locks.release_all()
                self.stats.handler_errors += 1
                err = e
                continue
            tx.write_at(off, bytes((OpState.COMPLETED,)))
            tx.commit()
            self.stats.handler_calls += 1
            return ExecResult(Status.OK, resp, locks, arena.stats.fences - fences0, attempt,
                              cost_key=req)
        set_state(arena, off, OpState.COMPLETED)
        arena.fence()
        return ExecResult(Status.APP_ERROR, _error_payload(err), None,
                          arena.stats.fences - fences0, 2, cost_key=req)

    def finish(self, off: int, result: ExecResult) -> None:
        if result.locks is not None:
            result.locks.release_all()
        self.E.pop(off, None)
        set_gc_flag(self.arena, off)
        self._unfenced = True
        self.stats.completed += 1
        if get_kind(self.arena, off) != EntryKind.NOOP:
            self.on_response(off, result.status, result.payload)

    def end_tick(self) -> None:
        """One fence covers this tick's unlogged flag writes."""
        if self._unfenced:
            self._unfenced = False
            self.arena.fence()

    def run_inline(self, max_rounds: int = 1_000_000) -> int:
        """Single-threaded drive: dispatch, execute and finish until blocked."""
        done = 0
        for _ in range(max_rounds):
            batch = self.schedule_tick()
            if not batch:
                break
            for off in batch:
                self.finish(off, self.execute(off))
                done += 1
        self.end_tick()
        return done


def _error_payload(err: BaseException | None) -> bytes:
    return (type(err).__name__ if err is not None else "error").encode()
