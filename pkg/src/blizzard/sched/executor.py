"""Executor pools driving :meth:`Scheduler.execute` / :meth:`Scheduler.finish`.

``InlineExecutor`` runs and finishes immediately.  ``ThreadedExecutor`` runs
handlers on OS threads and hands completions back to the scheduler loop.
``VirtualExecutor`` runs the handler at dispatch (handlers only see committed
state of commuting peers, so running them early is equivalent) and charges
its cost to one of ``workers`` simulated cores; the completion, lock release
and reply happen at the virtual finish time.
"""

from __future__ import annotations

import queue
import random
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable

from blizzard.sched.scheduler import ExecResult, Scheduler


@dataclass
class ExecCosts:
    fence: float = 0.3  # virtual us per fence inside a transaction


class InlineExecutor:
    def __init__(self, sched: Scheduler):
        self.sched = sched

    def submit(self, off: int) -> ExecResult:
        res = self.sched.execute(off)
        self.sched.finish(off, res)
        return res

    def drain(self) -> int:
        return 0

    def idle(self) -> bool:
        return True


class ShuffleExecutor:
    """Inline executor that runs each dispatch round in a seeded random order.

    Every round is a set of pairwise-commuting entries, so any order is
    legal; shuffling makes execution order differ from log order on purpose.
    """

    def __init__(self, sched: Scheduler, rng: random.Random):
        self.sched = sched
        self.rng = rng
        self.batch: list[int] = []

    def submit(self, off: int) -> None:
        self.batch.append(off)

    def flush(self) -> int:
        batch, self.batch = self.batch, []
        self.rng.shuffle(batch)
        fences = 0
        for off in batch:
            res = self.sched.execute(off)
            fences += res.fences
            self.sched.finish(off, res)
        return fences

    def idle(self) -> bool:
        return not self.batch


class ThreadedExecutor:
    def __init__(self, sched: Scheduler, workers: int = 4):
        self.sched = sched
        self.pool = ThreadPoolExecutor(max_workers=workers, thread_name_prefix="blz-exec")
        self.done: queue.Queue = queue.Queue()
        self.inflight = 0
        self._lock = threading.Lock()

    def _run(self, off: int) -> None:
        try:
            res = self.sched.execute(off)
        except BaseException as e:  # surfaced on the loop thread
            res = e
        self.done.put((off, res))

    def submit(self, off: int) -> None:
        with self._lock:
            self.inflight += 1
        self.pool.submit(self._run, off)

    def drain(self, block: bool = False, timeout: float | None = None) -> int:
        n = 0
        while True:
            try:
                off, res = self.done.get(block=block and n == 0, timeout=timeout)
            except queue.Empty:
                return n
            with self._lock:
                self.inflight -= 1
            if isinstance(res, BaseException):
                raise res
            self.sched.finish(off, res)
            n += 1

    def idle(self) -> bool:
        return self.inflight == 0

    def shutdown(self) -> None:
        self.pool.shutdown(wait=True)


class VirtualExecutor:
    def __init__(self, sched: Scheduler, workers: int, *, cost: Callable[[object], float],
                 call_at: Callable[[float, Callable[[], None]], None],
                 on_done: Callable[[int, ExecResult], None], costs: ExecCosts | None = None):
        self.sched = sched
        self.free_at = [0.0] * workers
        self.cost = cost
        self.call_at = call_at
        self.on_done = on_done
        self.costs = costs or ExecCosts()
        self.inflight = 0
        self.busy_time = 0.0

    def submit(self, off: int, now: float) -> ExecResult:
        res = self.sched.execute(off)
        w = min(range(len(self.free_at)), key=self.free_at.__getitem__)
        start = max(now, self.free_at[w])
        held = res.locks.held if res.locks is not None else ()
        for lock in held:
            start = max(start, getattr(lock, "busy_until", 0.0))
        dur = self.cost(res.cost_key) + self.costs.fence * res.fences
        end = start + dur
        self.free_at[w] = end
        for lock in held:
            if hasattr(lock, "busy_until"):
                lock.busy_until = end
        self.busy_time += dur
        self.inflight += 1

        def done():
            self.inflight -= 1
            self.on_done(off, res)

        self.call_at(end, done)
        return res

    def idle(self) -> bool:
        return self.inflight == 0

    def reset(self) -> None:
        self.free_at = [0.0] * len(self.free_at)
        self.inflight = 0
