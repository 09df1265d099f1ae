"""User locks and the delayed-release wrapper handed to handlers.

Handlers acquire locks through :class:`DelayedLocks`; the runtime releases
them in acquisition order after the owning transaction commits.  Which lock
class a service gets depends on how operations execute:

* ``threading``: real mutexes, executors are OS threads;
* ``virtual``: simulated executors; a lock only remembers until when it is
  held in virtual time, and execution start is pushed past that point;
* ``plain``: single-threaded execution, locks only check pairing.
"""

from __future__ import annotations

import threading


class LockError(RuntimeError):
    pass


class PlainLock:
    __slots__ = ("held",)

    def __init__(self):
        self.held = False

    def acquire(self) -> None:
        if self.held:
            raise LockError("plain lock acquired twice (self-deadlock)")
        self.held = True

    def release(self) -> None:
        if not self.held:
            raise LockError("release of an unheld lock")
        self.held = False


class VirtualLock:
    """Holds no thread; records the virtual time it becomes free.

    Handlers of simulated executors run back to back on one thread, so
    several owners may hold the lock at once in real time; the virtual
    executor orders them through ``busy_until`` instead.
    """

    __slots__ = ("busy_until", "holders")

    def __init__(self):
        self.busy_until = 0.0
        self.holders = 0

    def acquire(self) -> None:
        self.holders += 1

    def release(self) -> None:
        if self.holders <= 0:
            raise LockError("release of an unheld lock")
        self.holders -= 1


class LockProvider:
    kind = "plain"

    def new_lock(self):
        return PlainLock()


class ThreadLockProvider(LockProvider):
    kind = "threading"

    def new_lock(self):
        return threading.Lock()


class VirtualLockProvider(LockProvider):
    kind = "virtual"

    def new_lock(self):
        return VirtualLock()


def make_provider(kind: str) -> LockProvider:
    return {"plain": LockProvider, "threading": ThreadLockProvider,
            "virtual": VirtualLockProvider}[kind]()


class LockTable:
    """Lazily created locks keyed by id (bucket, vertex, shard...)."""

    def __init__(self, provider: LockProvider):
        self.provider = provider
        self._locks: dict = {}
        self._guard = threading.Lock()

    def get(self, key):
        lock = self._locks.get(key)
        if lock is None:
            with self._guard:
                lock = self._locks.setdefault(key, self.provider.new_lock())
        return lock


class DelayedLocks:
    """The ``vector<Lock>*`` of a handler: released once, after commit."""

    def __init__(self):
        self.held: list = []
        self._released = False

    def acquire(self, lock) -> None:
        lock.acquire()
        self.held.append(lock)

    def acquire_all(self, locks) -> None:
        for lock in locks:
            self.acquire(lock)

    def release_all(self) -> None:
        if self._released:
            raise LockError("delayed locks released twice")
        self._released = True
        for lock in self.held:
            lock.release()

    def __len__(self) -> int:
        return len(self.held)
