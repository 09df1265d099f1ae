"""Client library: leader discovery, retries and the two RPC calls.

:class:`ClientSession` is a transport-agnostic state machine with at most one
request in flight.  It routes to the cached leader, follows NOT_LEADER
redirects, probes every node with LeaderQuery when the leader is unknown or
silent, and retries within a budget.  Retries reuse the request id.

Final statuses: OK and APP_ERROR come from the service; RETRYABLE when the
budget ran out and the last failure was a RETRYABLE reply (replication
failed or backpressure); NO_LEADER otherwise.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

from blizzard.logrep import wire
from blizzard.logrep.entry import EntryKind
from blizzard.logrep.wire import Status


@dataclass
class ClientConfig:
    timeout: float = 20_000.0  # per attempt, virtual us in simulation
    retry_budget: int = 40
    retry_delay: float = 2_000.0  # pause after a redirect without a hint


@dataclass
class _Op:
    kind: int
    payload: bytes
    rid: int
    done: Callable[[int, bytes], None]
    attempts: int = 0
    last_fail: int = Status.NO_LEADER
    token: int = 0
    started: float = 0.0


class ClientSession:
    def __init__(self, client_id: int, nodes: list[int], *, send: Callable[[int, bytes], None],
                 now: Callable[[], float], call_at: Callable[[float, Callable[[], None]], None],
                 config: ClientConfig | None = None):
        self.client_id = client_id
        self.nodes = list(nodes)
        self.send = send
        self.now = now
        self.call_at = call_at
        self.cfg = config or ClientConfig()
        self.leader: int | None = None
        self.next_rid = 1
        self.op: _Op | None = None
        self._rr = client_id % max(1, len(self.nodes))
        self._token = 0
        self.retries = 0
        self.probes = 0

    @property
    def busy(self) -> bool:
        return self.op is not None

    def submit(self, kind: int, payload: bytes, done: Callable[[int, bytes], None]) -> int:
        if self.op is not None:
            raise RuntimeError("one request at a time per session")
        rid = self.next_rid
        self.next_rid += 1
        self.op = _Op(int(kind), bytes(payload), rid, done, started=self.now())
        self._attempt()
        return rid

    # ------------------------------------------------------------- internals

    def _target(self) -> int:
        if self.leader is not None:
            return self.leader
        self._rr = (self._rr + 1) % len(self.nodes)
        return self.nodes[self._rr]

    def _arm(self, delay: float, fn: Callable[[int], None]) -> None:
        self._token += 1
        self.op.token = tok = self._token
        self.call_at(self.now() + delay, lambda: fn(tok))

    def _attempt(self) -> None:
        op = self.op
        if op is None:
            return
        if op.attempts >= self.cfg.retry_budget:
            self._finish(Status.RETRYABLE if op.last_fail == Status.RETRYABLE else Status.NO_LEADER,
                         b"")
            return
        op.attempts += 1
        if op.attempts > 1:
            self.retries += 1
        req = wire.ClientRequest(self.client_id, op.rid, op.kind, op.payload).encode()
        self.send(self._target(), req)
        self._arm(self.cfg.timeout, self._on_timeout)

    def _probe(self) -> None:
        self.probes += 1
        q = wire.LeaderQuery(self.client_id).encode()
        for n in self.nodes:
            self.send(n, q)

    def _retry_later(self) -> None:
        self._arm(self.cfg.retry_delay, self._on_delay)

    def _on_delay(self, tok: int) -> None:
        if self.op is not None and tok == self.op.token:
            self._attempt()

    def _on_timeout(self, tok: int) -> None:
        if self.op is None or tok != self.op.token:
            return
        self.leader = None
        self.op.last_fail = Status.NO_LEADER
        self._probe()
        self._attempt()

    def _finish(self, status: int, payload: bytes) -> None:
        op, self.op = self.op, None
        self._token += 1
        op.done(status, payload)

    def on_message(self, src: int, data) -> None:
        try:
            msg = wire.decode(data)
        except Exception:  # noqa: BLE001 - garbage from the network
            return
        if isinstance(msg, wire.LeaderInfo):
            if msg.leader_hint >= 0 and msg.leader_hint != self.leader:
                self.leader = msg.leader_hint
            return
        if not isinstance(msg, wire.ClientReply) or msg.client_id != self.client_id:
            return
        op = self.op
        if op is None or msg.request_id != op.rid:
            return  # late reply to an earlier attempt
        st = msg.status
        if st in (Status.OK, Status.APP_ERROR):
            self.leader = src
            self._finish(st, bytes(msg.payload))
        elif st == Status.NOT_LEADER:
            op.last_fail = Status.NO_LEADER
            if msg.leader_hint >= 0 and msg.leader_hint != src:
                self.leader = msg.leader_hint
                self._attempt()
            else:
                self.leader = None
                self._probe()
                self._retry_later()
        else:
            op.last_fail = Status.RETRYABLE
            self._retry_later()


# --------------------------------------------------------------- blocking API

class Driver:
    """Something that can advance time until a condition holds."""

    def run_until(self, t_end=None, pred=None) -> bool:  # pragma: no cover - protocol
        raise NotImplementedError


def _call(session: ClientSession, driver, kind: int, request: bytes,
          horizon: float | None) -> tuple[int, bytes]:
    box: list = []
    session.submit(kind, request, lambda st, p: box.append((st, p)))
    t_end = None if horizon is None else session.now() + horizon
    driver.run_until(t_end, lambda: bool(box))
    if not box:
        return Status.NO_LEADER, b""
    return box[0]


def make_update_rpc(session: ClientSession, request: bytes, driver,
                    horizon: float | None = None) -> tuple[int, bytes]:
    """Replicate and execute an update; OK only after it committed and ran."""
    return _call(session, driver, EntryKind.UPDATE, request, horizon)


def make_read_rpc(session: ClientSession, request: bytes, driver,
                  horizon: float | None = None) -> tuple[int, bytes]:
    """Execute a read at the leader; never replicated."""
    return _call(session, driver, EntryKind.READ, request, horizon)


def sim_session(sim, client_id: int, config: ClientConfig | None = None) -> ClientSession:
    """A session wired to a :class:`~blizzard.net.simnet.SimNet`."""
    s = ClientSession(client_id, sorted(sim.slots), send=lambda n, d: sim.client_send(client_id, n, d),
                      now=sim.now, call_at=sim.call_at, config=config)
    sim.register_client(client_id, s)
    return s
