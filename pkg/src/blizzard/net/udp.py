"""Real-socket mode: one UDP datagram per message, wall-clock timers.

Used by ``blizzard serve`` and ``blizzard client`` for benchmarks and manual
poking; correctness suites stay on the simulator.  Datagrams larger than
``MAX_DATAGRAM`` are dropped, so keep the batch cap times the request size
below it.
"""

from __future__ import annotations

import heapq
import itertools
import os
import selectors
import socket
import threading
import time
from typing import Callable

from blizzard.logrep import wire
from blizzard.net.client import ClientConfig, ClientSession
from blizzard.node import Node, NodeConfig
from blizzard.pheap import Arena

MAX_DATAGRAM = 65_000
Addr = tuple[str, int]


def now_us() -> float:
    return time.monotonic() * 1e6


def parse_addr(text: str) -> Addr:
    host, _, port = text.rpartition(":")
    return (host or "127.0.0.1", int(port))


class _Timers:
    def __init__(self):
        self.heap: list = []
        self.seq = itertools.count()

    def call_at(self, t: float, fn: Callable[[], None]) -> None:
        heapq.heappush(self.heap, (t, next(self.seq), fn))

    def run_due(self, now: float) -> None:
        while self.heap and self.heap[0][0] <= now:
            _, _, fn = heapq.heappop(self.heap)
            fn()

    def next_at(self) -> float | None:
        return self.heap[0][0] if self.heap else None


class UdpEnv:
    def __init__(self, sock: socket.socket, peers: dict[int, Addr], timers: _Timers):
        self.sock = sock
        self.peers = peers
        self.clients: dict[int, Addr] = {}
        self.timers = timers

    def now(self) -> float:
        return now_us()

    def _sendto(self, data: bytes, addr: Addr) -> None:
        if len(data) > MAX_DATAGRAM:
            return
        try:
            self.sock.sendto(data, addr)
        except OSError:
            pass  # datagram semantics: the peer may be down

    def send_peer(self, dst: int, data: bytes) -> None:
        self._sendto(data, self.peers[dst])

    def send_client(self, client_id: int, data: bytes) -> None:
        addr = self.clients.get(client_id)
        if addr is not None:
            self._sendto(data, addr)

    def call_at(self, t: float, fn: Callable[[], None]) -> None:
        self.timers.call_at(t, fn)


class UdpServer:
    """A replica bound to ``peers[node_id]``; run :meth:`serve` in a thread or process."""

    def __init__(self, cfg: NodeConfig, peers: dict[int, Addr], arena_path: str | None = None, *,
                 arena_capacity: int = 64 << 20, arena_mode: str = "fast"):
        self.cfg = cfg
        self.peers = peers
        self.by_addr = {self._norm(a): n for n, a in peers.items()}
        self.sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        self.sock.bind(peers[cfg.node_id])
        self.sock.setblocking(False)
        if arena_path and os.path.exists(arena_path):
            arena = Arena.open(arena_path, mode=arena_mode)
        else:
            arena = Arena.create(arena_path, arena_capacity, mode=arena_mode)
        self.timers = _Timers()
        self.env = UdpEnv(self.sock, peers, self.timers)
        self.node = Node(cfg, arena, self.env)
        self.stop = threading.Event()

    @staticmethod
    def _norm(addr: Addr) -> Addr:
        return (socket.gethostbyname(addr[0]), addr[1])

    def _recv_all(self) -> int:
        n = 0
        while True:
            try:
                data, addr = self.sock.recvfrom(MAX_DATAGRAM + 1024)
            except (BlockingIOError, InterruptedError):
                return n
            except OSError:
                return n
            n += 1
            src = self.by_addr.get(addr)
            if src is not None:
                self.node.deliver_peer(src, data)
                continue
            try:
                msg = wire.decode(data)
            except Exception:  # noqa: BLE001 - garbage datagram
                continue
            cid = getattr(msg, "client_id", None)
            if cid is not None:
                self.env.clients[cid] = addr
                self.node.deliver_client(data)

    def serve(self, duration: float | None = None) -> None:
        sel = selectors.DefaultSelector()
        sel.register(self.sock, selectors.EVENT_READ)
        end = None if duration is None else time.monotonic() + duration
        try:
            while not self.stop.is_set() and (end is None or time.monotonic() < end):
                self._recv_all()
                self.timers.run_due(now_us())
                self.node.run_tick()
                busy = self.node.has_work() or not self.node.executor.idle()
                wake = min(self.node.next_wake(), self.timers.next_at() or float("inf"))
                wait = 0.0 if busy else max(0.0, min((wake - now_us()) / 1e6, 0.005))
                if wait:
                    sel.select(wait)
        finally:
            sel.close()
            self.node.close()
            self.node.arena.close()
            self.sock.close()


class UdpClient:
    """Blocking client over UDP; usable with ``make_update_rpc`` / ``make_read_rpc``."""

    def __init__(self, client_id: int, nodes: dict[int, Addr], config: ClientConfig | None = None):
        self.nodes = nodes
        self.sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        self.sock.bind(("0.0.0.0", 0))
        self.sock.settimeout(0.001)
        self.timers = _Timers()
        self.by_addr = {(socket.gethostbyname(a[0]), a[1]): n for n, a in nodes.items()}
        cfg = config or ClientConfig(timeout=200_000.0, retry_budget=20, retry_delay=20_000.0)
        self.session = ClientSession(client_id, sorted(nodes), send=self._send, now=now_us,
                                     call_at=self.timers.call_at, config=cfg)

    def _send(self, node: int, data: bytes) -> None:
        try:
            self.sock.sendto(data, self.nodes[node])
        except OSError:
            pass

    def run_until(self, t_end=None, pred=None) -> bool:
        while True:
            if pred is not None and pred():
                return True
            if t_end is not None and now_us() >= t_end:
                return pred() if pred else False
            try:
                data, addr = self.sock.recvfrom(MAX_DATAGRAM + 1024)
                self.session.on_message(self.by_addr.get(addr, -1), data)
            except (socket.timeout, BlockingIOError):
                pass
            self.timers.run_due(now_us())

    def close(self) -> None:
        self.sock.close()
