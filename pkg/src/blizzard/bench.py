"""Desk-scale benchmarks and the failover experiment over the simulator.

All times are virtual microseconds.  A benchmark runs closed-loop clients
against a healthy cluster, measures from the first request to the last reply,
and reports one :class:`MetricsRow`.  Counters come from the leader:
fences per committed entry counts every fence the leader issued, copies per op
counts arena payload writes plus ablation copies per client request.
"""

from __future__ import annotations

import bisect
import csv
import itertools
import os
import random
import time
from dataclasses import asdict, dataclass, field, fields

from blizzard.checkers import SafetyChecker
from blizzard.libds import codec
from blizzard.logrep.entry import EntryKind
from blizzard.net.client import ClientConfig, sim_session
from blizzard.net.cluster import ClosedLoop, ClusterConfig, NodeTemplate, build_sim, quiesce
from blizzard.net.simnet import FaultEvent, NetConfig
from blizzard.sched.locks import DelayedLocks

BENCHMARKS = ("echo", "kv", "graph", "vote")


class SpecError(ValueError):
    pass


class Zipf:
    """Zipfian ranks over ``n`` items with exponent ``theta`` (any theta >= 0)."""

    def __init__(self, n: int, theta: float, rng: random.Random):
        self.rng = rng
        self.cdf = list(itertools.accumulate(1.0 / (i + 1) ** theta for i in range(n)))
        self.total = self.cdf[-1]
        # hot ranks land on scattered keys, not on 0, 1, 2, ...
        self.perm = list(range(n))
        random.Random(n * 31 + 7).shuffle(self.perm)

    def rank(self) -> int:
        return min(bisect.bisect_left(self.cdf, self.rng.random() * self.total), len(self.cdf) - 1)

    def __call__(self) -> int:
        return self.perm[self.rank()]


@dataclass
class WorkloadSpec:
    benchmark: str = "kv"
    op_count: int = 10_000
    read_fraction: float = 0.5
    key_space: int = 10_000
    distribution: str = "uniform"  # uniform | zipfian
    theta: float = 0.99
    batch_cap: int = 32
    replicas: int = 3
    seed: int = 0
    clients: int = 64
    executors: int = 4

    def validate(self) -> None:
        if self.benchmark not in BENCHMARKS:
            raise SpecError(f"benchmark must be one of {BENCHMARKS}")
        if not 0.0 <= self.read_fraction <= 1.0:
            raise SpecError("read_fraction must be in [0, 1]")
        if self.replicas < 1 or self.replicas % 2 == 0:
            raise SpecError("replicas must be odd")
        if self.distribution not in ("uniform", "zipfian"):
            raise SpecError("distribution must be uniform or zipfian")
        if self.theta < 0:
            raise SpecError("theta must be >= 0")
        if min(self.op_count, self.key_space, self.batch_cap, self.clients, self.executors) < 1:
            raise SpecError("op_count, key_space, batch_cap, clients and executors must be >= 1")


@dataclass
class Ablation:
    no_batching: bool = False
    copy: bool = False
    serial: bool = False

    @property
    def label(self) -> str:
        on = [n for n, v in (("no-batching", self.no_batching), ("copy", self.copy),
                             ("serial", self.serial)) if v]
        return "+".join(on) or "default"


# ---------------------------------------------------------------- workloads

def _keys(spec: WorkloadSpec, rng: random.Random):
    if spec.distribution == "zipfian":
        return Zipf(spec.key_space, spec.theta, rng)
    return lambda: rng.randrange(spec.key_space)


def make_source(spec: WorkloadSpec, rng: random.Random):
    """OpSource yielding ``spec.op_count`` (kind, request) pairs."""
    key = _keys(spec, rng)
    left = [spec.op_count]
    U, R = EntryKind.UPDATE, EntryKind.READ

    def source(_rng, _cid):
        if left[0] <= 0:
            return None
        left[0] -= 1
        read = rng.random() < spec.read_fraction
        b = spec.benchmark
        if b == "echo":
            return U, rng.randbytes(16)
        if b == "kv":
            k = b"key%08d" % key()
            return (R, codec.kv_get(k)) if read else (U, codec.kv_put(k, rng.randbytes(16)))
        if b == "graph":
            u = key()
            if read:
                return R, codec.graph_degree(u)
            v = key()
            if rng.random() < 0.75:
                return U, codec.graph_add(u, v, b"w")
            return U, codec.graph_del(u, v)
        if read:
            return R, codec.vote_topk()
        return U, codec.vote_up(key())
    return source


def preload_requests(spec: WorkloadSpec) -> list[bytes]:
    """Load phase applied to every replica before the clients start."""
    if spec.benchmark == "vote":
        return [codec.vote_submit(a, b"story %d" % a) for a in range(spec.key_space)]
    return []


def _service_args(spec: WorkloadSpec) -> dict:
    buckets = 1 << max(4, (spec.key_space * 2 - 1).bit_length())
    if spec.benchmark in ("kv", "graph"):
        return {"bucket_count": min(buckets, 1 << 16)}
    if spec.benchmark == "vote":
        return {"k": 8, "shards": 4, "bucket_count": min(buckets, 1 << 16)}
    return {}


def cluster_for(spec: WorkloadSpec, ablation: Ablation | None = None, *,
                election_timeout: float = 12_000.0, arena_capacity: int | None = None
                ) -> ClusterConfig:
    spec.validate()
    ab = ablation or Ablation()
    node = NodeTemplate(executors=spec.executors, serial=ab.serial, copy_mode=ab.copy,
                        batch_cap=1 if ab.no_batching else spec.batch_cap,
                        election_timeout=election_timeout,
                        heartbeat_interval=election_timeout / 6)
    return ClusterConfig(replicas=spec.replicas, seed=spec.seed, service=spec.benchmark,
                         service_args=_service_args(spec), net=NetConfig(), node=node,
                         client=ClientConfig(timeout=max(20_000.0, 2 * election_timeout)),
                         arena_capacity=arena_capacity or _arena_size(spec))


def _arena_size(spec: WorkloadSpec) -> int:
    # GC keeps the log short; the structures and the load phase dominate
    need = 4096 * spec.key_space + (4 << 20)
    return 1 << max(22, (need - 1).bit_length())


def bulk_load(sim, requests: list[bytes]) -> None:
    for n in sim.nodes.values():
        for req in requests:
            tx = n.txm.begin()
            locks = DelayedLocks()
            n.service.handle(req, locks, tx)
            tx.commit()
            locks.release_all()


# ------------------------------------------------------------------ metrics

@dataclass
class MetricsRow:
    timestamp: str
    benchmark: str
    mode: str
    replicas: int
    executors: int
    batch_cap: int
    distribution: str
    read_fraction: float
    seed: int
    ops: int
    clock: str  # "virtual" (simulated us) or "wall"
    throughput_ops_s: float
    p50_us: float
    p95_us: float
    p99_us: float
    e_mean: float
    batch_fill: float
    gc_lag: float
    fences_per_entry: float
    copies_per_op: float


CSV_FIELDS = [f.name for f in fields(MetricsRow)]


def append_csv(path, rows: list[MetricsRow]) -> None:
    """Append rows, writing the header only when the file is new or empty."""
    new = not os.path.exists(path) or os.path.getsize(path) == 0
    with open(path, "a", newline="") as f:
        w = csv.DictWriter(f, fieldnames=CSV_FIELDS)
        if new:
            w.writeheader()
        for r in rows:
            w.writerow(asdict(r))


def percentile(sorted_vals: list[float], p: float) -> float:
    if not sorted_vals:
        return 0.0
    i = min(len(sorted_vals) - 1, max(0, int(round(p / 100.0 * (len(sorted_vals) - 1)))))
    return sorted_vals[i]


@dataclass
class BenchResult:
    row: MetricsRow
    ok_ops: int
    failed_ops: int
    duration_us: float
    committed_entries: int
    leader_fences: int
    counters: dict = field(default_factory=dict)


def run_bench(spec: WorkloadSpec, ablation: Ablation | None = None, *,
              horizon: float = 1e9) -> BenchResult:
    """One closed-loop run on a healthy simulated cluster."""
    ab = ablation or Ablation()
    cfg = cluster_for(spec, ab)
    sim, _ = build_sim(cfg, trace=False)
    leader = sim.wait_leader()
    if leader is None:
        raise RuntimeError("no leader elected")
    bulk_load(sim, preload_requests(spec))
    rng = random.Random(spec.seed)
    sessions = [sim_session(sim, 1 + c, cfg.client) for c in range(spec.clients)]
    loop = ClosedLoop(sim, sessions, make_source(spec, rng), rng)

    rs, ss, ns, ar = leader.raft.stats, leader.sched.stats, leader.stats, leader.arena.stats
    base = dict(appended=rs.appended, batches=rs.batches, writes=rs.payload_writes,
                copies=rs.payload_copies, fences=ar.fences, e_sum=ss.e_sum, ticks=ss.ticks,
                commit=leader.raft.commit_index, reads=ns.read_writes)
    lag: list[int] = []

    def sample():
        if not loop.finished:
            lag.append(leader.raft.commit_index - leader.raft.first_index + 1)
            sim.call_at(sim.now() + 1_000.0, sample)

    t0 = sim.now()
    sim.call_at(t0, sample)
    loop.start()
    sim.run_until(t0 + horizon, lambda: loop.finished)
    t1 = sim.now()
    if not loop.finished:
        raise RuntimeError(f"benchmark did not finish within {horizon} virtual us")

    ok = [r for r in loop.records if r.status == 0]
    lat = sorted(r.end - r.start for r in ok)
    dur = max(t1 - t0, 1e-9)
    committed = leader.raft.commit_index - base["commit"]
    entries = rs.appended - base["appended"]
    batches = max(1, rs.batches - base["batches"])
    fences = ar.fences - base["fences"]
    requests = entries + (ns.read_writes - base["reads"])
    copies = (rs.payload_writes - base["writes"]) + (rs.payload_copies - base["copies"]) \
        + (ns.read_writes - base["reads"])
    row = MetricsRow(
        timestamp=time.strftime("%Y-%m-%dT%H:%M:%S"), benchmark=spec.benchmark, mode=ab.label,
        replicas=spec.replicas, executors=spec.executors,
        batch_cap=1 if ab.no_batching else spec.batch_cap, distribution=spec.distribution,
        read_fraction=spec.read_fraction, seed=spec.seed, ops=len(ok), clock="virtual",
        throughput_ops_s=len(ok) / dur * 1e6,
        p50_us=percentile(lat, 50), p95_us=percentile(lat, 95), p99_us=percentile(lat, 99),
        e_mean=(ss.e_sum - base["e_sum"]) / max(1, ss.ticks - base["ticks"]),
        batch_fill=entries / batches,
        gc_lag=sum(lag) / len(lag) if lag else 0.0,
        fences_per_entry=fences / max(1, committed),
        copies_per_op=copies / max(1, requests))
    return BenchResult(row, len(ok), len(loop.records) - len(ok), dur, committed, fences,
                       {"entries": entries, "requests": requests, "copies": copies,
                        "batches": batches})


# ----------------------------------------------------------------- failover

class TimedChecker(SafetyChecker):
    """Safety checker that also timestamps leadership changes and commits."""

    def __init__(self, clock=None):
        super().__init__()
        self.clock = clock
        self.leader_at: list[tuple[float, int, int]] = []
        self.first_commit: dict[int, float] = {}  # term -> first commit time (any entry)
        self.first_update: dict[int, float] = {}  # term -> first client update commit time

    def on_leader(self, node, term):
        super().on_leader(node, term)
        self.leader_at.append((self.clock(), node, term))

    def on_commit(self, node, index, term, ident):
        super().on_commit(node, index, term, ident)
        t = self.clock()
        self.first_commit.setdefault(term, t)
        if ident[0] == EntryKind.UPDATE:
            self.first_update.setdefault(term, t)


@dataclass
class FailoverReport:
    seed: int
    detect_timeout: float
    kill_at: float
    killed: int | None
    old_term: int
    detection_us: float | None  # kill -> first election started by a survivor
    election_us: float | None  # kill -> new leader
    first_commit_us: float | None  # kill -> first entry committed in a later term
    first_client_commit_us: float | None  # kill -> first client update committed in a later term
    acked_loss: int
    violations: int
    ok_ops: int
    max_reply_gap_us: float  # longest stretch after the kill with no successful reply

    def within(self, bound: float) -> bool:
        return self.first_commit_us is not None and self.first_commit_us <= bound


def run_failover(spec: WorkloadSpec, *, kill_at: float = 20_000.0,
                 detect_timeout: float = 12_000.0, kill: str = "leader",
                 horizon: float = 2e6) -> FailoverReport:
    """Kill the leader (or a follower) at ``kill_at`` virtual us into a steady workload.

    Clients keep issuing ``spec`` ops until a client update commits in a later
    term (or ``4 * detect_timeout`` passes after a follower kill), then drain.
    """
    if spec.replicas < 3:
        raise SpecError("failover needs at least 3 replicas")
    cfg = cluster_for(spec, election_timeout=detect_timeout, arena_capacity=8 << 20)
    checker = TimedChecker()
    sim, _ = build_sim(cfg, trace=False, checker=checker)
    checker.clock = sim.now
    leader = sim.wait_leader()
    if leader is None:
        raise RuntimeError("no leader elected")
    bulk_load(sim, preload_requests(spec))
    rng = random.Random(spec.seed)
    sessions = [sim_session(sim, 1 + c, cfg.client) for c in range(spec.clients)]
    loop = ClosedLoop(sim, sessions, make_source(spec, rng), rng)
    loop.start()
    t_kill = sim.now() + kill_at
    sim.run_until(t_kill)
    lead = sim.leader()
    old_term = lead.raft.current_term if lead else 0
    if kill == "leader":
        victim = lead.cfg.node_id if lead else None
    else:
        victim = next(n for n in sorted(sim.nodes) if lead is None or n != lead.cfg.node_id)
    if victim is not None:
        sim.apply_fault(FaultEvent(sim.now(), "kill", nodes=[victim]))
    base = {nid: n.raft.stats.elections for nid, n in sim.nodes.items()}

    detected = [None]

    def started():
        if detected[0] is None:
            for nid, n in sim.nodes.items():
                if n.raft.stats.elections > base.get(nid, 0):
                    detected[0] = sim.now()
        return detected[0] is not None

    def progressed():
        started()
        return any(term > old_term for term in checker.first_update) \
            or (kill != "leader" and sim.now() >= t_kill + 4 * detect_timeout)
    sim.run_until(t_kill + horizon, progressed)
    loop.exhausted = True  # stop issuing; let outstanding requests finish
    sim.run_until(t_kill + horizon, lambda: loop.finished)
    quiesce(sim, horizon)
    checker.check_acked(loop.acked)

    def since(d: dict) -> float | None:
        ts = [t for term, t in d.items() if term > old_term]
        return min(ts) - t_kill if ts else None

    new_leaders = [t for t, _, term in checker.leader_at if term > old_term]
    ends = sorted([t_kill] + [r.end for r in loop.records if r.status == 0 and r.end >= t_kill])
    gap = max((b - a for a, b in zip(ends, ends[1:])), default=0.0)
    lost = sum(1 for v in checker.violations if v.prop == "acked_loss")
    return FailoverReport(
        seed=spec.seed, detect_timeout=detect_timeout, kill_at=kill_at, killed=victim,
        old_term=old_term,
        detection_us=None if detected[0] is None else detected[0] - t_kill,
        election_us=min(new_leaders) - t_kill if new_leaders else None,
        first_commit_us=since(checker.first_commit),
        first_client_commit_us=since(checker.first_update),
        acked_loss=lost, violations=len(checker.violations),
        ok_ops=sum(1 for r in loop.records if r.status == 0), max_reply_gap_us=gap)
