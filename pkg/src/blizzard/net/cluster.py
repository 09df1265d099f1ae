"""Cluster configuration, fault schedules, closed-loop clients and ``run_sim``.

Cluster config (TOML)::

    seed = 7
    replicas = 3
    service = "kv"                  # kv | graph | vote | echo | mixed
    [service_args]
    bucket_count = 1024
    [net]
    latency = 20.0                  # one-way virtual us
    jitter = 5.0
    client_latency = 20.0
    drop_rate = 0.0
    [node]
    executors = 4
    batch_cap = 32
    election_timeout = 12000.0
    heartbeat_interval = 2000.0
    [arena]
    capacity = 8388608
    mode = "fast"                   # fast | strict

Fault schedule (TOML), one table per event::

    [[fault]]
    time = 50000.0
    action = "kill_leader"
    [[fault]]
    time = 90000.0
    action = "partition"
    groups = [[0], [1, 2]]
"""

from __future__ import annotations

import random
import sys
from dataclasses import asdict, dataclass, field, fields
from typing import Callable

from blizzard.checkers import SafetyChecker
from blizzard.libds.models import make_model
from blizzard.logrep.entry import EntryKind
from blizzard.net.client import ClientConfig, ClientSession, sim_session
from blizzard.net.simnet import FaultEvent, NetConfig, SimNet
from blizzard.node import CostModel, NodeConfig

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


class ConfigError(ValueError):
    pass


@dataclass
class NodeTemplate:
    executors: int = 4
    executor: str = "virtual"
    serial: bool = False
    batch_cap: int = 32
    copy_mode: bool = False
    election_timeout: float = 12_000.0
    heartbeat_interval: float = 2_000.0
    log_capacity: int = 1 << 16
    queue_capacity: int = 1 << 16
    gc_retain: int = 4096
    max_inflight_entries: int = 1024
    debug_checks: bool = False


@dataclass
class ClusterConfig:
    replicas: int = 3
    seed: int = 0
    service: str = "kv"
    service_args: dict = field(default_factory=dict)
    net: NetConfig = field(default_factory=NetConfig)
    node: NodeTemplate = field(default_factory=NodeTemplate)
    client: ClientConfig = field(default_factory=ClientConfig)
    costs: CostModel = field(default_factory=CostModel)
    arena_capacity: int = 8 << 20
    arena_mode: str = "fast"

    def validate(self) -> None:
        if self.replicas < 1:
            raise ConfigError("replicas must be >= 1")
        if self.arena_mode not in ("fast", "strict"):
            raise ConfigError(f"arena mode {self.arena_mode!r}")
        if self.node.executor not in ("virtual", "inline", "shuffle"):
            raise ConfigError(f"simulated executor {self.node.executor!r}")
        if not 0.0 <= self.net.drop_rate < 1.0:
            raise ConfigError("drop_rate must be in [0, 1)")
        if self.node.batch_cap < 1 or self.node.executors < 1:
            raise ConfigError("batch_cap and executors must be >= 1")
        if self.arena_capacity < 1 << 20:
            raise ConfigError("arena capacity below 1 MiB")

    def node_configs(self) -> list[NodeConfig]:
        ids = list(range(self.replicas))
        return [NodeConfig(i, ids, self.service, dict(self.service_args), **asdict(self.node))
                for i in ids]


def _fill(cls, data: dict, where: str):
    names = {f.name for f in fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"unknown keys in [{where}]: {sorted(unknown)}")
    return cls(**data)


def cluster_config_from_dict(d: dict) -> ClusterConfig:
    d = dict(d)
    sub = {}
    for key, cls in (("net", NetConfig), ("node", NodeTemplate), ("client", ClientConfig),
                     ("costs", CostModel)):
        sub[key] = _fill(cls, d.pop(key, {}), key)
    arena = d.pop("arena", {})
    if "capacity" in arena:
        d["arena_capacity"] = arena.pop("capacity")
    if "mode" in arena:
        d["arena_mode"] = arena.pop("mode")
    if arena:
        raise ConfigError(f"unknown keys in [arena]: {sorted(arena)}")
    cfg = _fill(ClusterConfig, {**d, **sub}, "cluster")
    cfg.validate()
    return cfg


def load_cluster_config(path) -> ClusterConfig:
    with open(path, "rb") as f:
        return cluster_config_from_dict(tomllib.load(f))


def faults_from_list(items: list[dict]) -> list[FaultEvent]:
    try:
        out = [FaultEvent(**it) for it in items]
    except (TypeError, ValueError) as e:
        raise ConfigError(f"bad fault event: {e}") from None
    return sorted(out, key=lambda e: e.time)


def load_fault_schedule(path) -> list[FaultEvent]:
    with open(path, "rb") as f:
        return faults_from_list(tomllib.load(f).get("fault", []))


def random_fault_schedule(rng: random.Random, replicas: int, duration: float, *,
                          mean_gap: float = 25_000.0, max_drop: float = 0.2) -> list[FaultEvent]:
    """Leader kills, restarts, partitions and drop bursts, then a full heal at ``duration``."""
    t = 0.0
    out: list[FaultEvent] = []
    ids = list(range(replicas))
    while True:
        t += rng.expovariate(1.0 / mean_gap)
        if t >= duration:
            break
        r = rng.random()
        if r < 0.25:
            out.append(FaultEvent(t, "kill_leader"))
            out.append(FaultEvent(t + rng.uniform(5_000, 40_000), "restart_all"))
        elif r < 0.35:
            n = rng.choice(ids)
            out.append(FaultEvent(t, "kill", nodes=[n]))
            out.append(FaultEvent(t + rng.uniform(5_000, 40_000), "restart", nodes=[n]))
        elif r < 0.55:
            shuffled = ids[:]
            rng.shuffle(shuffled)
            cut = rng.randint(1, max(1, replicas - 1))
            out.append(FaultEvent(t, "partition", groups=[shuffled[:cut], shuffled[cut:]]))
            out.append(FaultEvent(t + rng.uniform(10_000, 50_000), "heal"))
        elif r < 0.7:
            out.append(FaultEvent(t, "isolate_leader"))
            out.append(FaultEvent(t + rng.uniform(10_000, 50_000), "heal"))
        else:
            out.append(FaultEvent(t, "drops", rate=rng.uniform(0.0, max_drop)))
            out.append(FaultEvent(t + rng.uniform(10_000, 50_000), "drops", rate=0.0))
    out += [FaultEvent(duration, "heal"), FaultEvent(duration, "drops", rate=0.0),
            FaultEvent(duration, "restart_all")]
    return sorted((e for e in out if e.time <= duration), key=lambda e: e.time)


# ------------------------------------------------------------------ clients

@dataclass
class OpRecord:
    client: int
    rid: int
    kind: int
    request: bytes
    status: int
    response: bytes
    start: float
    end: float

    @property
    def is_update(self) -> bool:
        return self.kind == EntryKind.UPDATE


OpSource = Callable[[random.Random, int], "tuple[int, bytes] | None"]


class ClosedLoop:
    """Each session keeps one request outstanding, pulling the next from ``source``."""

    def __init__(self, sim: SimNet, sessions: list[ClientSession], source: OpSource,
                 rng: random.Random, think: float = 0.0):
        self.sim = sim
        self.sessions = sessions
        self.source = source
        self.rng = rng
        self.think = think
        self.records: list[OpRecord] = []
        self.payloads: dict[tuple[int, int], bytes] = {}
        self.acked: set[tuple] = set()
        self.active = 0
        self.exhausted = False

    def start(self) -> None:
        for s in self.sessions:
            self._next(s)

    def _next(self, s: ClientSession) -> None:
        op = None if self.exhausted else self.source(self.rng, s.client_id)
        if op is None:
            self.exhausted = True
            return
        kind, payload = op
        start = self.sim.now()
        self.active += 1
        holder = {}

        def done(status, resp, s=s, kind=kind, payload=payload, start=start):
            self.active -= 1
            rid = holder["rid"]
            self.records.append(OpRecord(s.client_id, rid, kind, payload, status, resp, start,
                                         self.sim.now()))
            if status == 0 and kind == EntryKind.UPDATE:
                self.acked.add((EntryKind.UPDATE, s.client_id, rid))
            if self.think:
                self.sim.call_at(self.sim.now() + self.think, lambda: self._next(s))
            else:
                self._next(s)

        holder["rid"] = s.next_rid
        if kind == EntryKind.UPDATE:
            self.payloads[(s.client_id, s.next_rid)] = bytes(payload)
        s.submit(kind, payload, done)

    @property
    def finished(self) -> bool:
        return self.exhausted and self.active == 0


def op_list_source(ops: list[tuple[int, bytes]]) -> OpSource:
    it = iter(ops)
    return lambda rng, cid: next(it, None)


# --------------------------------------------------------------------- runs

@dataclass
class SimResult:
    sim: SimNet
    checker: SafetyChecker
    records: list[OpRecord]
    payloads: dict
    acked: set
    converged: bool
    problems: list[str]
    digest: int

    @property
    def ok(self) -> bool:
        return self.checker.ok and not self.problems

    @property
    def trace(self):
        return self.sim.trace


def build_sim(cfg: ClusterConfig, *, trace: bool = True,
              checker: SafetyChecker | None = None) -> tuple[SimNet, SafetyChecker]:
    cfg.validate()
    checker = checker if checker is not None else SafetyChecker()
    sim = SimNet(cfg.node_configs(), net=cfg.net, seed=cfg.seed, arena_capacity=cfg.arena_capacity,
                 arena_mode=cfg.arena_mode, observer=checker, costs=cfg.costs, trace=trace)

    def lookup(nid):
        n = sim.node(nid)
        return n.raft if n is not None else None

    checker.lookup = lookup
    return sim, checker


def quiesce(sim: SimNet, horizon: float) -> bool:
    """Run until a ready leader exists and every live node applied its whole log."""
    def settled():
        lead = sim.leader()
        if lead is None or not lead.raft.ready:
            return False
        last = lead.raft.last_index
        for n in sim.nodes.values():
            if n.raft.commit_index != last or n.raft.last_index != last:
                return False
            if n.q.head != n.q.end or n.sched.E:
                return False
        return True
    return sim.run_until(sim.now() + horizon, settled)


def replay_state(service_name: str, service_args: dict, checker: SafetyChecker, payloads: dict):
    """Reference model state after applying the committed updates in log order."""
    model = make_model(service_name, **service_args)
    for idx in sorted(checker.committed):
        _, (kind, cid, rid) = checker.committed[idx]
        if kind == EntryKind.UPDATE:
            model.apply(payloads[(cid, rid)])
    return model.state()


def run_sim(cfg: ClusterConfig, faults: list[FaultEvent] | None = None,
            source: OpSource | None = None, *, clients: int = 4, think: float = 0.0,
            horizon: float = 5e6,
            settle: float = 2e6, trace: bool = True, check_state: bool = True) -> SimResult:
    """Run a workload under a fault schedule and check safety over the result."""
    sim, checker = build_sim(cfg, trace=trace)
    rng = random.Random(cfg.seed ^ 0x5EED)
    sessions = [sim_session(sim, 1 + c, cfg.client) for c in range(clients)]
    loop = ClosedLoop(sim, sessions, source or (lambda r, c: None), rng, think)
    faults = faults or []
    sim.schedule(faults)
    loop.start()
    last_fault = max((f.time for f in faults), default=0.0)
    sim.run_until(horizon, lambda: loop.finished and sim.now() >= last_fault)
    problems = []
    if not loop.finished:
        problems.append(f"workload unfinished at t={sim.now():.0f}")
    converged = quiesce(sim, settle)
    if not converged:
        problems.append("cluster did not converge after the last fault")
    checker.check_logs({nid: n.raft.log_entries() for nid, n in sim.nodes.items()})
    checker.check_acked(loop.acked)
    if check_state and converged:
        want = replay_state(cfg.service, cfg.service_args, checker, loop.payloads)
        for nid, n in sim.nodes.items():
            got = n.service.state() if hasattr(n.service, "state") else None
            if got != want:
                problems.append(f"node {nid} state differs from committed-log replay")
    return SimResult(sim, checker, loop.records, loop.payloads, loop.acked, converged, problems,
                     sim.digest)
