"""Acceptance suite: one test per criterion, each reporting a PASS/FAIL line."""

import random
import time

from blizzard import bench as B
from blizzard import crashfuzz as CF
from blizzard.checkers import find_serial_order, history_from_run
from blizzard.libds import codec
from blizzard.libds.models import make_model
from blizzard.libds.services import make_service
from blizzard.logrep.entry import EntryKind
from blizzard.net.cluster import (ClusterConfig, NodeTemplate, op_list_source,
                                  random_fault_schedule, run_sim)
from blizzard.net.simnet import FaultEvent, NetConfig
from blizzard.patomic import TxManager
from blizzard.pheap import Arena
from blizzard.sched.locks import DelayedLocks

U, R = EntryKind.UPDATE, EntryKind.READ
MiB = 1 << 20


class Host:
    """A service on a fast arena, one transaction per update."""

    def __init__(self, name, capacity=16 * MiB, **kw):
        self.arena = Arena.create(None, capacity, mode="fast")
        self.txm = TxManager(self.arena)
        self.txm.recover()
        self.svc = make_service(name, self.arena, **kw)

    def __call__(self, req: bytes) -> bytes:
        locks = DelayedLocks()
        tx = None if self.svc.is_read(req) else self.txm.begin()
        resp = bytes(self.svc.handle(req, locks, tx))
        if tx is not None:
            tx.commit()
        locks.release_all()
        return resp


# ---------------------------------------------------------------- 1. safety

def _kv_workload(rng, n, keys=16):
    out = []
    for _ in range(n):
        k = b"k%d" % rng.randrange(keys)
        if rng.random() < 0.3:
            out.append((R, codec.kv_get(k)))
        else:
            out.append((U, codec.kv_put(k, rng.randbytes(8))))
    return out


def test_c1_raft_safety_under_faults(criterion):
    t0 = time.monotonic()
    bad, kills, drops = [], 0, 0
    seeds = 200
    for seed in range(seeds):
        rng = random.Random(seed)
        faults = random_fault_schedule(rng, 3, 300_000, max_drop=0.2)
        cfg = ClusterConfig(seed=seed, service_args={"bucket_count": 64},
                            net=NetConfig(jitter=8.0))
        res = run_sim(cfg, faults, op_list_source(_kv_workload(rng, 150)), clients=4,
                      trace=False, horizon=2e7)
        kills += res.sim.kills
        drops += res.sim.dropped
        lost = res.checker.check_acked(res.acked)
        if not res.ok or lost:
            bad.append((seed, [str(v) for v in res.checker.violations[:2]], res.problems[:2]))
    elapsed = time.monotonic() - t0
    ok = not bad and elapsed < 300
    criterion(1, ok, f"{seeds} fault schedules ({kills} kills, {drops} drops), "
                     f"{len(bad)} with violations or acked loss, {elapsed:.0f}s (< 300s)")
    assert not bad, bad[:3]
    assert elapsed < 300


# ------------------------------------------------------- 2. serializability

def _mixed_history(rng, n):
    ops = []
    for _ in range(n):
        tag = rng.choice((1, 2, 3))
        r = rng.random()
        if tag == 1:
            k = b"k%d" % rng.randrange(3)
            kind, req = ((R, codec.kv_get(k)) if r < 0.3 else
                         (U, codec.kv_del(k)) if r < 0.45 else
                         (U, codec.kv_put(k, b"%d" % rng.randrange(100))))
        elif tag == 2:
            u, v = rng.randrange(3), rng.randrange(3)
            kind, req = ((R, codec.graph_degree(u)) if r < 0.25 else
                         (R, codec.graph_attr(u, v)) if r < 0.4 else
                         (U, codec.graph_del(u, v)) if r < 0.6 else
                         (U, codec.graph_add(u, v, b"%d" % rng.randrange(10))))
        else:
            a = rng.randrange(3)
            kind, req = ((R, codec.vote_topk()) if r < 0.25 else
                         (U, codec.vote_submit(a, b"t")) if r < 0.5 else
                         (U, codec.vote_up(a)) if r < 0.8 else
                         (U, codec.vote_down(a)))
        ops.append((kind, codec.mux(tag, req)))
    return ops


def test_c2_serializability_oracle(criterion):
    args = {"bucket_count": 16}
    commutes = make_service("mixed", Arena.create(None, 4 * MiB, mode="fast"), **args).commutes
    histories, failures, total_ops, with_faults = 500, [], 0, 0
    for seed in range(histories):
        rng = random.Random(seed)
        ops = _mixed_history(rng, rng.randint(2, 8))
        faults = []
        if seed % 4 == 3:
            t = rng.uniform(100, 3_000)
            faults = [FaultEvent(t, "kill_leader"), FaultEvent(t + 20_000, "restart_all")]
            with_faults += 1
        cfg = ClusterConfig(seed=seed, service="mixed", service_args=args,
                            node=NodeTemplate(executor="shuffle"), net=NetConfig(jitter=10.0))
        res = run_sim(cfg, faults, op_list_source(ops), clients=4, trace=False)
        hist = history_from_run(res.records, res.checker.committed, res.payloads)
        total_ops += len(hist)
        if not res.ok or find_serial_order(hist, lambda: make_model("mixed"), commutes) is None:
            failures.append(seed)
    criterion(2, not failures, f"{histories} histories of <= 8 mixed ops ({total_ops} ops, "
                               f"{with_faults} with a leader kill), {len(failures)} unserializable")
    assert not failures, failures[:10]


# ---------------------------------------------------- 3. crash atomicity

def test_c3_crash_atomicity(criterion):
    summaries, bad, trials = [], 0, 0
    for svc in ("kv", "graph", "vote"):
        cfg = CF.FuzzConfig(service=svc, ops=5)
        for rep in (CF.exhaustive(cfg, seed=0), CF.seeded(cfg, range(100))):
            bad += len(rep.failures)
            trials += len(rep.trials)
            if rep.failures:
                summaries.append(rep.summary())
    criterion(3, bad == 0, f"exhaustive 5-op kv/graph/vote plus 100 seeds each: {trials} "
                           f"crash trials, {bad} failures")
    assert bad == 0, summaries


# ------------------------------------------------------------- 4. zero copy

def test_c4_zero_copy(criterion):
    spec = B.WorkloadSpec("kv", op_count=2000, key_space=256, clients=16, seed=1)
    default = B.run_bench(spec)
    copied = B.run_bench(spec, B.Ablation(copy=True))
    d, c = default.row.copies_per_op, copied.row.copies_per_op
    ok = default.counters["copies"] == default.counters["requests"] > 0 and c >= 2
    criterion(4, ok, f"copies/request {d:.3f} default (must be exactly 1), {c:.2f} with --copy")
    assert default.counters["copies"] == default.counters["requests"]
    assert c >= 2


# -------------------------------------------------------------- 5. batching

def test_c5_batching_ablation(criterion):
    spec = B.WorkloadSpec("echo", op_count=20_000, clients=256, seed=2)
    on = B.run_bench(spec).row
    off = B.run_bench(spec, B.Ablation(no_batching=True)).row
    ratio = off.fences_per_entry / on.fences_per_entry
    ok = on.throughput_ops_s > off.throughput_ops_s and ratio >= 8
    criterion(5, ok, f"echo cap 32 {on.throughput_ops_s:,.0f} vs cap 1 "
                     f"{off.throughput_ops_s:,.0f} ops/s; fences/entry {on.fences_per_entry:.3f} "
                     f"vs {off.fences_per_entry:.3f} ({ratio:.1f}x lower, need >= 8x)")
    assert on.throughput_ops_s > off.throughput_ops_s
    assert ratio >= 8


# ----------------------------------------------------------- 6. commutativity

def test_c6_commute_speedup(criterion):
    results = {}
    for name, rf, keys in (("kv", 0.5, 10_000), ("graph", 0.5, 10_000), ("vote", 0.95, 1_000)):
        spec = B.WorkloadSpec(name, op_count=6000, read_fraction=rf, key_space=keys,
                              executors=4, clients=64, seed=3)
        com = B.run_bench(spec).row.throughput_ops_s
        ser = B.run_bench(spec, B.Ablation(serial=True)).row.throughput_ops_s
        results[name] = com / ser
    ok = results["kv"] >= 1.3 and results["graph"] > 1 and results["vote"] > 1
    criterion(6, ok, "commute/serial throughput: " +
              ", ".join(f"{n} {r:.2f}x" for n, r in results.items()) +
              " (kv >= 1.3x, others > 1x)")
    assert results["kv"] >= 1.3
    assert results["graph"] > 1 and results["vote"] > 1


# --------------------------------------------------------------- 7. failover

def test_c7_failover(criterion):
    T = 12_000.0
    runs, within, lost, times = 100, 0, 0, []
    for seed in range(runs):
        spec = B.WorkloadSpec("kv", op_count=4000, key_space=256, clients=4, seed=seed)
        r = B.run_failover(spec, detect_timeout=T)
        within += r.within(4 * T)
        lost += r.acked_loss
        if r.first_commit_us is not None:
            times.append(r.first_commit_us)
    times.sort()
    ok = within >= 95 and lost == 0
    criterion(7, ok, f"{within}/{runs} runs committed within 4T = {4 * T / 1000:.0f}ms "
                     f"(median {B.percentile(times, 50) / 1000:.1f}ms, max "
                     f"{times[-1] / 1000:.1f}ms), acked loss {lost}")
    assert within >= 95
    assert lost == 0


# ------------------------------------------------------ 8. commute soundness

def _pool(name, rng):
    if name == "kv":
        keys = [b"key%02d" % i for i in range(40)]
        return [codec.kv_get(k) for k in keys] + [codec.kv_del(k) for k in keys] + \
            [codec.kv_put(k, rng.randbytes(rng.randint(1, 24))) for k in keys for _ in range(2)]
    if name == "graph":
        out = []
        for _ in range(200):
            u, v = rng.randrange(30), rng.randrange(30)
            out += [codec.graph_add(u, v, rng.randbytes(4)), codec.graph_del(u, v),
                    codec.graph_degree(u), codec.graph_attr(u, v)]
        return out
    arts = range(60)
    return [codec.vote_up(a) for a in arts] + [codec.vote_down(a) for a in arts] + \
        [codec.vote_submit(a, b"s%d" % a) for a in arts] + [codec.vote_topk()] * 20


def test_c8_commute_soundness(criterion):
    need = 10_000
    counts, diverged = {}, []
    for name, kw in (("kv", {"bucket_count": 64}), ("graph", {"bucket_count": 64}),
                     ("vote", {"k": 8, "shards": 4, "bucket_count": 64})):
        rng = random.Random(8)
        host = Host(name, capacity=8 * MiB, **kw)
        pool = _pool(name, rng)
        for req in rng.sample(pool, len(pool) // 2):
            host(req)
        checked = tried = 0
        while checked < need and tried < 50 * need:
            tried += 1
            a, b = rng.choice(pool), rng.choice(pool)
            if not host.svc.commutes(a, b):
                continue
            snap = host.arena.snapshot()
            ra = host(a)
            rb = host(b)
            state_ab = host.svc.state()
            host.arena.restore(snap)
            rb2 = host(b)
            ra2 = host(a)
            state_ba = host.svc.state()
            if (ra, rb, state_ab) != (ra2, rb2, state_ba):
                diverged.append((name, a, b))
            checked += 1
            # keep the structure moving so pairs see varied states
            if rng.random() >= 0.05:
                host.arena.restore(snap)
        counts[name] = checked
    ok = not diverged and min(counts.values()) >= need
    criterion(8, ok, "predicate-true pairs checked a;b vs b;a: " +
              ", ".join(f"{n} {c}" for n, c in counts.items()) +
              f"; {len(diverged)} divergences")
    assert min(counts.values()) >= need
    assert not diverged, diverged[:3]


# ---------------------------------------------------------------- 9. top-K

def test_c9_vote_topk(criterion):
    articles, votes, k = 10_000, 10_000, 8
    host = Host("vote", capacity=64 * MiB, k=k, shards=4, bucket_count=1 << 14)
    for a in range(articles):
        host(codec.vote_submit(a, b"story %d" % a))
    base = host.arena.snapshot()
    mismatches = []
    for seed in range(20):
        host.arena.restore(base)
        rng = random.Random(seed)
        zipf = B.Zipf(articles, 0.99, rng)
        tally = dict.fromkeys(range(articles), 0)
        for _ in range(votes):
            a = zipf()
            up = rng.random() < 0.8
            host(codec.vote_up(a) if up else codec.vote_down(a))
            tally[a] += 1 if up else -1
        oracle = sorted(tally.items(), key=lambda p: (-p[1], p[0]))[:k]
        got = codec.decode_topk(host(codec.vote_topk()))
        if got != oracle:
            mismatches.append((seed, got, oracle))
    criterion(9, not mismatches, f"TOPK vs full-sort oracle, {articles} articles, {votes} "
                                 f"zipfian votes, K={k}, S=4: {len(mismatches)}/20 mismatches")
    assert not mismatches, mismatches[:2]
