"""Command line: ``blizzard {bench,failover,crashfuzz,sim,serve,client}``."""

from __future__ import annotations

import argparse
import json
import shlex
import sys
from dataclasses import asdict

from blizzard import bench as B
from blizzard import crashfuzz as CF
from blizzard.libds import codec
from blizzard.logrep.entry import EntryKind
from blizzard.logrep.wire import Status


def _workload_args(p: argparse.ArgumentParser, benchmark: str = "kv") -> None:
    p.add_argument("--benchmark", choices=B.BENCHMARKS, default=benchmark)
    p.add_argument("--ops", type=int, default=10_000, help="client operations")
    p.add_argument("--read-fraction", type=float, default=None,
                   help="default 0.5; 0.95 for vote; ignored by echo")
    p.add_argument("--keys", type=int, default=10_000, help="key / vertex / article space")
    p.add_argument("--distribution", choices=("uniform", "zipfian"), default="uniform")
    p.add_argument("--theta", type=float, default=0.99, help="zipfian exponent")
    p.add_argument("--batch-cap", type=int, default=32)
    p.add_argument("--replicas", type=int, default=3)
    p.add_argument("--clients", type=int, default=64, help="closed-loop client sessions")
    p.add_argument("--executors", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)


def _spec(a) -> B.WorkloadSpec:
    rf = a.read_fraction
    if rf is None:
        rf = 0.95 if a.benchmark == "vote" else 0.5
    spec = B.WorkloadSpec(a.benchmark, a.ops, rf, a.keys, a.distribution, a.theta, a.batch_cap,
                          a.replicas, a.seed, a.clients, a.executors)
    spec.validate()
    return spec


def cmd_bench(a) -> int:
    spec = _spec(a)
    ab = B.Ablation(no_batching=a.no_batching, copy=a.copy, serial=a.serial)
    res = B.run_bench(spec, ab)
    row = res.row
    print(f"{row.benchmark} [{row.mode}] {row.ops} ops  {row.throughput_ops_s:,.0f} ops/s (virtual)  "
          f"p50/p95/p99 {row.p50_us:.1f}/{row.p95_us:.1f}/{row.p99_us:.1f} us")
    print(f"  |E| mean {row.e_mean:.2f}  batch fill {row.batch_fill:.1f}  gc lag {row.gc_lag:.0f}  "
          f"fences/entry {row.fences_per_entry:.2f}  copies/op {row.copies_per_op:.2f}")
    if a.csv:
        B.append_csv(a.csv, [row])
    return 0


def cmd_failover(a) -> int:
    spec = _spec(a)
    bound = 4 * a.detect_timeout
    within = lost = 0
    for i in range(a.runs):
        spec.seed = a.seed + i
        r = B.run_failover(spec, kill_at=a.kill_at, detect_timeout=a.detect_timeout, kill=a.kill)
        within += r.within(bound)
        lost += r.acked_loss
        if a.json:
            print(json.dumps(asdict(r)))
        else:
            fmt = lambda v: "-" if v is None else f"{v / 1000:.1f}ms"  # noqa: E731
            print(f"seed {r.seed}: killed {r.killed} (term {r.old_term})  detect {fmt(r.detection_us)}  "
                  f"elect {fmt(r.election_us)}  commit {fmt(r.first_commit_us)}  "
                  f"client commit {fmt(r.first_client_commit_us)}  max reply gap "
                  f"{fmt(r.max_reply_gap_us)}  acked loss {r.acked_loss}")
    if a.kill == "leader":
        print(f"{within}/{a.runs} runs committed within 4T = {bound / 1000:.1f}ms; "
              f"acked loss {lost}")
    return 0 if lost == 0 else 1


def cmd_crashfuzz(a) -> int:
    bad = 0
    for svc in a.service:
        cfg = CF.FuzzConfig(service=svc, ops=a.ops, skip_undo_fence=a.skip_undo_fence)
        if a.exhaustive:
            rep = CF.exhaustive(cfg, seed=a.seed)
            print("exhaustive", rep.summary())
            bad += len(rep.failures)
        if a.seeds:
            rep = CF.seeded(cfg, range(a.seed, a.seed + a.seeds))
            print("seeded    ", rep.summary())
            bad += len(rep.failures)
    return 1 if bad else 0


def cmd_sim(a) -> int:
    from blizzard.net.cluster import load_cluster_config, load_fault_schedule, run_sim
    cfg = load_cluster_config(a.config) if a.config else None
    if cfg is None:
        from blizzard.net.cluster import ClusterConfig
        cfg = ClusterConfig(service_args={"bucket_count": 1024})
    if a.seed is not None:
        cfg.seed = a.seed
    faults = load_fault_schedule(a.faults) if a.faults else []
    import random
    spec = B.WorkloadSpec(cfg.service if cfg.service in B.BENCHMARKS else "kv", a.ops, 0.3,
                          key_space=64, seed=cfg.seed)
    source = B.make_source(spec, random.Random(cfg.seed))
    res = run_sim(cfg, faults, source, clients=a.clients, think=a.think)
    print(f"digest {res.digest:08x}  commits {res.checker.commits}  acked {len(res.acked)}  "
          f"converged {res.converged}")
    for v in res.checker.violations:
        print("VIOLATION", v)
    for p in res.problems:
        print("PROBLEM", p)
    print("ok" if res.ok else "FAILED")
    return 0 if res.ok else 1


def _peers(text: str):
    from blizzard.net.udp import parse_addr
    return {i: parse_addr(s) for i, s in enumerate(text.split(","))}


def cmd_serve(a) -> int:
    from blizzard.net.udp import UdpServer
    from blizzard.node import NodeConfig
    peers = _peers(a.peers)
    args = json.loads(a.service_args) if a.service_args else {}
    cfg = NodeConfig(a.id, sorted(peers), a.service, args, executors=a.executors,
                     executor="threaded", serial=a.serial, batch_cap=a.batch_cap,
                     copy_mode=a.copy, election_timeout=a.election_timeout,
                     heartbeat_interval=a.election_timeout / 6)
    srv = UdpServer(cfg, peers, a.arena, arena_capacity=a.capacity, arena_mode=a.mode)
    print(f"node {a.id} serving {a.service} on {peers[a.id][0]}:{peers[a.id][1]}", flush=True)
    try:
        srv.serve(a.duration)
    except KeyboardInterrupt:
        pass
    return 0


def parse_command(words: list[str]) -> tuple[int, bytes, str]:
    """Client command -> (entry kind, request, service)."""
    U, R = EntryKind.UPDATE, EntryKind.READ
    op, args = words[0].lower(), words[1:]
    enc = lambda s: s.encode()  # noqa: E731
    table = {
        "get": lambda: (R, codec.kv_get(enc(args[0])), "kv"),
        "put": lambda: (U, codec.kv_put(enc(args[0]), enc(" ".join(args[1:]))), "kv"),
        "del": lambda: (U, codec.kv_del(enc(args[0])), "kv"),
        "add": lambda: (U, codec.graph_add(int(args[0]), int(args[1]),
                                           enc(" ".join(args[2:]))), "graph"),
        "deledge": lambda: (U, codec.graph_del(int(args[0]), int(args[1])), "graph"),
        "degree": lambda: (R, codec.graph_degree(int(args[0])), "graph"),
        "attr": lambda: (R, codec.graph_attr(int(args[0]), int(args[1])), "graph"),
        "submit": lambda: (U, codec.vote_submit(int(args[0]), enc(" ".join(args[1:]))), "vote"),
        "up": lambda: (U, codec.vote_up(int(args[0])), "vote"),
        "down": lambda: (U, codec.vote_down(int(args[0])), "vote"),
        "topk": lambda: (R, codec.vote_topk(), "vote"),
        "echo": lambda: (U, enc(" ".join(args)), "echo"),
    }
    if op not in table:
        raise ValueError(f"unknown command {op!r}; try one of {sorted(table)}")
    try:
        return table[op]()
    except (IndexError, ValueError) as e:
        raise ValueError(f"bad arguments for {op}: {e}") from None


def describe_response(service: str, payload: bytes) -> str:
    if not payload:
        return "(empty)"
    if service == "kv":
        st, v = codec.decode_kv_response(payload)
        return f"{st.name} {v!r}" if v else st.name
    if service == "vote" and len(payload) > 1:
        return " ".join(f"{a}:{c}" for a, c in codec.decode_topk(payload))
    if service == "vote":
        return codec.VoteStatus(payload[0]).name
    if service == "graph":
        return f"{codec.GraphStatus(payload[0]).name} {payload[1:]!r}"
    return repr(payload)


def cmd_client(a) -> int:
    from blizzard.net.client import make_read_rpc, make_update_rpc
    from blizzard.net.udp import UdpClient
    cli = UdpClient(a.client_id, _peers(a.peers))
    lines = [" ".join(a.command)] if a.command else (ln for ln in sys.stdin)
    rc = 0
    try:
        for line in lines:
            words = shlex.split(line)
            if not words:
                continue
            try:
                kind, req, svc = parse_command(words)
            except ValueError as e:
                print(e, file=sys.stderr)
                rc = 2
                continue
            rpc = make_update_rpc if kind == EntryKind.UPDATE else make_read_rpc
            st, payload = rpc(cli.session, req, cli, horizon=a.timeout * 1e6)
            print(Status(st).name, describe_response(svc, payload) if st == Status.OK else "")
            rc = rc or (0 if st == Status.OK else 1)
    finally:
        cli.close()
    return rc


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="blizzard", description=__doc__)
    sub = ap.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("bench", help="run a benchmark on the simulated cluster")
    _workload_args(p)
    p.add_argument("--no-batching", action="store_true", help="batch cap 1")
    p.add_argument("--copy", action="store_true", help="copy payloads at log append and send")
    mode = p.add_mutually_exclusive_group()
    mode.add_argument("--serial", action="store_true", help="treat every pair as conflicting")
    mode.add_argument("--commute", action="store_true", help="use the commute predicate (default)")
    p.add_argument("--csv", help="append a metrics row to this CSV file")
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("failover", help="kill the leader mid-workload and time the recovery")
    _workload_args(p)
    p.set_defaults(ops=10 ** 9, clients=8, keys=1000)
    p.add_argument("--kill-at", type=float, default=20_000.0, help="virtual us after start")
    p.add_argument("--detect-timeout", type=float, default=12_000.0,
                   help="election timeout T in virtual us")
    p.add_argument("--kill", choices=("leader", "follower"), default="leader")
    p.add_argument("--runs", type=int, default=1)
    p.add_argument("--json", action="store_true")
    p.set_defaults(fn=cmd_failover)

    p = sub.add_parser("crashfuzz", help="crash-point fuzzing over a strict arena")
    p.add_argument("--service", nargs="+", choices=("kv", "graph", "vote"), default=["kv"])
    p.add_argument("--ops", type=int, default=5)
    p.add_argument("--seeds", type=int, default=100, help="randomized seeds (0 to skip)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--exhaustive", action="store_true", help="every crash point of one sequence")
    p.add_argument("--skip-undo-fence", action="store_true",
                   help="broken build that must produce violations")
    p.set_defaults(fn=cmd_crashfuzz)

    p = sub.add_parser("sim", help="simulated cluster from TOML with a fault schedule")
    p.add_argument("--config", help="cluster TOML")
    p.add_argument("--faults", help="fault schedule TOML")
    p.add_argument("--ops", type=int, default=500)
    p.add_argument("--clients", type=int, default=4)
    p.add_argument("--think", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(fn=cmd_sim)

    p = sub.add_parser("serve", help="run one replica over UDP")
    p.add_argument("--id", type=int, required=True)
    p.add_argument("--peers", required=True, help="host:port,host:port,... indexed by node id")
    p.add_argument("--service", choices=("kv", "graph", "vote", "echo"), default="kv")
    p.add_argument("--service-args", help='JSON, e.g. {"bucket_count": 4096}')
    p.add_argument("--arena", help="arena file (created if missing); in-memory if omitted")
    p.add_argument("--capacity", type=int, default=64 << 20)
    p.add_argument("--mode", choices=("fast", "strict"), default="fast")
    p.add_argument("--executors", type=int, default=4)
    p.add_argument("--batch-cap", type=int, default=32)
    p.add_argument("--serial", action="store_true")
    p.add_argument("--copy", action="store_true")
    p.add_argument("--election-timeout", type=float, default=150_000.0, help="wall us")
    p.add_argument("--duration", type=float, default=None, help="seconds, default forever")
    p.set_defaults(fn=cmd_serve)

    p = sub.add_parser("client", help="send requests to a UDP cluster")
    p.add_argument("--peers", required=True)
    p.add_argument("--client-id", type=int, default=1)
    p.add_argument("--timeout", type=float, default=5.0, help="seconds per request")
    p.add_argument("command", nargs="*", help="e.g. put k v; reads stdin lines if omitted")
    p.set_defaults(fn=cmd_client)
    return ap


def main(argv: list[str] | None = None) -> int:
    ap = build_parser()
    a = ap.parse_args(argv)
    try:
        return a.fn(a)
    except B.SpecError as e:
        ap.error(str(e))
    return 2


if __name__ == "__main__":
    sys.exit(main())
