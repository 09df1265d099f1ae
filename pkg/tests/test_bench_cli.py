import csv
import random
import socket
import threading
from collections import Counter

import pytest

from blizzard import bench as B
from blizzard.cli import build_parser, describe_response, main, parse_command
from blizzard.libds import codec
from blizzard.logrep.entry import EntryKind


@pytest.mark.parametrize("kw", [
    {"benchmark": "nope"}, {"read_fraction": 1.5}, {"replicas": 2}, {"distribution": "normal"},
    {"theta": -1.0}, {"op_count": 0}, {"batch_cap": 0}, {"executors": 0},
])
def test_spec_validation(kw):
    with pytest.raises(B.SpecError):
        B.WorkloadSpec(**kw).validate()


def test_zipf_rank_zero_most_frequent():
    z = B.Zipf(100, 0.99, random.Random(1))
    ranks = Counter(z.rank() for _ in range(20_000))
    assert ranks.most_common(1)[0][0] == 0
    assert ranks[0] > ranks[1] > ranks[10]
    assert all(0 <= k < 100 for k in (z() for _ in range(1000)))


def test_zipf_theta_zero_is_uniform():
    z = B.Zipf(10, 0.0, random.Random(2))
    counts = Counter(z.rank() for _ in range(20_000))
    assert max(counts.values()) / min(counts.values()) < 1.2


def test_percentile():
    vals = list(range(101))
    assert B.percentile(vals, 50) == 50
    assert B.percentile(vals, 99) == 99
    assert B.percentile([], 50) == 0.0
    assert B.percentile([7.0], 95) == 7.0


def test_source_respects_op_count_and_mix():
    spec = B.WorkloadSpec("kv", op_count=1000, read_fraction=0.3, key_space=50)
    src = B.make_source(spec, random.Random(0))
    ops = []
    while (op := src(None, 1)) is not None:
        ops.append(op)
    assert len(ops) == 1000
    reads = sum(k == EntryKind.READ for k, _ in ops)
    assert 220 < reads < 380


def test_ablation_labels():
    assert B.Ablation().label == "default"
    assert B.Ablation(no_batching=True, copy=True).label == "no-batching+copy"


def _row(**kw):
    base = {f: 0 for f in B.CSV_FIELDS}
    base.update(timestamp="t", benchmark="kv", mode="default", distribution="uniform",
                clock="virtual")
    base.update(kw)
    return B.MetricsRow(**base)


def test_csv_header_written_once(tmp_path):
    path = tmp_path / "m.csv"
    B.append_csv(path, [_row(seed=1)])
    B.append_csv(path, [_row(seed=2), _row(seed=3)])
    lines = path.read_text().splitlines()
    assert lines[0].split(",") == B.CSV_FIELDS
    assert sum(ln.startswith("timestamp") for ln in lines) == 1
    rows = list(csv.DictReader(path.open()))
    assert [r["seed"] for r in rows] == ["1", "2", "3"]


@pytest.mark.parametrize("benchmark", ["echo", "kv", "graph", "vote"])
def test_small_bench_runs(benchmark):
    spec = B.WorkloadSpec(benchmark, op_count=300, key_space=64, clients=8, seed=1)
    res = B.run_bench(spec)
    assert res.failed_ops == 0 and res.ok_ops == 300
    assert res.row.throughput_ops_s > 0
    assert res.row.p50_us <= res.row.p95_us <= res.row.p99_us
    assert res.row.clock == "virtual"


def test_copy_ablation_counts_copies():
    spec = B.WorkloadSpec("kv", op_count=400, key_space=64, clients=8, read_fraction=0.0)
    assert B.run_bench(spec).row.copies_per_op == pytest.approx(1.0)
    assert B.run_bench(spec, B.Ablation(copy=True)).row.copies_per_op >= 2.0


def test_follower_kill_does_not_interrupt():
    spec = B.WorkloadSpec("kv", op_count=3000, key_space=64, clients=4, seed=3)
    r = B.run_failover(spec, kill="follower")
    assert r.acked_loss == 0 and r.violations == 0
    assert r.election_us is None  # the leader kept its term
    assert r.max_reply_gap_us < r.detect_timeout


def test_leader_failover_report():
    spec = B.WorkloadSpec("kv", op_count=3000, key_space=64, clients=4, seed=4)
    r = B.run_failover(spec)
    assert r.killed is not None
    assert r.acked_loss == 0 and r.violations == 0
    assert r.detection_us <= r.election_us <= r.first_commit_us
    assert r.within(4 * r.detect_timeout)


def test_failover_needs_three_replicas():
    with pytest.raises(B.SpecError):
        B.run_failover(B.WorkloadSpec(replicas=1))


# ---------------------------------------------------------------------- CLI

def test_cli_bench_appends_csv(tmp_path, capsys):
    path = tmp_path / "out.csv"
    argv = ["bench", "--benchmark", "kv", "--ops", "200", "--keys", "32", "--clients", "4",
            "--csv", str(path)]
    assert main(argv) == 0
    assert main(argv + ["--serial"]) == 0
    out = capsys.readouterr().out
    assert "ops/s" in out and "copies/op" in out
    rows = list(csv.DictReader(path.open()))
    assert [r["mode"] for r in rows] == ["default", "serial"]


def test_cli_crashfuzz_and_sim(capsys):
    assert main(["crashfuzz", "--service", "kv", "--seeds", "3"]) == 0
    assert main(["sim", "--ops", "100", "--seed", "2"]) == 0
    out = capsys.readouterr().out
    assert "0 failed" in out and out.rstrip().endswith("ok")


def test_cli_sim_with_toml(tmp_path, capsys):
    cfg = tmp_path / "c.toml"
    cfg.write_text('seed = 5\nreplicas = 3\nservice = "kv"\n[service_args]\nbucket_count = 64\n')
    faults = tmp_path / "f.toml"
    faults.write_text('[[fault]]\ntime = 30000.0\naction = "kill_leader"\n'
                      '[[fault]]\ntime = 80000.0\naction = "restart_all"\n')
    assert main(["sim", "--config", str(cfg), "--faults", str(faults), "--ops", "200"]) == 0
    assert "ok" in capsys.readouterr().out


def test_cli_failover_json(capsys):
    assert main(["failover", "--ops", "2000", "--keys", "64", "--clients", "4", "--json"]) == 0
    assert '"acked_loss": 0' in capsys.readouterr().out


@pytest.mark.parametrize("argv", [
    ["bench", "--benchmark", "nope"],
    ["bench", "--replicas", "2"],
    ["bench", "--serial", "--commute"],
    ["serve"],
    [],
])
def test_cli_usage_errors_exit_2(argv):
    with pytest.raises(SystemExit) as e:
        main(argv)
    assert e.value.code == 2


def test_parse_command():
    assert parse_command(["put", "k", "hello", "world"]) == \
        (EntryKind.UPDATE, codec.kv_put(b"k", b"hello world"), "kv")
    assert parse_command(["GET", "k"]) == (EntryKind.READ, codec.kv_get(b"k"), "kv")
    assert parse_command(["topk"]) == (EntryKind.READ, codec.vote_topk(), "vote")
    assert parse_command(["add", "1", "2", "w"])[1] == codec.graph_add(1, 2, b"w")
    with pytest.raises(ValueError):
        parse_command(["frobnicate"])
    with pytest.raises(ValueError):
        parse_command(["up", "notanumber"])
    with pytest.raises(ValueError):
        parse_command(["get"])


def test_describe_response():
    assert describe_response("kv", b"") == "(empty)"
    assert describe_response("echo", b"hi") == repr(b"hi")
    assert describe_response("kv", bytes([1])) == "NOT_FOUND"
    assert describe_response("kv", bytes([0]) + b"v") == "OK b'v'"
    assert describe_response("vote", codec.topk_response([(3, 9), (1, 2)])) == "3:9 1:2"


def test_parser_has_all_subcommands():
    ap = build_parser()
    text = ap.format_help()
    for cmd in ("bench", "failover", "crashfuzz", "sim", "serve", "client"):
        assert cmd in text


# -------------------------------------------------------- real sockets (smoke)

def _free_ports(n):
    socks = [socket.socket(socket.AF_INET, socket.SOCK_DGRAM) for _ in range(n)]
    for s in socks:
        s.bind(("127.0.0.1", 0))
    ports = [s.getsockname()[1] for s in socks]
    for s in socks:
        s.close()
    return ports


def test_udp_cluster_smoke():
    """Outside the correctness suite: checks the socket glue, not the protocol."""
    from blizzard.net.client import make_read_rpc, make_update_rpc
    from blizzard.net.udp import UdpClient, UdpServer
    from blizzard.node import NodeConfig

    peers = {i: ("127.0.0.1", p) for i, p in enumerate(_free_ports(3))}
    servers = [UdpServer(NodeConfig(i, [0, 1, 2], "kv", {"bucket_count": 64}, executors=2,
                                    executor="threaded", election_timeout=150_000.0,
                                    heartbeat_interval=25_000.0),
                         peers, arena_capacity=4 << 20) for i in peers]
    threads = [threading.Thread(target=s.serve, daemon=True) for s in servers]
    for t in threads:
        t.start()
    cli = UdpClient(1, peers)
    try:
        st, _ = make_update_rpc(cli.session, codec.kv_put(b"a", b"1"), cli, horizon=10e6)
        assert st == 0
        st, resp = make_read_rpc(cli.session, codec.kv_get(b"a"), cli, horizon=10e6)
        assert st == 0 and codec.decode_kv_response(resp)[1] == b"1"
    finally:
        cli.close()
        for s in servers:
            s.stop.set()
        for t in threads:
            t.join(5)
