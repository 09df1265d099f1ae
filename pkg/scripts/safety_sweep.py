#!/usr/bin/env python3
"""Random fault schedules against a simulated cluster; reports any safety violation.

    python scripts/safety_sweep.py --seeds 1000 --replicas 5
"""

import argparse
import random
import sys
import time

from blizzard.libds import codec
from blizzard.logrep.entry import EntryKind
from blizzard.net.cluster import ClusterConfig, op_list_source, random_fault_schedule, run_sim
from blizzard.net.simnet import NetConfig


def workload(rng, n, keys):
    out = []
    for _ in range(n):
        k = b"k%d" % rng.randrange(keys)
        if rng.random() < 0.3:
            out.append((EntryKind.READ, codec.kv_get(k)))
        else:
            out.append((EntryKind.UPDATE, codec.kv_put(k, rng.randbytes(8))))
    return out


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, default=200)
    ap.add_argument("--start", type=int, default=0)
    ap.add_argument("--replicas", type=int, default=3)
    ap.add_argument("--ops", type=int, default=150)
    ap.add_argument("--duration", type=float, default=300_000.0, help="fault window, virtual us")
    ap.add_argument("--max-drop", type=float, default=0.2)
    a = ap.parse_args(argv)
    t0 = time.monotonic()
    bad = 0
    for seed in range(a.start, a.start + a.seeds):
        rng = random.Random(seed)
        faults = random_fault_schedule(rng, a.replicas, a.duration, max_drop=a.max_drop)
        cfg = ClusterConfig(replicas=a.replicas, seed=seed, service_args={"bucket_count": 64},
                            net=NetConfig(jitter=8.0))
        res = run_sim(cfg, faults, op_list_source(workload(rng, a.ops, 16)), clients=4,
                      trace=False, horizon=2e7)
        lost = res.checker.check_acked(res.acked)
        if not res.ok or lost:
            bad += 1
            print(f"seed {seed}: {res.checker.violations[:2]} {res.problems[:2]} lost={len(lost)}",
                  flush=True)
    print(f"{a.seeds} schedules, {bad} failing, {time.monotonic() - t0:.0f}s")
    return 1 if bad else 0


if __name__ == "__main__":
    sys.exit(main())
