#!/usr/bin/env python3
"""Ablation grid over the simulated cluster, one CSV row per run.

    python scripts/run_benchmarks.py --out results/bench.csv --seeds 3
"""

import argparse
import sys

from blizzard import bench as B

GRID = [
    # (benchmark, read fraction, key space, clients, ablations)
    ("echo", 0.0, 1, 256, [B.Ablation(), B.Ablation(no_batching=True)]),
    ("kv", 0.5, 10_000, 64, [B.Ablation(), B.Ablation(serial=True), B.Ablation(copy=True)]),
    ("graph", 0.5, 10_000, 64, [B.Ablation(), B.Ablation(serial=True)]),
    ("vote", 0.95, 10_000, 64, [B.Ablation(), B.Ablation(serial=True)]),
]


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="bench.csv")
    ap.add_argument("--ops", type=int, default=10_000)
    ap.add_argument("--seeds", type=int, default=1)
    ap.add_argument("--executors", type=int, default=4)
    ap.add_argument("--distribution", choices=("uniform", "zipfian"), default="uniform")
    ap.add_argument("--only", nargs="*", choices=B.BENCHMARKS, help="restrict to these benchmarks")
    a = ap.parse_args(argv)
    for name, rf, keys, clients, ablations in GRID:
        if a.only and name not in a.only:
            continue
        for seed in range(a.seeds):
            for ab in ablations:
                spec = B.WorkloadSpec(name, a.ops, rf, keys, a.distribution, seed=seed,
                                      clients=clients, executors=a.executors)
                row = B.run_bench(spec, ab).row
                B.append_csv(a.out, [row])
                print(f"{name:5s} {row.mode:12s} seed {seed}  {row.throughput_ops_s:>10,.0f} ops/s  "
                      f"p99 {row.p99_us:7.1f}us  fences/entry {row.fences_per_entry:.3f}  "
                      f"copies/op {row.copies_per_op:.2f}", flush=True)
    return 0


if __name__ == "__main__":
    sys.exit(main())
