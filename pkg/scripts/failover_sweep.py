#!/usr/bin/env python3
"""Leader-kill failover over many seeds and detection timeouts.

    python scripts/failover_sweep.py --runs 100 --timeouts 6000 12000 24000
"""

import argparse
import sys

from blizzard import bench as B


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--runs", type=int, default=100)
    ap.add_argument("--timeouts", type=float, nargs="+", default=[12_000.0],
                    help="detection timeouts T in virtual us")
    ap.add_argument("--clients", type=int, default=4)
    ap.add_argument("--ops", type=int, default=4000)
    a = ap.parse_args(argv)
    rc = 0
    for T in a.timeouts:
        within = lost = 0
        commits, detects = [], []
        for seed in range(a.runs):
            spec = B.WorkloadSpec("kv", a.ops, 0.5, 256, clients=a.clients, seed=seed)
            r = B.run_failover(spec, detect_timeout=T)
            within += r.within(4 * T)
            lost += r.acked_loss
            if r.first_commit_us is not None:
                commits.append(r.first_commit_us)
            if r.detection_us is not None:
                detects.append(r.detection_us)
        commits.sort()
        detects.sort()
        print(f"T={T / 1000:.1f}ms  within 4T: {within}/{a.runs}  acked loss {lost}  "
              f"detect p50 {B.percentile(detects, 50) / 1000:.1f}ms  "
              f"commit p50/p95/max {B.percentile(commits, 50) / 1000:.1f}/"
              f"{B.percentile(commits, 95) / 1000:.1f}/{commits[-1] / 1000:.1f}ms", flush=True)
        rc |= lost > 0
    return rc


if __name__ == "__main__":
    sys.exit(main())
