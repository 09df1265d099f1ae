#!/usr/bin/env python3
"""Crash-point fuzzing campaign: exhaustive sweeps over several op sequences plus seeded runs.

    python scripts/crashfuzz_campaign.py --sequences 5 --seeds 1000
"""

import argparse
import sys
import time

from blizzard import crashfuzz as CF


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--services", nargs="+", default=["kv", "graph", "vote"])
    ap.add_argument("--ops", type=int, default=5)
    ap.add_argument("--sequences", type=int, default=3, help="exhaustive sweeps per service")
    ap.add_argument("--seeds", type=int, default=200)
    ap.add_argument("--skip-undo-fence", action="store_true", help="fault-injected build")
    a = ap.parse_args(argv)
    bad = 0
    for svc in a.services:
        cfg = CF.FuzzConfig(service=svc, ops=a.ops, skip_undo_fence=a.skip_undo_fence)
        t0 = time.monotonic()
        for seq in range(a.sequences):
            rep = CF.exhaustive(cfg, seed=seq)
            bad += len(rep.failures)
            print(f"exhaustive seq {seq}: {rep.summary()}", flush=True)
        rep = CF.seeded(cfg, range(a.seeds))
        bad += len(rep.failures)
        print(f"seeded: {rep.summary()}  ({time.monotonic() - t0:.0f}s)", flush=True)
    print("failures:", bad)
    return 1 if bad else 0


if __name__ == "__main__":
    sys.exit(main())
