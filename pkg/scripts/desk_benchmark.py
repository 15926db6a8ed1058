"""Desk-scale comparison over several seeds (S=4, T=100, 150 ADMM iterations).

    python3 scripts/desk_benchmark.py --seeds 0 1 2 --out runs/desk
"""

import argparse
import time
from pathlib import Path

from admm_pb import bench


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--out", type=Path, default=None)
    ap.add_argument("--threads", type=int, default=1)
    args = ap.parse_args()
    for seed in args.seeds:
        cfg = bench.load_config(desk=True, seed=seed)
        t0 = time.perf_counter()
        out = None if args.out is None else args.out / f"seed_{seed}"
        result = bench.run_benchmark(cfg, out, threads=args.threads,
                                     log=lambda m: print(f"[seed {seed}] {m}", flush=True))
        print(f"seed {seed} ({time.perf_counter() - t0:.0f} s)")
        print(result["table"], flush=True)


if __name__ == "__main__":
    main()
