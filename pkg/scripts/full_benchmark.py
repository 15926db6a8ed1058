"""Full-size comparison: S=8 training / 5 test scenarios, T=249, up to 2000 ADMM iterations.

Expect many hours on one core; the baseline sweep runs 7 x 6900 epochs.

    python3 scripts/full_benchmark.py --out runs/full --seed 0 [--omegas 1 1000]
"""

import argparse
from pathlib import Path

from admm_pb import bench


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, default=Path("runs/full"))
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--config", type=Path, default=None)
    ap.add_argument("--threads", type=int, default=1)
    ap.add_argument("--omegas", type=float, nargs="*", default=None)
    args = ap.parse_args()
    cfg = bench.load_config(args.config, seed=args.seed)
    result = bench.run_benchmark(cfg, args.out, threads=args.threads, omegas=args.omegas,
                                 log=lambda m: print(m, flush=True))
    print(result["table"])


if __name__ == "__main__":
    main()
