"""Iteration counts and throughput of batched solves against the stacked ensemble.

Mixes well and poorly conditioned lanes so the ensemble's dependence on the
worst lane is visible.
"""
import argparse
import sys
import time

import numpy as np

from deskla.bench import random_batch
from deskla.krylov import SolverConfig, solve_batched, solve_ensemble


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--batch-sizes", default="1,8,64,256")
    ap.add_argument("--nb", type=int, default=16)
    ap.add_argument("--method", choices=["tfqmr", "bicg"], default="tfqmr")
    ap.add_argument("--pc", choices=["none", "jacobi"], default="jacobi")
    ap.add_argument("--rtol", type=float, default=1e-10)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    cfg = SolverConfig(f"{args.method}_batched", rtol=args.rtol, pc=args.pc)
    print(f"{'B':>5} {'lane its (mean/max)':>20} {'ensemble its':>13} {'batched solves/s':>17} "
          f"{'ensemble solves/s':>18}")
    for B in (int(v) for v in args.batch_sizes.split(",")):
        sys_ = random_batch(B, args.nb, seed=args.seed, dominance=(1.01, 5.0))
        t0 = time.perf_counter()
        _, reps = solve_batched(sys_, args.method, cfg)
        t1 = time.perf_counter()
        _, rep_e = solve_ensemble(sys_, args.method, cfg)
        t2 = time.perf_counter()
        its = np.array([r.iterations for r in reps])
        print(f"{B:5d} {its.mean():10.1f} / {its.max():<8d} {rep_e.iterations:13d} "
              f"{B / (t1 - t0):17.0f} {B / (t2 - t1):18.0f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
