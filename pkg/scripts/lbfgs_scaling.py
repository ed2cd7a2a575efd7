"""Per-step L-BFGS cost and effective bandwidth over a grid of n and m.

Prints a table of ``t_update + t_solve`` and ``B_e`` for each formulation and
optionally writes the raw records to CSV.
"""
import argparse
import sys

from deskla.bench import bench_lbfgs, write_csv


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", default="1000,10000,100000")
    ap.add_argument("--m", default="5,10,20,50")
    ap.add_argument("--iters", type=int, default=100)
    ap.add_argument("--reps", type=int, default=7)
    ap.add_argument("--csv", default=None)
    args = ap.parse_args(argv)
    ns = [int(v) for v in args.n.split(",")]
    ms = [int(v) for v in args.m.split(",")]
    recs = bench_lbfgs(ns, ms, iters=args.iters, reps=args.reps)
    print(f"{'formulation':>13} {'n':>7} {'m':>3} {'step us':>9} {'Be Melem/s':>11}")
    for r in recs:
        p = r.params
        print(f"{p['formulation']:>13} {p['n']:>7} {p['m']:>3} {r.p50 * 1e6:9.1f} "
              f"{r.extra['Be_elements_per_s'] / 1e6:11.1f}")
    if args.csv:
        write_csv(recs, args.csv)
    return 0


if __name__ == "__main__":
    sys.exit(main())
