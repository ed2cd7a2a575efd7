"""Run every benchmark subcommand at desk scale and write one CSV per benchmark.

Usage::

    python3 scripts/run_all.py --out results/ [--quick]
"""
import argparse
import pathlib
import sys

from deskla.bench import main as bench_main

FULL = {
    "sf-pingpong": ["--sizes", "1,16,256,4096,65536", "--iters", "1000"],
    "sf-unpack": ["--sizes", "1,16,256,4096,65536", "--iters", "1000"],
    "launch-latency": ["--count", "100000"],
    "solve": ["--dim", "2", "--extents", "16,32,64", "--iters", "100"],
    "batch-bench": ["--batch-sizes", "1,8,64,256", "--nb", "16"],
    "lbfgs-bench": ["--n", "1000,100000", "--m", "5,10,20,50", "--iters", "100"],
}
QUICK = {
    "sf-pingpong": ["--sizes", "1,1024", "--iters", "100"],
    "sf-unpack": ["--sizes", "1,1024", "--iters", "100"],
    "launch-latency": ["--count", "10000"],
    "solve": ["--dim", "2", "--extents", "16", "--iters", "20"],
    "batch-bench": ["--batch-sizes", "1,16", "--nb", "16"],
    "lbfgs-bench": ["--n", "1000", "--m", "5,50", "--iters", "20"],
}


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="results", help="output directory")
    ap.add_argument("--quick", action="store_true", help="small sizes for a smoke run")
    ap.add_argument("--only", default=None, help="comma-separated subset of benchmarks")
    args = ap.parse_args(argv)
    out = pathlib.Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    plan = QUICK if args.quick else FULL
    names = args.only.split(",") if args.only else list(plan)
    status = 0
    for name in names:
        path = out / f"{name}.csv"
        print(f"{name} -> {path}", flush=True)
        rc = bench_main([name, *plan[name], "--csv", str(path)])
        status = status or rc
    return status


if __name__ == "__main__":
    sys.exit(main())
