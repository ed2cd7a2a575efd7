"""Benchmark harness: star-forest latency, task-launch latency, stencil solves,
batched-vs-ensemble throughput and L-BFGS effective bandwidth.

Every benchmark checks its answer against an oracle before it is timed and
returns :class:`BenchRecord` rows that :func:`write_csv` turns into a CSV
file with a plain-text metadata sidecar.  ``python -m deskla`` (or the
``deskla-bench`` script) is the command-line front end.
"""
from __future__ import annotations

import argparse
import csv
import math
import os
import platform
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .comm import ReduceOp, WorldError, comm_self, spawn_world
from .core_la import DistVector, InsertMode, Layout
from .krylov import BatchedSystem, SolverConfig, bicg_solo, solve, solve_batched, solve_ensemble, solve_tfqmr
from .lbfgs import (
    DiagonalOperator,
    Formulation,
    LbfgsState,
    effective_bandwidth,
    lbfgs_apply,
    lbfgs_update,
)
from .mat import DistCsrMatrix, mat_from_global, mat_set_preallocation_coo, mat_set_values_coo
from .sf import StarForest
from .stream import ctx_get_current, get_device, measure_submit_latency, set_default_stream_options

SCHEMA_VERSION = 1
MIN_REPS = 5


class OracleFailure(AssertionError):
    """A benchmark produced a wrong answer; nothing was timed."""


# -- records --------------------------------------------------------------------

@dataclass
class BenchRecord:
    """Timings of one configuration; ``timings[0]`` is the discarded warm-up."""

    name: str
    params: dict
    timings: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.timings) < MIN_REPS:
            raise ValueError(f"need at least {MIN_REPS} repetitions, got {len(self.timings)}")

    @property
    def reps(self) -> int:
        return len(self.timings)

    @property
    def kept(self) -> np.ndarray:
        return np.asarray(self.timings[1:], dtype=np.float64)

    @property
    def mean(self) -> float:
        return float(self.kept.mean())

    @property
    def min(self) -> float:
        return float(self.kept.min())

    @property
    def p50(self) -> float:
        return float(np.median(self.kept))

    def row(self) -> dict:
        out = {"schema_version": SCHEMA_VERSION, "bench": self.name}
        out.update(self.params)
        out.update({"reps": self.reps, "mean_s": self.mean, "min_s": self.min, "p50_s": self.p50})
        out.update(self.extra)
        return out


def time_reps(fn, reps: int) -> list[float]:
    """Wall time of ``reps`` calls (monotonic clock), warm-up included."""
    reps = max(int(reps), MIN_REPS)
    out = []
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        out.append(time.perf_counter() - t0)
    return out


def write_csv(records, path=None, meta: dict | None = None) -> None:
    """Write one row per record.  ``path=None`` prints to stdout.

    The header is the union of all row keys in first-seen order, so every
    benchmark keeps a stable column order.  A ``<path>.meta.txt`` sidecar
    records the run metadata.
    """
    rows = [r.row() if isinstance(r, BenchRecord) else dict(r) for r in records]
    cols: list[str] = []
    for r in rows:
        cols.extend(k for k in r if k not in cols)
    fh = open(path, "w", newline="") if path else sys.stdout
    try:
        w = csv.DictWriter(fh, fieldnames=cols, restval="")
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.6g}" if isinstance(v, float) else v) for k, v in r.items()})
    finally:
        if path:
            fh.close()
    if path:
        lines = [f"{k}: {v}" for k, v in (meta or {}).items()]
        lines += [f"schema_version: {SCHEMA_VERSION}", f"python: {platform.python_version()}",
                  f"numpy: {np.__version__}", f"cpus: {os.cpu_count()}"]
        Path(str(path) + ".meta.txt").write_text("\n".join(lines) + "\n")


# -- stencil problems ---------------------------------------------------------------

def stencil_offsets(dim: int, M: int) -> list[tuple]:
    """Neighbour offsets: 5/9 points in 2-D and 7/27 points in 3-D (M = 0/1)."""
    if dim not in (2, 3) or M not in (0, 1):
        raise ValueError("dim must be 2 or 3 and M must be 0 or 1")
    rng = (-1, 0, 1)
    if dim == 2:
        offs = [(a, b) for a in rng for b in rng]
    else:
        offs = [(a, b, c) for a in rng for b in rng for c in rng]
    offs = [o for o in offs if any(o)]
    if M == 0:
        offs = [o for o in offs if sum(map(abs, o)) == 1]
    return offs


@dataclass
class StencilProblem:
    dim: int
    M: int
    extent: int
    A: DistCsrMatrix
    b: DistVector

    @property
    def n(self) -> int:
        return self.extent ** self.dim

    @property
    def points(self) -> int:
        return len(stencil_offsets(self.dim, self.M)) + 1


def stencil_triplets(dim: int, M: int, extent: int, rows: np.ndarray):
    """Per-cell COO triplets for the given global rows.

    Each cell writes its diagonal (number of neighbours) and ``-1`` for every
    neighbour; neighbours outside the grid get column ``-1`` so the entry is
    dropped (homogeneous Dirichlet boundary).
    """
    offs = np.array(stencil_offsets(dim, M))
    shape = (extent,) * dim
    coords = np.stack(np.unravel_index(rows, shape), axis=1)
    npt = len(offs) + 1
    i = np.repeat(rows, npt)
    j = np.empty((rows.size, npt), np.int64)
    v = np.empty((rows.size, npt))
    j[:, 0] = rows
    v[:, 0] = float(len(offs))
    for k, o in enumerate(offs, start=1):
        nb = coords + o
        inside = np.all((nb >= 0) & (nb < extent), axis=1)
        flat = np.ravel_multi_index(tuple(np.where(inside[:, None], nb, 0).T), shape)
        j[:, k] = np.where(inside, flat, -1)
        v[:, k] = -1.0
    return i, j.reshape(-1), v.reshape(-1)


def stencil_rhs(n: int, seed: int = 0) -> np.ndarray:
    return np.random.default_rng(seed).uniform(-1.0, 1.0, n)


def stencil_problem(comm, dim: int, M: int, extent: int, seed: int = 0) -> StencilProblem:
    """Collective: assemble the stencil matrix through the two-phase COO path."""
    n = extent ** dim
    lay = Layout.uniform(n, comm.size)
    lo, hi = lay.range(comm.rank)
    i, j, v = stencil_triplets(dim, M, extent, np.arange(lo, hi))
    A = DistCsrMatrix(comm, lay)
    mat_set_preallocation_coo(A, i.size, i, j)
    mat_set_values_coo(A, v, InsertMode.INSERT)
    b = DistVector(comm, lay, stencil_rhs(n, seed)[lo:hi])
    return StencilProblem(dim, M, extent, A, b)


def stencil_global(dim: int, M: int, extent: int) -> sp.csr_matrix:
    """The same matrix built serially (oracle input)."""
    n = extent ** dim
    i, j, v = stencil_triplets(dim, M, extent, np.arange(n))
    keep = j >= 0
    return sp.csr_matrix((v[keep], (i[keep], j[keep])), shape=(n, n))


# -- star-forest latency ----------------------------------------------------------------

def _pingpong_program(sizes, iters, reps, op: ReduceOp):
    def program(comm):
        out = []
        for n in sizes:
            nroots = n if comm.rank == 0 else 0
            if comm.rank == 1:
                leaves = (np.arange(n), np.zeros(n, np.int64), np.arange(n))
            else:
                leaves = (np.empty(0, np.int64),) * 3
            sf = StarForest(comm, nroots, leaves)
            init = np.ldexp(1.0 + np.arange(n) / max(n, 1), -1000)
            root = np.zeros(nroots)
            leaf = np.zeros(n if comm.rank == 1 else 0)

            def loop(k):
                for _ in range(k):
                    sf.bcast(root, leaf, ReduceOp.REPLACE)
                    sf.reduce(leaf, root, op)

            # oracle: a REPLACE round trip preserves roots, a SUM round trip doubles them
            root[:] = init[:nroots]
            loop(iters)
            expect = init[:nroots] if op is ReduceOp.REPLACE else np.ldexp(init[:nroots], iters)
            ok = bool(np.array_equal(root, expect))
            if comm.allreduce([0.0 if ok else 1.0])[0]:
                raise OracleFailure(f"star-forest round trip wrong for n={n}")

            times = []
            for _ in range(max(reps, MIN_REPS)):
                root[:] = init[:nroots]
                comm.barrier()
                t0 = time.perf_counter()
                loop(iters)
                comm.barrier()
                times.append((time.perf_counter() - t0) / (2 * max(iters, 1)))
            out.append(times)
        return out
    return program


def bench_sf(sizes, iters: int = 1000, reps: int = MIN_REPS, op: ReduceOp = ReduceOp.REPLACE,
             ranks: int = 2) -> list[BenchRecord]:
    """One-way latency of a bcast+reduce round trip over a one-on-one star forest."""
    if ranks != 2:
        raise ValueError("star-forest latency benchmarks need exactly 2 ranks")
    res = spawn_world(2, _pingpong_program(list(sizes), iters, reps, op))
    name = "sf-pingpong" if op is ReduceOp.REPLACE else "sf-unpack"
    return [BenchRecord(name, {"op": op.name, "n": n, "bytes": 8 * n, "iters": iters}, t)
            for n, t in zip(sizes, res[0])]


def bench_sf_pingpong(sizes, iters=1000, reps=MIN_REPS, ranks=2):
    return bench_sf(sizes, iters, reps, ReduceOp.REPLACE, ranks)


def bench_sf_unpack(sizes, iters=1000, reps=MIN_REPS, ranks=2):
    return bench_sf(sizes, iters, reps, ReduceOp.SUM, ranks)


# -- launch latency -----------------------------------------------------------------------

def bench_launch_latency(count: int = 100_000, reps: int = MIN_REPS) -> list[BenchRecord]:
    """Per-submission latency of an empty task, enqueue-all vs sync-after-each."""
    ctx = ctx_get_current()
    recs = []
    for mode in ("async", "sync-each"):
        times = [measure_submit_latency(mode, count, ctx) for _ in range(max(reps, MIN_REPS))]
        recs.append(BenchRecord("launch-latency", {"mode": mode, "count": count}, times,
                                {"workers": get_device().workers}))
    return recs


# -- stencil solves ---------------------------------------------------------------------------

SOLVE_METHODS = ("cg", "cg_device", "cg_async", "tfqmr", "tfqmr_async")


def solver_config(method: str, **kw) -> SolverConfig:
    """``cg_device`` is blocking CG running as device tasks (one host wait per reduction)."""
    if method == "cg_device":
        return SolverConfig("cg", domain="device", **kw)
    return SolverConfig(method, **kw)


def _solve_program(dim, M, extents, methods, iters, reps, rtol, seed):
    def program(comm):
        rows = []
        for ext in extents:
            prob = stencil_problem(comm, dim, M, ext, seed)
            nnz = prob.A.global_nnz()
            bnorm = math.sqrt(float(comm.allreduce([float(prob.b.local @ prob.b.local)])[0]))
            for method in methods:
                # correctness first: solve to rtol and check the true residual
                _, rep = solve(prob.A, prob.b, config=solver_config(method, rtol=rtol, max_it=20 * prob.n))
                if not (rep.converged and rep.residual <= rtol):
                    raise OracleFailure(f"{method} did not converge on {dim}-D extent {ext}")
                cfg = solver_config(method, rtol=1e-300, max_it=iters, check_stride=iters)
                last = {}

                def run():
                    comm.barrier()
                    last["rep"] = solve(prob.A, prob.b, config=cfg)[1]
                    comm.barrier()

                times = time_reps(run, reps)
                r = last["rep"]
                rows.append(({"dim": dim, "M": M, "extent": ext, "n": prob.n, "nnz": nnz,
                               "method": method, "ranks": comm.size, "iterations": r.iterations},
                              times, {"sync_points": r.sync_points, "reductions": r.reductions,
                                      "converge_its": rep.iterations, "bnorm": bnorm}))
        return rows
    return program


def bench_solve(dim=2, M=0, extents=(16, 32), methods=("cg", "cg_device", "cg_async"), iters=100,
                reps=MIN_REPS, rtol=1e-8, ranks=1, seed=0) -> list[BenchRecord]:
    rows = spawn_world(ranks, _solve_program(dim, M, list(extents), list(methods), iters, reps, rtol, seed))[0]
    return [BenchRecord("solve", p, t, e) for p, t, e in rows]


# -- batched vs ensemble -----------------------------------------------------------------------

def random_batch(B: int, n: int, seed: int = 0, density: float = 0.25,
                 dominance=(1.1, 3.0)) -> BatchedSystem:
    """``B`` diagonally dominant nonsymmetric systems on one random pattern."""
    rng = np.random.default_rng(seed)
    pat = (sp.random(n, n, density=density, random_state=rng) + sp.identity(n)).tocsr()
    pat.sort_indices()
    rows = np.repeat(np.arange(n), np.diff(pat.indptr))
    diag = rows == pat.indices
    vals = rng.uniform(-1.0, 1.0, (B, pat.nnz))
    vals[:, diag] = 0.0
    offsum = np.zeros((B, n))
    np.add.at(offsum.T, rows, np.abs(vals).T)
    dom = rng.uniform(*dominance, (B, 1))
    vals[:, diag] = (offsum * dom + 1e-3)[:, rows[diag]]
    rhs = rng.standard_normal((B, n))
    return BatchedSystem(pat.indptr, pat.indices, vals, rhs)


def solo_solve(sys: BatchedSystem, k: int, method: str, cfg: SolverConfig):
    """Lane ``k`` solved on its own (the per-lane oracle)."""
    if method == "tfqmr":
        c = comm_self()
        A = mat_from_global(c, sys.lane_matrix(k))
        b = DistVector(c, A.row_layout, sys.rhs[k])
        x, rep = solve_tfqmr(A, b, config=SolverConfig("tfqmr", cfg.rtol, cfg.max_it, pc=cfg.pc))
        return x.local.copy(), rep
    return bicg_solo(sys.lane_matrix(k), sys.rhs[k], cfg)


def bench_batch(Bs=(1, 8, 64), n_b=16, method="tfqmr", reps=MIN_REPS, rtol=1e-10, pc="jacobi",
                seed=0) -> list[BenchRecord]:
    """Solves per second for batched, ensemble and one-at-a-time execution."""
    cfg = SolverConfig(f"{method}_batched", rtol=rtol, pc=pc)
    recs = []
    for B in Bs:
        sys = random_batch(B, n_b, seed)
        X, reps_b = solve_batched(sys, method, cfg)
        for k in range(B):
            xs, _ = solo_solve(sys, k, method, cfg)
            if np.linalg.norm(X[k] - xs) > 1e-10 * np.linalg.norm(xs):
                raise OracleFailure(f"batched lane {k} disagrees with its solo solve")
        Xe, rep_e = solve_ensemble(sys, method, cfg)
        if np.max(np.abs(Xe - X)) > 1e3 * rtol * max(1.0, np.abs(X).max()):
            raise OracleFailure("ensemble solution disagrees with the batched solution")
        modes = {
            "batched": lambda: solve_batched(sys, method, cfg),
            "ensemble": lambda: solve_ensemble(sys, method, cfg),
            "solo": lambda: [solo_solve(sys, k, method, cfg) for k in range(B)],
        }
        for mode, fn in modes.items():
            t = time_reps(fn, reps)
            rec = BenchRecord("batch-bench", {"method": method, "mode": mode, "B": B, "n_b": n_b}, t)
            its = rep_e.iterations if mode == "ensemble" else max(r.iterations for r in reps_b)
            rec.extra = {"solves_per_s": B / rec.mean, "iterations": its}
            recs.append(rec)
    return recs


# -- L-BFGS bandwidth ------------------------------------------------------------------------

def _lbfgs_history(n, m, rng, H0, cache_w):
    st = LbfgsState(n, m, H0, cache_w=cache_w)
    lam = rng.uniform(0.5, 2.0, n)
    for _ in range(m):
        s = rng.standard_normal(n)
        lbfgs_update(st, s, lam * s)
    return st, lam


def bench_lbfgs(ns=(1000,), ms=(5, 50), formulations=tuple(Formulation), iters=100,
                reps=MIN_REPS, seed=0) -> list[BenchRecord]:
    """Time ``iters`` update+apply steps per configuration; report effective bandwidth.

    The per-step time is split into ``t_update`` and ``t_solve`` and the
    bandwidth ``n(2m+2)/(t_update + t_solve)`` is emitted in elements and bytes.
    """
    recs = []
    for n in ns:
        for m in ms:
            rng = np.random.default_rng(seed)
            H0d = rng.uniform(0.5, 2.0, n)
            ref_state, lam = _lbfgs_history(n, m, np.random.default_rng(seed + 1), DiagonalOperator(H0d), True)
            g = rng.standard_normal(n)
            ref = lbfgs_apply(ref_state, g, Formulation.RECURSIVE)
            for f in formulations:
                f = Formulation(f)
                chk = lbfgs_apply(ref_state, g, f)
                if np.linalg.norm(chk - ref) > 1e-8 * np.linalg.norm(ref):
                    raise OracleFailure(f"{f.value} disagrees with the two-loop recursion")
                cache_w = f is Formulation.COMPACT_DENSE
                st, _ = _lbfgs_history(n, m, np.random.default_rng(seed + 1), DiagonalOperator(H0d), cache_w)
                steps = [rng.standard_normal(n) for _ in range(iters)]
                split = {"upd": 0.0, "app": 0.0}

                def run():
                    tu = ta = 0.0
                    for s in steps:
                        t0 = time.perf_counter()
                        lbfgs_update(st, s, lam * s)
                        t1 = time.perf_counter()
                        lbfgs_apply(st, g, f)
                        ta += time.perf_counter() - t1
                        tu += t1 - t0
                    split["upd"], split["app"] = tu / iters, ta / iters

                times = [t / iters for t in time_reps(run, reps)]
                rec = BenchRecord("lbfgs-bench", {"formulation": f.value, "n": n, "m": m, "iters": iters}, times)
                be = effective_bandwidth(n, m, split["upd"], split["app"])
                rec.extra = {"t_update_s": split["upd"], "t_solve_s": split["app"],
                             "Be_elements_per_s": be, "Be_bytes_per_s": 8 * be}
                recs.append(rec)
    return recs


# -- CLI -----------------------------------------------------------------------------------------

def _ints(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--ranks", type=int, default=None, help="number of in-process ranks")
    common.add_argument("--iters", type=int, default=None, help="inner iterations per repetition")
    common.add_argument("--reps", type=int, default=MIN_REPS,
                        help=f"repetitions incl. one warm-up (>= {MIN_REPS})")
    common.add_argument("--csv", default=None, help="output CSV path (stdout if omitted)")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--stream-workers", type=int, default=None, help="worker threads per device")
    common.add_argument("--stream-deterministic", action="store_true",
                        help="run device tasks one at a time in submission order")

    p = argparse.ArgumentParser(prog="deskla-bench", description=__doc__.split("\n\n")[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("sf-pingpong", "sf-unpack"):
        s = sub.add_parser(name, parents=[common], help="star-forest round-trip latency")
        s.add_argument("--sizes", type=_ints, default=[0, 1, 16, 256, 4096, 65536])
    s = sub.add_parser("launch-latency", parents=[common], help="empty task submission latency")
    s.add_argument("--count", type=int, default=100_000)
    s = sub.add_parser("solve", parents=[common], help="sync vs async stencil solves")
    s.add_argument("--dim", type=int, choices=(2, 3), default=2)
    s.add_argument("--M", type=int, choices=(0, 1), default=0)
    s.add_argument("--extents", type=_ints, default=[16, 32, 64])
    s.add_argument("--methods", default="cg,cg_device,cg_async")
    s.add_argument("--rtol", type=float, default=1e-8)
    s = sub.add_parser("batch-bench", parents=[common], help="batched vs ensemble throughput")
    s.add_argument("--batch-sizes", type=_ints, default=[1, 8, 64, 256])
    s.add_argument("--nb", type=int, default=16)
    s.add_argument("--method", choices=("tfqmr", "bicg"), default="tfqmr")
    s.add_argument("--pc", choices=("none", "jacobi"), default="jacobi")
    s = sub.add_parser("lbfgs-bench", parents=[common], help="L-BFGS effective bandwidth sweep")
    s.add_argument("--n", type=_ints, default=[1000, 10000, 100000])
    s.add_argument("--m", type=_ints, default=[5, 10, 20, 50])
    s.add_argument("--formulations", default="recursive,compact,intermediate")
    return p


def run(args, parser) -> list[BenchRecord]:
    if args.reps < MIN_REPS:
        parser.error(f"--reps must be at least {MIN_REPS}")
    if args.iters is not None and args.iters < 1:
        parser.error("--iters must be positive")
    if args.ranks is not None and not 1 <= args.ranks <= 8:
        parser.error("--ranks must be between 1 and 8")
    cmd = args.command
    if cmd in ("sf-pingpong", "sf-unpack"):
        if args.ranks not in (None, 2):
            parser.error(f"{cmd} needs --ranks 2")
        if any(n < 0 for n in args.sizes):
            parser.error("--sizes must be nonnegative")
        fn = bench_sf_pingpong if cmd == "sf-pingpong" else bench_sf_unpack
        return fn(args.sizes, args.iters or 1000, args.reps)
    if args.ranks not in (None, 1) and cmd in ("launch-latency", "batch-bench", "lbfgs-bench"):
        parser.error(f"{cmd} is rank-local; omit --ranks or pass 1")
    if cmd == "launch-latency":
        if args.count < 1:
            parser.error("--count must be positive")
        return bench_launch_latency(args.count, args.reps)
    if cmd == "solve":
        methods = [m for m in args.methods.split(",") if m]
        bad = [m for m in methods if m not in SOLVE_METHODS]
        if bad or not methods:
            parser.error(f"unknown --methods {bad}")
        if any(e < 2 for e in args.extents):
            parser.error("--extents must be >= 2")
        return bench_solve(args.dim, args.M, args.extents, methods, args.iters or 100, args.reps,
                           args.rtol, args.ranks or 1, args.seed)
    if cmd == "batch-bench":
        if any(b < 1 for b in args.batch_sizes) or args.nb < 1:
            parser.error("batch sizes and --nb must be positive")
        return bench_batch(args.batch_sizes, args.nb, args.method, args.reps, pc=args.pc, seed=args.seed)
    if cmd == "lbfgs-bench":
        try:
            forms = [Formulation(f) for f in args.formulations.split(",") if f]
        except ValueError as exc:
            parser.error(str(exc))
        if any(m < 1 for m in args.m) or any(n < 1 for n in args.n):
            parser.error("--n and --m must be positive")
        return bench_lbfgs(args.n, args.m, forms, args.iters or 100, args.reps, args.seed)
    parser.error(f"unknown command {cmd}")


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    set_default_stream_options(args.stream_workers, args.stream_deterministic or None)
    try:
        records = run(args, parser)
    except OracleFailure as exc:
        print(f"oracle check failed: {exc}", file=sys.stderr)
        return 1
    except WorldError as exc:
        if isinstance(exc.original, OracleFailure):
            print(f"oracle check failed: {exc.original}", file=sys.stderr)
            return 1
        raise
    meta = {k: v for k, v in vars(args).items()}
    meta["workers"] = get_device().workers
    write_csv(records, args.csv, meta)
    return 0


if __name__ == "__main__":
    sys.exit(main())
