"""Row-distributed CSR matrices with two-phase COO assembly.

Each rank stores its rows as two sequential CSR blocks: the *diagonal* block
holds entries whose column is owned by the same rank, the *off-diagonal*
block holds the rest with columns compressed through ``colmap`` (sorted
global ids of the ghost columns).  SpMV fetches ghost values with a star
forest whose roots are owned vector entries and whose leaves are ghosts.

Assembly follows the preallocate-once / set-values-many pattern:
:func:`mat_set_preallocation_coo` analyzes ``i``/``j`` and builds the routing
and accumulation plan, :func:`mat_set_values_coo` only moves numbers.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np
import scipy.sparse as sp

from ._coo import RemoteRouting, SegmentedSum, collective_index_check
from .comm import Communicator, ReduceOp, decode_array, encode_array
from .core_la import DistVector, InsertMode, Layout, LayoutMismatch
from .sf import StarForest
from .stream import DeviceContext, new_object_id

__all__ = [
    "DistCsrMatrix",
    "CooPlan",
    "mat_set_preallocation_coo",
    "mat_set_values_coo",
    "mat_mult",
    "mat_mult_async",
    "mat_get_diagonal",
    "mat_assemble_baseline",
    "accumulate_triplets",
    "mat_from_global",
    "read_triplets",
    "write_triplets",
]


def _empty_csr(nrows: int, ncols: int) -> sp.csr_matrix:
    return sp.csr_matrix((np.zeros(0), np.zeros(0, np.int32), np.zeros(nrows + 1, np.int32)),
                         shape=(nrows, ncols))


class CooPlan:
    """Routing and accumulation plan built by COO preallocation."""

    def __init__(self, n: int, routing: RemoteRouting, diag_sel, diag_acc, off_sel, off_acc):
        self.n = n
        self.routing = routing
        self.diag_sel = diag_sel
        self.diag_acc = diag_acc
        self.off_sel = off_sel
        self.off_acc = off_acc

    @property
    def contribution_counts(self) -> tuple[np.ndarray, np.ndarray]:
        """Number of COO contributions per stored nonzero (diag, offdiag)."""
        return self.diag_acc.counts, self.off_acc.counts


class DistCsrMatrix:
    """Rows ``[rstart, rend)`` of a distributed sparse matrix."""

    def __init__(self, comm: Communicator, row_layout: Layout, col_layout: Layout | None = None):
        col_layout = row_layout if col_layout is None else col_layout
        if row_layout.nranks != comm.size or col_layout.nranks != comm.size:
            raise LayoutMismatch("matrix layouts do not match the world size")
        self.comm = comm
        self.row_layout = row_layout
        self.col_layout = col_layout
        self.rstart, self.rend = row_layout.range(comm.rank)
        self.cstart, self.cend = col_layout.range(comm.rank)
        self.shape = (row_layout.N, col_layout.N)
        self.id = new_object_id()
        nloc, cloc = self.rend - self.rstart, self.cend - self.cstart
        self.diag = _empty_csr(nloc, cloc)
        self.offdiag = _empty_csr(nloc, 0)
        self.colmap = np.zeros(0, np.int64)
        self.halo: StarForest | None = None
        self.plan: CooPlan | None = None
        self.plan_builds = 0
        self._ghost = np.zeros(0)
        self._ghost_id = new_object_id()

    def __repr__(self):
        return (f"DistCsrMatrix(rank={self.comm.rank}, rows=[{self.rstart},{self.rend}), "
                f"shape={self.shape}, nnz_local={self.local_nnz})")

    @property
    def local_nnz(self) -> int:
        return int(self.diag.nnz + self.offdiag.nnz)

    def global_nnz(self) -> int:
        return int(self.comm.allreduce([self.local_nnz])[0])

    def _set_structure(self, diag: sp.csr_matrix, colmap: np.ndarray, offdiag: sp.csr_matrix):
        self.diag, self.colmap, self.offdiag = diag, colmap, offdiag
        owners = self.col_layout.owner_of(colmap)
        starts = np.asarray(self.col_layout.starts)
        self.halo = StarForest(
            self.comm, self.cend - self.cstart,
            (np.arange(colmap.size), owners, colmap - starts[owners]),
        )
        self._ghost = np.zeros(colmap.size)

    def check_invariants(self) -> None:
        """Assert CSR well-formedness and the diag/offdiag column split."""
        for blk, ncols in ((self.diag, self.cend - self.cstart), (self.offdiag, self.colmap.size)):
            ptr, ind = blk.indptr, blk.indices
            assert ptr[0] == 0 and ptr[-1] == ind.size and np.all(np.diff(ptr) >= 0)
            assert blk.shape[1] == ncols
            for r in range(blk.shape[0]):
                cols = ind[ptr[r]:ptr[r + 1]]
                assert np.all(np.diff(cols) > 0), "columns not strictly ascending"
                assert cols.size == 0 or (cols[0] >= 0 and cols[-1] < ncols)
        assert np.all(np.diff(self.colmap) > 0)
        assert not np.any((self.colmap >= self.cstart) & (self.colmap < self.cend))

    def local_rows_dense(self) -> np.ndarray:
        out = np.zeros((self.rend - self.rstart, self.shape[1]))
        out[:, self.cstart:self.cend] = self.diag.toarray()
        if self.colmap.size:
            out[:, self.colmap] = self.offdiag.toarray()
        return out

    def to_dense(self) -> np.ndarray:
        """Collective: the full matrix on every rank (small problems only)."""
        parts = self.comm.allgather(encode_array(self.local_rows_dense()))
        return np.concatenate([decode_array(p) for p in parts], axis=0)

    def to_scipy_local(self) -> sp.csr_matrix:
        """Owned rows with global column indices."""
        d = self.diag.tocoo()
        o = self.offdiag.tocoo()
        rows = np.concatenate([d.row, o.row])
        cols = np.concatenate([d.col + self.cstart, self.colmap[o.col]])
        vals = np.concatenate([d.data, o.data])
        return sp.csr_matrix((vals, (rows, cols)), shape=(self.rend - self.rstart, self.shape[1]))


def _block_from_keys(lr: np.ndarray, lc: np.ndarray, nrows: int, ncols: int):
    """Collapse duplicate (row, col) pairs; returns CSR block and slot per entry."""
    key = lr.astype(np.int64) * max(ncols, 1) + lc
    ukeys, slot = np.unique(key, return_inverse=True)
    rows, cols = np.divmod(ukeys, max(ncols, 1))
    indptr = np.concatenate([[0], np.cumsum(np.bincount(rows, minlength=nrows))])
    blk = sp.csr_matrix((np.zeros(ukeys.size), cols.astype(np.int32), indptr.astype(np.int32)),
                        shape=(nrows, ncols))
    return blk, slot.reshape(-1)


def mat_set_preallocation_coo(A: DistCsrMatrix, n: int, i, j) -> None:
    """Collective symbolic stage of COO assembly.

    Entries with a negative row or column index are dropped.  Remote rows are
    shipped to their owners, the diagonal and off-diagonal sparsity patterns
    are finalized with duplicates collapsed, and the routing/accumulation
    plan is kept for :func:`mat_set_values_coo`.  ``i``/``j`` are not retained.
    """
    i = np.asarray(i, dtype=np.int64).reshape(-1)
    j = np.asarray(j, dtype=np.int64).reshape(-1)
    if i.size != n or j.size != n:
        raise ValueError(f"expected {n} row and column indices, got {i.size} and {j.size}")
    comm = A.comm
    collective_index_check(comm, [i, j], A.shape, "mat_set_preallocation_coo")

    keep = (i >= 0) & (j >= 0)
    owners = np.where(keep, A.row_layout.owner_of(np.where(keep, i, 0)), -1)
    routing = RemoteRouting(comm, keep, owners, [i, j])
    rows = np.concatenate([i[routing.local_k], routing.received[0]]) - A.rstart
    cols = np.concatenate([j[routing.local_k], routing.received[1]])

    nloc = A.rend - A.rstart
    owned = (cols >= A.cstart) & (cols < A.cend)
    diag_sel = np.flatnonzero(owned)
    off_sel = np.flatnonzero(~owned)
    diag, dslot = _block_from_keys(rows[diag_sel], cols[diag_sel] - A.cstart, nloc, A.cend - A.cstart)
    colmap = np.unique(cols[off_sel])
    ccols = np.searchsorted(colmap, cols[off_sel])
    offdiag, oslot = _block_from_keys(rows[off_sel], ccols, nloc, colmap.size)

    A._set_structure(diag, colmap, offdiag)
    A.plan = CooPlan(n, routing, diag_sel, SegmentedSum(dslot, diag.nnz),
                     off_sel, SegmentedSum(oslot, offdiag.nnz))
    A.plan_builds += 1


def mat_set_values_coo(A: DistCsrMatrix, v, mode: InsertMode = InsertMode.INSERT) -> None:
    """Collective numeric stage: ``v`` follows the order of the preallocated ``i``/``j``.

    Each stored nonzero accumulates its contributions in a fixed order (local
    entries by ascending ``k``, then received entries by source rank and
    ``k``).  INSERT zeroes the stored nonzeros first.
    """
    plan = A.plan
    if plan is None:
        raise RuntimeError("mat_set_values_coo called before mat_set_preallocation_coo")
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    if v.size != plan.n:
        raise ValueError(f"expected {plan.n} values, got {v.size}")
    contrib = plan.routing.exchange(v)
    insert = mode is InsertMode.INSERT
    plan.diag_acc.apply(contrib[plan.diag_sel], A.diag.data, zero_touched=insert)
    plan.off_acc.apply(contrib[plan.off_sel], A.offdiag.data, zero_touched=insert)


def _check_mult(A: DistCsrMatrix, x: DistVector, y: DistVector):
    if x.layout != A.col_layout or y.layout != A.row_layout:
        raise LayoutMismatch("vector layouts do not match the matrix")
    if x is y:
        raise ValueError("mat_mult needs distinct input and output vectors")


def mat_mult(A: DistCsrMatrix, x: DistVector, y: DistVector | None = None) -> DistVector:
    """Collective ``y = A x``; the halo exchange overlaps the diagonal product."""
    if y is None:
        y = DistVector(A.comm, A.row_layout)
    _check_mult(A, x, y)
    xl = x.host_view()
    A.halo.bcast_begin(xl, A._ghost, ReduceOp.REPLACE)
    yl = A.diag @ xl
    A.halo.bcast_end(xl, A._ghost, ReduceOp.REPLACE)
    if A.colmap.size:
        yl += A.offdiag @ A._ghost
    y.host_view(write=True)[:] = yl
    return y


def mat_mult_async(ctx: DeviceContext, A: DistCsrMatrix, x: DistVector, y: DistVector) -> None:
    """Enqueue ``y = A x`` on ``ctx`` using the stream-aware halo exchange."""
    _check_mult(A, x, y)
    x._attach(ctx)
    y._attach(ctx)
    ghost = A._ghost
    if A.colmap.size:
        A.halo.bcast_async(ctx, x.device_view, ghost, ReduceOp.REPLACE,
                           reads=[x.id], writes=[A._ghost_id])

    def body():
        xd = x.device_view()
        yd = y.device_view(write=True)
        yd[:] = A.diag @ xd
        if A.colmap.size:
            yd += A.offdiag @ ghost

    ctx.device.submit(ctx, [x.id, A.id, A._ghost_id], [y.id], body, "mat-mult")


def mat_get_diagonal(A: DistCsrMatrix) -> DistVector:
    if A.row_layout != A.col_layout:
        raise LayoutMismatch("diagonal needs identical row and column layouts")
    return DistVector(A.comm, A.row_layout, A.diag.diagonal())


# -- reference assembly ------------------------------------------------------------

def accumulate_triplets(per_rank, row_layout: Layout, owner: int) -> dict:
    """Sequential oracle: accumulate the triplets owned by ``owner``.

    ``per_rank[r]`` is ``(i, j, v)`` supplied by rank ``r``.  The owner's own
    entries come first, then other ranks in ascending order, each by
    ascending ``k``; negative indices are skipped.
    """
    lo, hi = row_layout.range(owner)
    acc: dict = {}
    order = [owner] + [r for r in range(len(per_rank)) if r != owner]
    for r in order:
        ii, jj, vv = per_rank[r]
        for a, b, val in zip(np.asarray(ii).tolist(), np.asarray(jj).tolist(), np.asarray(vv).tolist()):
            if a < 0 or b < 0 or not lo <= a < hi:
                continue
            acc[(a, b)] = acc.get((a, b), 0.0) + val
    return acc


def mat_assemble_baseline(comm: Communicator, row_layout: Layout, col_layout: Layout, i, j, v
                          ) -> DistCsrMatrix:
    """Collective, single-threaded triplet assembly used as a test oracle."""
    mine = np.stack([np.asarray(i, float), np.asarray(j, float), np.asarray(v, float)])
    gathered = [decode_array(p) for p in comm.allgather(encode_array(mine))]
    per_rank = [(g[0].astype(np.int64), g[1].astype(np.int64), g[2]) for g in gathered]
    acc = accumulate_triplets(per_rank, row_layout, comm.rank)
    A = DistCsrMatrix(comm, row_layout, col_layout)
    nloc = A.rend - A.rstart
    keys = sorted(acc)
    dk = [(a, b) for a, b in keys if A.cstart <= b < A.cend]
    ok = [(a, b) for a, b in keys if not A.cstart <= b < A.cend]
    colmap = np.array(sorted({b for _, b in ok}), dtype=np.int64)

    def block(entries, colfn, ncols):
        if not entries:
            return _empty_csr(nloc, ncols)
        r = np.array([a - A.rstart for a, _ in entries])
        c = np.array([colfn(b) for _, b in entries])
        vals = np.array([acc[e] for e in entries])
        indptr = np.concatenate([[0], np.cumsum(np.bincount(r, minlength=nloc))])
        return sp.csr_matrix((vals, c.astype(np.int32), indptr.astype(np.int32)), shape=(nloc, ncols))

    pos = {b: k for k, b in enumerate(colmap.tolist())}
    A._set_structure(block(dk, lambda b: b - A.cstart, A.cend - A.cstart), colmap,
                     block(ok, lambda b: pos[b], colmap.size))
    return A


def mat_from_global(comm: Communicator, G, layout: Layout | None = None) -> DistCsrMatrix:
    """Distribute a global (scipy or dense) square matrix through the COO path."""
    G = sp.coo_matrix(G)
    if layout is None:
        layout = Layout.uniform(G.shape[0], comm.size)
    A = DistCsrMatrix(comm, layout, layout if G.shape[0] == G.shape[1] else Layout.uniform(G.shape[1], comm.size))
    lo, hi = layout.range(comm.rank)
    mine = (G.row >= lo) & (G.row < hi)
    mat_set_preallocation_coo(A, int(mine.sum()), G.row[mine], G.col[mine])
    mat_set_values_coo(A, G.data[mine], InsertMode.INSERT)
    return A


# -- triplet files -------------------------------------------------------------------

def read_triplets(path) -> tuple[int, int, np.ndarray, np.ndarray, np.ndarray]:
    """Read ``rows cols nnz`` followed by ``nnz`` lines of 0-based ``i j v``."""
    lines = [ln.split() for ln in Path(path).read_text().splitlines()
             if ln.strip() and not ln.lstrip().startswith(("#", "%"))]
    if not lines or len(lines[0]) != 3:
        raise ValueError(f"{path}: missing 'rows cols nnz' header")
    rows, cols, nnz = (int(t) for t in lines[0])
    body = lines[1:]
    if len(body) != nnz:
        raise ValueError(f"{path}: header announces {nnz} entries, found {len(body)}")
    i = np.array([int(t[0]) for t in body], dtype=np.int64)
    j = np.array([int(t[1]) for t in body], dtype=np.int64)
    v = np.array([float(t[2]) for t in body])
    return rows, cols, i, j, v


def write_triplets(path, rows: int, cols: int, i, j, v) -> None:
    out = [f"{rows} {cols} {len(i)}"]
    out += [f"{a} {b} {float(c)!r}" for a, b, c in zip(np.asarray(i).tolist(), np.asarray(j).tolist(), np.asarray(v).tolist())]
    Path(path).write_text("\n".join(out) + "\n")
