"""Star-forest communication graphs.

Roots are owned by ranks and addressed globally as ``(owner rank, offset)``;
leaves are addressed by a local integer index.  Each leaf is attached to
exactly one root, a root can have any number of leaves, and leaf index
spaces may contain holes (entries that no edge touches).

Broadcast moves root values to leaves, reduce moves leaf values to roots,
both under ``REPLACE`` or ``SUM``.  Reductions into a root are applied in a
fixed order -- ascending source rank, then ascending leaf index -- so sums
are reproducible and ``REPLACE`` with fan-in keeps the last contribution in
that order.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .comm import Communicator, ReduceOp, decode_array, encode_array

__all__ = ["StarForest", "SFSetupError", "SFUsageError", "sf_setup"]

_TAG_BCAST = 0
_TAG_REDUCE = 1


class SFSetupError(ValueError):
    pass


class SFUsageError(RuntimeError):
    pass


def _as_index_plan(idx: np.ndarray):
    """Slice when ``idx`` is a contiguous ascending run, else the index array."""
    if idx.size and idx[-1] - idx[0] == idx.size - 1 and np.all(np.diff(idx) == 1):
        return slice(int(idx[0]), int(idx[-1]) + 1)
    return idx


def _last_occurrence_mask(idx: np.ndarray) -> np.ndarray | None:
    """Mask keeping the final position of every repeated index, None if unique."""
    if np.unique(idx).size == idx.size:
        return None
    _, first_in_reversed = np.unique(idx[::-1], return_index=True)
    keep = np.zeros(idx.size, dtype=bool)
    keep[idx.size - 1 - first_in_reversed] = True
    return keep


@dataclass
class _Pending:
    kind: str
    op: ReduceOp
    src: np.ndarray
    dst: np.ndarray
    local: np.ndarray | None


class StarForest:
    """Communication plan for one star forest on one rank.

    Build with :func:`sf_setup` (collective).  The plan groups leaves by owner
    rank, ordered by ``(rank, root offset, leaf index)``; the owners hold the
    mirrored root offsets in the same order so packed buffers line up.
    """

    _ids = itertools.count()

    def __init__(self, comm: Communicator, nroots: int, leaves, *, validate: bool = True):
        leaf_idx, owners, offsets = (np.asarray(a, dtype=np.int64).reshape(-1) for a in leaves)
        if not (leaf_idx.size == owners.size == offsets.size):
            raise SFSetupError("leaf spec arrays differ in length")
        self.comm = comm
        self.nroots = int(nroots)
        self.nleaves = int(leaf_idx.size)
        self.id = next(self._ids)

        # every rank needs the owners' root counts to validate its own leaves
        all_nroots = [int(decode_array(p)[0]) for p in comm.allgather(encode_array(np.array([nroots])))]
        problems = []
        if leaf_idx.size:
            if leaf_idx.min() < 0:
                k = int(np.argmax(leaf_idx < 0))
                problems.append(f"leaf {leaf_idx[k]} has a negative index")
            if np.unique(leaf_idx).size != leaf_idx.size:
                problems.append("a leaf index appears more than once")
            bad_owner = (owners < 0) | (owners >= comm.size)
            if bad_owner.any():
                k = int(np.argmax(bad_owner))
                problems.append(f"leaf {leaf_idx[k]} names owner rank {owners[k]} outside the world")
            else:
                limits = np.asarray(all_nroots)[owners]
                bad = (offsets < 0) | (offsets >= limits)
                if bad.any():
                    k = int(np.argmax(bad))
                    problems.append(
                        f"leaf {leaf_idx[k]} references root offset {offsets[k]} on rank "
                        f"{owners[k]}, which owns {limits[k]} roots"
                    )
        nbad = comm.allreduce([len(problems)])[0] if validate else 0
        if nbad:
            msg = "; ".join(problems) if problems else "invalid leaves on another rank"
            raise SFSetupError(f"star forest setup failed on rank {comm.rank}: {msg}")

        order = np.lexsort((leaf_idx, offsets, owners))
        leaf_idx, owners, offsets = leaf_idx[order], owners[order], offsets[order]
        self.leaf_extent = int(leaf_idx.max()) + 1 if leaf_idx.size else 0

        bounds = np.searchsorted(owners, np.arange(comm.size + 1))
        self.leaf_ranks: list[int] = []
        self._leaf_idx: dict[int, np.ndarray] = {}
        outgoing = []
        for r in range(comm.size):
            lo, hi = bounds[r], bounds[r + 1]
            if hi > lo:
                self.leaf_ranks.append(r)
                self._leaf_idx[r] = leaf_idx[lo:hi].copy()
            outgoing.append(encode_array(offsets[lo:hi]))
        incoming = comm.alltoall(outgoing)
        self.root_ranks: list[int] = []
        self._root_idx: dict[int, np.ndarray] = {}
        for q, payload in enumerate(incoming):
            offs = decode_array(payload).astype(np.int64)
            if offs.size:
                self.root_ranks.append(q)
                self._root_idx[q] = offs

        # derived unpack plans
        self._leaf_plan = {r: _as_index_plan(ix) for r, ix in self._leaf_idx.items()}
        self._root_plan = {q: _as_index_plan(ix) for q, ix in self._root_idx.items()}
        self._root_last = {q: _last_occurrence_mask(ix) for q, ix in self._root_idx.items()}
        self._root_unique = {q: self._root_last[q] is None for q in self._root_idx}
        # persistent pack buffers, allocated on first use per dtype
        self._buffers: dict[tuple, np.ndarray] = {}

        self._host_comm = comm.dup()
        self._stream_comm = comm.stream_comm.dup()
        self._pending: _Pending | None = None

    # -- introspection -------------------------------------------------------

    def leaf_indices(self, rank: int) -> np.ndarray:
        return self._leaf_idx.get(rank, np.empty(0, np.int64))

    def root_indices(self, rank: int) -> np.ndarray:
        return self._root_idx.get(rank, np.empty(0, np.int64))

    # -- pack / unpack kernels ----------------------------------------------

    def _buffer(self, side: str, rank: int, n: int, dtype) -> np.ndarray:
        key = (side, rank, np.dtype(dtype).str)
        buf = self._buffers.get(key)
        if buf is None or buf.size != n:
            buf = self._buffers[key] = np.empty(n, dtype=dtype)
        return buf

    @staticmethod
    def _pack(data: np.ndarray, plan, out: np.ndarray) -> np.ndarray:
        if isinstance(plan, slice):
            return data[plan]
        np.take(data, plan, out=out)
        return out

    def _unpack_leaves(self, r: int, buf: np.ndarray, leafdata: np.ndarray, op: ReduceOp):
        plan = self._leaf_plan[r]
        if op is ReduceOp.REPLACE:
            leafdata[plan] = buf
        else:
            leafdata[plan] += buf

    def _unpack_roots(self, q: int, buf: np.ndarray, rootdata: np.ndarray, op: ReduceOp):
        plan = self._root_plan[q]
        if op is ReduceOp.REPLACE:
            keep = self._root_last[q]
            if keep is None:
                rootdata[plan] = buf
            else:
                rootdata[self._root_idx[q][keep]] = buf[keep]
        elif self._root_unique[q]:
            rootdata[plan] += buf
        else:
            # unbuffered, applied in buffer order
            np.add.at(rootdata, self._root_idx[q], buf)

    def _check_buffers(self, rootdata: np.ndarray, leafdata: np.ndarray):
        if rootdata.shape[0] < self.nroots:
            raise SFUsageError(f"root buffer has {rootdata.shape[0]} entries, need {self.nroots}")
        if leafdata.shape[0] < self.leaf_extent:
            raise SFUsageError(f"leaf buffer has {leafdata.shape[0]} entries, need {self.leaf_extent}")

    # -- split-phase broadcast ------------------------------------------------

    def bcast_begin(self, rootdata: np.ndarray, leafdata: np.ndarray, op: ReduceOp = ReduceOp.REPLACE):
        if self._pending is not None:
            raise SFUsageError(f"{self._pending.kind} already pending on this star forest")
        self._check_buffers(rootdata, leafdata)
        comm, me = self._host_comm, self.comm.rank
        local = None
        for q in self.root_ranks:
            packed = self._pack(rootdata, self._root_plan[q],
                                self._buffer("root", q, self._root_idx[q].size, rootdata.dtype))
            if q == me:
                local = packed.copy()
            else:
                comm._send(q, _TAG_BCAST, encode_array(packed))
        self._pending = _Pending("bcast", op, rootdata, leafdata, local)

    def bcast_end(self, rootdata: np.ndarray, leafdata: np.ndarray, op: ReduceOp = ReduceOp.REPLACE):
        pend = self._take_pending("bcast", op, rootdata, leafdata)
        comm, me = self._host_comm, self.comm.rank
        for r in self.leaf_ranks:
            buf = pend.local if r == me else decode_array(comm._recv(r, _TAG_BCAST))
            self._unpack_leaves(r, buf, leafdata, op)

    def bcast(self, rootdata, leafdata, op: ReduceOp = ReduceOp.REPLACE):
        self.bcast_begin(rootdata, leafdata, op)
        self.bcast_end(rootdata, leafdata, op)

    # -- split-phase reduction -----------------------------------------------

    def reduce_begin(self, leafdata: np.ndarray, rootdata: np.ndarray, op: ReduceOp = ReduceOp.SUM):
        if self._pending is not None:
            raise SFUsageError(f"{self._pending.kind} already pending on this star forest")
        self._check_buffers(rootdata, leafdata)
        comm, me = self._host_comm, self.comm.rank
        local = None
        for r in self.leaf_ranks:
            packed = self._pack(leafdata, self._leaf_plan[r],
                                self._buffer("leaf", r, self._leaf_idx[r].size, leafdata.dtype))
            if r == me:
                local = packed.copy()
            else:
                comm._send(r, _TAG_REDUCE, encode_array(packed))
        self._pending = _Pending("reduce", op, leafdata, rootdata, local)

    def reduce_end(self, leafdata: np.ndarray, rootdata: np.ndarray, op: ReduceOp = ReduceOp.SUM):
        pend = self._take_pending("reduce", op, leafdata, rootdata)
        comm, me = self._host_comm, self.comm.rank
        for q in self.root_ranks:
            buf = pend.local if q == me else decode_array(comm._recv(q, _TAG_REDUCE))
            self._unpack_roots(q, buf, rootdata, op)

    def reduce(self, leafdata, rootdata, op: ReduceOp = ReduceOp.SUM):
        self.reduce_begin(leafdata, rootdata, op)
        self.reduce_end(leafdata, rootdata, op)

    def _take_pending(self, kind, op, src, dst) -> _Pending:
        pend = self._pending
        if pend is None or pend.kind != kind:
            raise SFUsageError(f"{kind}_end called without a matching {kind}_begin")
        if pend.op is not op:
            raise SFUsageError(f"{kind}_end op {op.name} does not match begin op {pend.op.name}")
        if pend.src is not src or pend.dst is not dst:
            raise SFUsageError(f"{kind}_end called with buffers different from {kind}_begin")
        self._pending = None
        return pend

    # -- stream-aware variant -------------------------------------------------

    def bcast_async(self, ctx, rootdata, leafdata, op: ReduceOp = ReduceOp.REPLACE,
                    reads=(), writes=()):
        """Enqueue pack -> exchange -> unpack on ``ctx``; the caller never blocks.

        ``rootdata``/``leafdata`` may be arrays or zero-argument callables that
        return the arrays when the task runs (e.g. device views of a vector).
        ``reads``/``writes`` are tracker object ids for the root and leaf data.
        """
        from .stream import task_submit

        get_root = rootdata if callable(rootdata) else (lambda: rootdata)
        get_leaf = leafdata if callable(leafdata) else (lambda: leafdata)
        comm, me = self._stream_comm, self.comm.rank
        state: dict = {}

        def pack():
            root = get_root()
            state["out"] = {
                q: self._pack(root, self._root_plan[q],
                              np.empty(self._root_idx[q].size, root.dtype)).copy()
                for q in self.root_ranks
            }

        def exchange():
            out = state.pop("out")
            for q, packed in out.items():
                if q != me:
                    comm._send(q, _TAG_BCAST, encode_array(packed))
            state["in"] = {
                r: out[me] if r == me else decode_array(comm._recv(r, _TAG_BCAST))
                for r in self.leaf_ranks
            }

        def unpack():
            leaf = get_leaf()
            for r, buf in state.pop("in").items():
                self._unpack_leaves(r, buf, leaf, op)

        task_submit(ctx, reads=reads, writes=(), body=pack, name="sf-pack")
        task_submit(ctx, reads=(), writes=(), body=exchange, name="sf-exchange")
        task_submit(ctx, reads=(), writes=writes, body=unpack, name="sf-unpack")


def sf_setup(comm: Communicator, nroots: int, leaves) -> StarForest:
    """Collectively build a star forest.

    ``leaves`` is ``(leaf_indices, owner_ranks, root_offsets)``, three equal
    length integer sequences describing this rank's leaves.
    """
    return StarForest(comm, nroots, leaves)
