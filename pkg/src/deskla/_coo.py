"""Shared machinery for two-phase COO assembly (vectors and matrices)."""
from __future__ import annotations

import numpy as np

from .comm import Communicator, decode_array, encode_array


class SegmentedSum:
    """Race-free accumulation of contributions into slots in a fixed order.

    ``slots[c]`` is the destination of contribution ``c``; contributions to
    one slot are added left to right in increasing ``c``.  The work is split
    into *rounds*: round ``r`` adds the ``r``-th contribution of every slot
    that has more than ``r`` of them, so inside a round each slot is written
    at most once and the whole round is a single vectorized update.
    """

    def __init__(self, slots: np.ndarray, nslots: int):
        slots = np.asarray(slots, dtype=np.int64)
        self.nslots = int(nslots)
        self.ncontrib = slots.size
        order = np.argsort(slots, kind="stable")
        sorted_slots = slots[order]
        self.touched, seg_start, self.counts = np.unique(
            sorted_slots, return_index=True, return_counts=True
        )
        pos = np.arange(slots.size) - np.repeat(seg_start, self.counts)
        self.rounds = []
        for r in range(int(self.counts.max()) if self.counts.size else 0):
            sel = pos == r
            self.rounds.append((sorted_slots[sel], order[sel]))

    def apply(self, contrib: np.ndarray, out: np.ndarray, zero_touched: bool) -> None:
        if zero_touched:
            out[self.touched] = 0.0
        for dst, src in self.rounds:
            out[dst] += contrib[src]


class RemoteRouting:
    """Where each non-negative COO entry goes: kept locally or sent to an owner.

    Built collectively from the owner rank of every entry.  Remote entries are
    grouped per destination in ascending ``k``; the receiving side concatenates
    incoming buffers in ascending source rank.
    """

    def __init__(self, comm: Communicator, keep: np.ndarray, owners: np.ndarray,
                 payload_cols: list[np.ndarray]):
        self.comm = comm.dup()
        me = comm.rank
        kept = np.flatnonzero(keep)
        owner_kept = owners[kept]
        self.local_k = kept[owner_kept == me]
        self.send_k: dict[int, np.ndarray] = {}
        outgoing = []
        for r in range(comm.size):
            ks = kept[owner_kept == r] if r != me else np.empty(0, np.int64)
            if ks.size:
                self.send_k[r] = ks
            outgoing.append(encode_array(np.stack([col[ks] for col in payload_cols])
                                         if payload_cols else np.empty((0, ks.size), np.int64)))
        incoming = comm.alltoall(outgoing)
        self.recv_counts: dict[int, int] = {}
        received = []
        for q, payload in enumerate(incoming):
            if q == me:
                continue
            arr = decode_array(payload)
            if arr.shape[-1]:
                self.recv_counts[q] = arr.shape[-1]
                received.append(arr)
        ncols = len(payload_cols)
        self.received = (np.concatenate(received, axis=1) if received
                         else np.empty((ncols, 0), np.int64))
        self.nrecv = self.received.shape[1]

    def exchange(self, v: np.ndarray, tag: int = 0) -> np.ndarray:
        """Route values; returns ``[local values (ascending k), received values]``."""
        for r, ks in self.send_k.items():
            self.comm._send(r, tag, encode_array(np.ascontiguousarray(v[ks], dtype=np.float64)))
        parts = [np.asarray(v[self.local_k], dtype=np.float64)]
        for q in sorted(self.recv_counts):
            parts.append(decode_array(self.comm._recv(q, tag)))
        return np.concatenate(parts)


def collective_index_check(comm: Communicator, idx_arrays, limits, what: str) -> None:
    """Raise on every rank if any rank has an index at or beyond its limit."""
    problem = None
    for name, arr, lim in zip(("i", "j"), idx_arrays, limits):
        bad = np.flatnonzero(arr >= lim)
        if bad.size and problem is None:
            k = int(bad[0])
            problem = f"{what}: {name}[{k}] = {int(arr[k])} is outside the global size {lim}"
    nbad = comm.allreduce([0.0 if problem is None else 1.0])[0]
    if nbad:
        raise IndexError(problem or f"{what}: out-of-range index on another rank")
